//! Simulator of a robotic artificial eye watched by a video-based
//! pupil/corneal-reflection eye tracker, with the analysis pipeline for
//! accuracy, precision, main sequence and repeated-measures statistics.
//!
//! Geometry, motion and optics are generic over [`Scalar`]; the aliases
//! below fix the precision. The tracker and everything downstream run in f64.

pub mod events;
pub mod geometry;
pub mod harness;
pub mod motion;
pub mod optics;
pub mod scalar;
pub mod stats;
pub mod tracker;

pub use scalar::Scalar;

pub use events::{detect_saccades, filter_valid_saccades, velocity_series, DetectorConfig, EventRecord, SaccadeEvent};
pub use harness::{
    analyze_run, export_laser_pattern, gen_targets, pattern, run_precision_experiment, run_saccade_experiment,
    ExperimentConfig, HarnessError, PatternName, PatternSpec,
};
pub use stats::{fit_main_sequence, rm_anova, MainSequenceFit, PointStats, RmAnovaResult};
pub use tracker::{CalibrationMap, Reading, Sample, TrackerConfig, TrackingMode};

pub type Vec3F64 = geometry::Vec3<f64>;
pub type Vec3F32 = geometry::Vec3<f32>;
pub type GazeF64 = geometry::GazeDirection<f64>;
pub type GazeF32 = geometry::GazeDirection<f32>;
pub type ScreenPointF64 = geometry::ScreenPoint<f64>;
pub type ScreenPointF32 = geometry::ScreenPoint<f32>;
pub type ViewingGeometryF64 = geometry::ViewingGeometry<f64>;
pub type ViewingGeometryF32 = geometry::ViewingGeometry<f32>;
pub type LaserRigF64 = geometry::LaserRig<f64>;
pub type LaserRigF32 = geometry::LaserRig<f32>;
pub type MotionProfileF64 = motion::MotionProfile<f64>;
pub type MotionProfileF32 = motion::MotionProfile<f32>;
pub type TrajectoryF64 = motion::Trajectory<f64>;
pub type TrajectoryF32 = motion::Trajectory<f32>;
pub type TimelineF64 = motion::Timeline<f64>;
pub type TimelineF32 = motion::Timeline<f32>;
pub type EyeModelF64 = optics::EyeModel<f64>;
pub type EyeModelF32 = optics::EyeModel<f32>;
pub type CameraModelF64 = optics::CameraModel<f64>;
pub type CameraModelF32 = optics::CameraModel<f32>;
