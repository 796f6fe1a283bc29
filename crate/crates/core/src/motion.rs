//! Two-axis stepper gimbal: acceleration-limited move planning, trajectory
//! evaluation and positioning error.
//!
//! Each axis ramps its pulse rate linearly (constant pps/s) up to the cruise
//! rate and back down. Axes are planned independently and start together.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{steps_to_deg, GazeDirection, MICROSTEP_DEG};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MotionError {
    #[error("invalid motion profile: {0}")]
    InvalidProfile(&'static str),
    #[error("gimbal position ({x_steps}, {y_steps}) steps outside the +-45 deg range")]
    OutOfRange { x_steps: i64, y_steps: i64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MotionProfile<T> {
    /// Cruise pulse rate, pulses (micro-steps) per second.
    pub max_pps: T,
    /// Ramp rate, pulses per second squared.
    pub accel_pps2: T,
}

impl<T: Scalar> Default for MotionProfile<T> {
    fn default() -> Self {
        Self { max_pps: T::lit(3200.0), accel_pps2: T::lit(80_000.0) }
    }
}

impl<T: Scalar> MotionProfile<T> {
    pub fn validate(&self) -> Result<(), MotionError> {
        if !(self.max_pps > T::zero() && self.max_pps.is_finite()) {
            return Err(MotionError::InvalidProfile("max_pps must be positive"));
        }
        if !(self.accel_pps2 > T::zero() && self.accel_pps2.is_finite()) {
            return Err(MotionError::InvalidProfile("accel_pps2 must be positive"));
        }
        Ok(())
    }

    /// Distance in micro-steps at which the ramp exactly reaches `max_pps`.
    pub fn switch_distance_steps(&self) -> T {
        self.max_pps * self.max_pps / self.accel_pps2
    }
}

/// Commanded micro-step positions of both motors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GimbalState {
    pub x_steps: i64,
    pub y_steps: i64,
}

impl GimbalState {
    /// Largest |steps| per axis that stays strictly inside +-45 deg.
    pub const MAX_STEPS: i64 = 399;

    pub fn new(x_steps: i64, y_steps: i64) -> Result<Self, MotionError> {
        let s = Self { x_steps, y_steps };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), MotionError> {
        if self.x_steps.abs() > Self::MAX_STEPS || self.y_steps.abs() > Self::MAX_STEPS {
            return Err(MotionError::OutOfRange { x_steps: self.x_steps, y_steps: self.y_steps });
        }
        Ok(())
    }

    /// Nearest micro-step position for a gaze direction.
    pub fn nearest_to_gaze<T: Scalar>(g: &GazeDirection<T>) -> Self {
        let q = |deg: T| (deg.as_f64() / MICROSTEP_DEG).round() as i64;
        Self { x_steps: q(g.yaw_deg()), y_steps: q(g.pitch_deg()) }
    }

    pub fn gaze<T: Scalar>(&self) -> GazeDirection<T> {
        GazeDirection::from_degrees_unchecked(steps_to_deg(self.x_steps), steps_to_deg(self.y_steps))
    }
}

/// Ramp/cruise/ramp plan of a single axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisPlan<T> {
    pub start_steps: T,
    /// Signed distance in micro-steps.
    pub distance_steps: T,
    pub accel_pps2: T,
    pub peak_pps: T,
    pub t_accel_s: T,
    pub t_cruise_s: T,
}

impl<T: Scalar> AxisPlan<T> {
    fn plan(start: i64, end: i64, p: &MotionProfile<T>) -> Self {
        let start_steps = T::lit(start as f64);
        let distance_steps = T::lit((end - start) as f64);
        let d = distance_steps.abs();
        let (peak_pps, t_accel_s, t_cruise_s) = if d == T::zero() {
            (T::zero(), T::zero(), T::zero())
        } else if d <= p.switch_distance_steps() {
            let t_a = (d / p.accel_pps2).sqrt();
            (p.accel_pps2 * t_a, t_a, T::zero())
        } else {
            let t_a = p.max_pps / p.accel_pps2;
            (p.max_pps, t_a, (d - p.switch_distance_steps()) / p.max_pps)
        };
        Self { start_steps, distance_steps, accel_pps2: p.accel_pps2, peak_pps, t_accel_s, t_cruise_s }
    }

    pub fn duration_s(&self) -> T {
        T::two() * self.t_accel_s + self.t_cruise_s
    }

    pub fn is_triangular(&self) -> bool {
        self.t_cruise_s == T::zero()
    }

    fn sign(&self) -> T {
        if self.distance_steps < T::zero() {
            -T::one()
        } else {
            T::one()
        }
    }

    /// Unsigned distance covered after `t` seconds.
    fn travelled(&self, t: T) -> T {
        let d = self.distance_steps.abs();
        let a = self.accel_pps2;
        let ta = self.t_accel_s;
        let tc = self.t_cruise_s;
        if t <= T::zero() || d == T::zero() {
            return T::zero();
        }
        if t >= self.duration_s() {
            return d;
        }
        if t < ta {
            return T::half() * a * t * t;
        }
        let ramp = T::half() * a * ta * ta;
        if t < ta + tc {
            return ramp + self.peak_pps * (t - ta);
        }
        let td = t - ta - tc;
        let s = ramp + self.peak_pps * tc + self.peak_pps * td - T::half() * a * td * td;
        s.min(d)
    }

    /// Position in (fractional) micro-steps.
    pub fn position_steps(&self, t: T) -> T {
        self.start_steps + self.sign() * self.travelled(t)
    }

    /// Signed velocity in pulses per second.
    pub fn velocity_pps(&self, t: T) -> T {
        let ta = self.t_accel_s;
        let tc = self.t_cruise_s;
        if t <= T::zero() || t >= self.duration_s() {
            return T::zero();
        }
        let v = if t < ta {
            self.accel_pps2 * t
        } else if t < ta + tc {
            self.peak_pps
        } else {
            self.peak_pps - self.accel_pps2 * (t - ta - tc)
        };
        self.sign() * v.max(T::zero())
    }
}

/// A planned two-axis move.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory<T> {
    pub from: GimbalState,
    pub to: GimbalState,
    pub x: AxisPlan<T>,
    pub y: AxisPlan<T>,
}

impl<T: Scalar> Trajectory<T> {
    pub fn duration_s(&self) -> T {
        self.x.duration_s().max(self.y.duration_s())
    }

    /// Axis angles (yaw, pitch) in degrees.
    pub fn position_deg(&self, time_s: T) -> (T, T) {
        let k = T::lit(MICROSTEP_DEG);
        (self.x.position_steps(time_s) * k, self.y.position_steps(time_s) * k)
    }

    pub fn gaze(&self, time_s: T) -> GazeDirection<T> {
        let (x, y) = self.position_deg(time_s);
        GazeDirection::from_degrees_unchecked(x, y)
    }
}

/// Plan both axes independently; they start simultaneously.
pub fn plan_move<T: Scalar>(from: GimbalState, to: GimbalState, p: &MotionProfile<T>) -> Trajectory<T> {
    Trajectory {
        from,
        to,
        x: AxisPlan::plan(from.x_steps, to.x_steps, p),
        y: AxisPlan::plan(from.y_steps, to.y_steps, p),
    }
}

/// Closed-form peak angular velocity (deg/s) of a single-axis move.
pub fn peak_velocity_of_move<T: Scalar>(amplitude_deg: T, p: &MotionProfile<T>) -> T {
    let k = T::lit(MICROSTEP_DEG);
    let cruise = p.max_pps * k;
    let accel_degps2 = p.accel_pps2 * k;
    cruise.min((accel_degps2 * amplitude_deg.max(T::zero())).sqrt())
}

/// Axis angles in degrees at `time_s`; the end state once the move is over.
pub fn sample_trajectory<T: Scalar>(t: &Trajectory<T>, time_s: T) -> (T, T) {
    t.position_deg(time_s)
}

/// How positioning errors are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseScope {
    /// Error is a repeatable function of the commanded micro-step position
    /// (micro-step angle error, homing offset): revisiting a target lands on
    /// the same spot.
    #[default]
    PerTarget,
    /// A fresh draw for every move.
    PerMove,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PositioningNoise {
    pub max_error_microsteps: u32,
    pub scope: NoiseScope,
}

impl Default for PositioningNoise {
    fn default() -> Self {
        Self { max_error_microsteps: 2, scope: NoiseScope::PerTarget }
    }
}

impl PositioningNoise {
    pub fn none() -> Self {
        Self { max_error_microsteps: 0, ..Self::default() }
    }
}

/// Add an independent, discrete-uniform integer error in `[-e, e]` to each axis.
pub fn apply_positioning_noise<R: Rng + ?Sized>(target: GimbalState, n: &PositioningNoise, rng: &mut R) -> GimbalState {
    let e = n.max_error_microsteps as i64;
    if e == 0 {
        return target;
    }
    GimbalState {
        x_steps: target.x_steps + rng.gen_range(-e..=e),
        y_steps: target.y_steps + rng.gen_range(-e..=e),
    }
}

/// One entry of a pattern script.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptMove {
    pub target: GimbalState,
    pub dwell_ms: f64,
    /// Caller-defined tag (grid point id, target index), carried into the timeline.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u32>,
}

/// JSON-serializable list of gimbal targets with dwell times.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatternScript {
    #[serde(default)]
    pub start: GimbalState,
    pub moves: Vec<ScriptMove>,
}

impl PatternScript {
    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("script serializes")
    }
}

/// A move followed by a dwell, placed on the recording clock.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment<T> {
    pub start_s: T,
    pub trajectory: Trajectory<T>,
    pub dwell_s: T,
    pub label: Option<u32>,
    /// Target before positioning error.
    pub commanded: GimbalState,
}

impl<T: Scalar> Segment<T> {
    pub fn move_end_s(&self) -> T {
        self.start_s + self.trajectory.duration_s()
    }

    pub fn end_s(&self) -> T {
        self.move_end_s() + self.dwell_s
    }
}

/// Continuous-time gimbal motion through a sequence of moves and dwells.
#[derive(Debug, Clone, PartialEq)]
pub struct Timeline<T> {
    pub start: GimbalState,
    pub segments: Vec<Segment<T>>,
}

impl<T: Scalar> Timeline<T> {
    /// `moves` holds (actual target, commanded target, dwell ms, label).
    pub fn build(
        start: GimbalState,
        moves: impl IntoIterator<Item = (GimbalState, GimbalState, f64, Option<u32>)>,
        profile: &MotionProfile<T>,
    ) -> Self {
        let mut segments = Vec::new();
        let mut at = start;
        let mut clock = T::zero();
        for (actual, commanded, dwell_ms, label) in moves {
            let trajectory = plan_move(at, actual, profile);
            let seg = Segment { start_s: clock, trajectory, dwell_s: T::lit(dwell_ms / 1000.0), label, commanded };
            clock = seg.end_s();
            segments.push(seg);
            at = actual;
        }
        Self { start, segments }
    }

    /// Timeline of a script executed without positioning error.
    pub fn from_script(script: &PatternScript, profile: &MotionProfile<T>) -> Self {
        Self::build(
            script.start,
            script.moves.iter().map(|m| (m.target, m.target, m.dwell_ms, m.label)),
            profile,
        )
    }

    pub fn duration_s(&self) -> T {
        self.segments.last().map(|s| s.end_s()).unwrap_or_else(T::zero)
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Axis angles (yaw, pitch) in degrees at `time_s`.
    pub fn position_deg(&self, time_s: T) -> (T, T) {
        if self.segments.is_empty() || time_s <= T::zero() {
            return (steps_to_deg(self.start.x_steps), steps_to_deg(self.start.y_steps));
        }
        let i = self.segments.partition_point(|s| s.start_s <= time_s).saturating_sub(1);
        let seg = &self.segments[i];
        seg.trajectory.position_deg(time_s - seg.start_s)
    }

    pub fn gaze(&self, time_s: T) -> GazeDirection<T> {
        let (x, y) = self.position_deg(time_s);
        GazeDirection::from_degrees_unchecked(x, y)
    }
}
