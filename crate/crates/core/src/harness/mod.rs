//! Experiment orchestration: configuration, keyed random streams, target
//! generation, the pattern library, the three experiments, laser export and
//! run-directory persistence.

mod experiment;
mod laser;
mod precision;
mod rundir;

pub use experiment::*;
pub use laser::*;
pub use precision::*;
pub use rundir::*;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::events::{DetectorConfig, EventError};
use crate::geometry::{
    gaze_to_screen_point_unbounded, screen_point_to_gaze, GeometryError, LaserRig, ScreenPoint, ViewingGeometry,
};
use crate::motion::{
    apply_positioning_noise, GimbalState, MotionError, MotionProfile, NoiseScope, PatternScript, PositioningNoise,
    ScriptMove,
};
use crate::optics::{CameraModel, EyeModel, OpticsError, SceneCondition};
use crate::stats::StatsError;
use crate::tracker::{
    calibrate_with, grid_gazes, observe_grid, CalibrationGrid, CalibrationMap, TrackerConfig, TrackerError,
    TrackingMode,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("no feasible target {index} for participant {participant}")]
    InfeasibleStep { participant: u32, index: usize },
    #[error("unknown pattern '{0}'")]
    UnknownPattern(String),
    #[error("malformed run directory: {0}")]
    RunFormat(String),
    #[error(transparent)]
    Tracker(#[from] TrackerError),
    #[error(transparent)]
    Events(#[from] EventError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// Errors caused by bad user input rather than a failing simulation.
    pub fn is_validation(&self) -> bool {
        matches!(self, Self::Config(_) | Self::UnknownPattern(_) | Self::RunFormat(_) | Self::Json(_))
    }
}

fn cfg_err<E: std::fmt::Display>(what: &str) -> impl FnOnce(E) -> HarnessError + '_ {
    move |e| HarnessError::Config(format!("{what}: {e}"))
}

impl From<MotionError> for HarnessError {
    fn from(e: MotionError) -> Self {
        Self::Config(e.to_string())
    }
}

impl From<GeometryError> for HarnessError {
    fn from(e: GeometryError) -> Self {
        Self::Config(e.to_string())
    }
}

impl From<OpticsError> for HarnessError {
    fn from(e: OpticsError) -> Self {
        Self::Tracker(TrackerError::Optics(e))
    }
}

/// Level at which saccades enter the brightness ANOVAs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// One mean per participant and condition.
    #[default]
    PerParticipant,
    /// One row per commanded saccade retained in every condition.
    PerSaccade,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub participants: u32,
    pub saccades_per_condition: u32,
    pub conditions: Vec<SceneCondition>,
    pub fixation_ms: f64,
    pub amplitude_range_deg: (f64, f64),
    /// Fraction of the screen width/height kept free at every edge.
    pub overshoot_margin_fraction: f64,
    pub seed: u64,
    pub mode: TrackingMode,
    pub aggregation: Aggregation,
    /// Keep per-cell sample logs in memory and on disk.
    pub store_samples: bool,
    pub precision_trials: u32,
    /// Scene shown while calibrating.
    pub calibration_condition: SceneCondition,
    pub geometry: ViewingGeometry<f64>,
    pub eye: EyeModel<f64>,
    pub camera: CameraModel<f64>,
    pub motion: MotionProfile<f64>,
    pub positioning_noise: PositioningNoise,
    pub tracker: TrackerConfig,
    pub detector: DetectorConfig,
    pub laser_rig: LaserRig<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            participants: 200,
            saccades_per_condition: 200,
            conditions: SceneCondition::standard_set(),
            fixation_ms: 300.0,
            amplitude_range_deg: (4.5, 14.1),
            overshoot_margin_fraction: 0.10,
            seed: 1,
            mode: TrackingMode::Analytic,
            aggregation: Aggregation::PerParticipant,
            store_samples: true,
            precision_trials: 100,
            calibration_condition: SceneCondition::medium(),
            geometry: ViewingGeometry::default(),
            eye: EyeModel::default(),
            camera: CameraModel::default(),
            motion: MotionProfile::default(),
            positioning_noise: PositioningNoise::default(),
            tracker: TrackerConfig::default(),
            detector: DetectorConfig::default(),
            laser_rig: LaserRig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Desk-scale profile: 20 participants x 50 saccades, raster tracking.
    pub fn scaled() -> Self {
        Self { participants: 20, saccades_per_condition: 50, mode: TrackingMode::Raster, ..Self::default() }
    }

    pub fn from_json(s: &str) -> Result<Self, HarnessError> {
        let cfg: Self = serde_json::from_str(s).map_err(cfg_err("config"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Tracker settings with the experiment's mode applied.
    pub fn tracker_config(&self) -> TrackerConfig {
        TrackerConfig { mode: self.mode, ..self.tracker.clone() }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.geometry.validate()?;
        self.laser_rig.validate()?;
        self.motion.validate()?;
        self.eye.validate().map_err(cfg_err("eye"))?;
        self.camera.validate().map_err(cfg_err("camera"))?;
        self.tracker.validate().map_err(cfg_err("tracker"))?;
        self.detector.validate().map_err(cfg_err("detector"))?;
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        if self.participants == 0 || self.saccades_per_condition == 0 {
            return bad("participants and saccades_per_condition must be positive");
        }
        if self.conditions.is_empty() {
            return bad("conditions must not be empty");
        }
        for (i, c) in self.conditions.iter().enumerate() {
            if self.conditions[..i].iter().any(|d| d.name == c.name) {
                return bad("condition names must be unique");
            }
        }
        if !(self.fixation_ms >= 10.0 && self.fixation_ms.is_finite()) {
            return bad("fixation_ms must be at least 10");
        }
        if self.precision_trials == 0 {
            return bad("precision_trials must be positive");
        }
        let (lo, hi) = self.amplitude_range_deg;
        if !(lo > 0.0 && lo <= hi) {
            return bad("amplitude_range_deg must satisfy 0 < lo <= hi");
        }
        if !(0.0..0.5).contains(&self.overshoot_margin_fraction) {
            return bad("overshoot_margin_fraction must lie in [0, 0.5)");
        }
        let (a, b) = self.margin_rect();
        if screen_diag_deg(a, b, &self.geometry) < lo {
            return bad("amplitude range does not fit inside the margin-reduced screen");
        }
        if self.detector.amplitude_window_deg.0 > lo || self.detector.amplitude_window_deg.1 < hi {
            return bad("detector amplitude window must contain amplitude_range_deg");
        }
        Ok(())
    }

    /// Corners (top-left, bottom-right) of the screen area targets may use.
    pub fn margin_rect(&self) -> (ScreenPoint<f64>, ScreenPoint<f64>) {
        let f = self.overshoot_margin_fraction;
        let (w, h) = (self.geometry.screen_w_px as f64, self.geometry.screen_h_px as f64);
        (ScreenPoint::new(f * w, f * h), ScreenPoint::new((1.0 - f) * w, (1.0 - f) * h))
    }

    pub fn condition_names(&self) -> Vec<String> {
        self.conditions.iter().map(|c| c.name.to_string()).collect()
    }
}

fn screen_diag_deg(a: ScreenPoint<f64>, b: ScreenPoint<f64>, geom: &ViewingGeometry<f64>) -> f64 {
    crate::geometry::screen_angle_deg(a, b, geom)
}

/// Purpose tag of a random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Targets = 1,
    Positioning = 2,
    Calibration = 3,
    Pixels = 4,
    Precision = 5,
    Pattern = 6,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the child stream for `(root, purpose, keys...)`.
pub fn stream_seed(root: u64, stream: Stream, keys: &[u64]) -> u64 {
    let mut h = splitmix(root ^ splitmix(stream as u64));
    for k in keys {
        h = splitmix(h ^ splitmix(*k));
    }
    h
}

pub fn keyed_rng(root: u64, stream: Stream, keys: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(root, stream, keys))
}

/// FNV-1a hash of a condition name, used as a stream key.
pub fn condition_key(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Where the gimbal actually lands when commanded to `target`. `session`
/// separates independent runs; `move_keys` identify the move for per-move noise.
pub fn positioned(target: GimbalState, cfg: &ExperimentConfig, session: u64, move_keys: &[u64]) -> GimbalState {
    let mut keys = vec![session];
    match cfg.positioning_noise.scope {
        NoiseScope::PerTarget => keys.extend([target.x_steps as u64, target.y_steps as u64]),
        NoiseScope::PerMove => keys.extend_from_slice(move_keys),
    }
    let mut rng = keyed_rng(cfg.seed, Stream::Positioning, &keys);
    let s = apply_positioning_noise(target, &cfg.positioning_noise, &mut rng);
    let m = GimbalState::MAX_STEPS;
    GimbalState { x_steps: s.x_steps.clamp(-m, m), y_steps: s.y_steps.clamp(-m, m) }
}

/// A target snapped to the micro-step lattice.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub state: GimbalState,
    pub px: ScreenPoint<f64>,
}

impl Target {
    pub fn from_state(state: GimbalState, geom: &ViewingGeometry<f64>) -> Self {
        let px = gaze_to_screen_point_unbounded(&state.gaze(), geom).expect("gimbal range faces the screen");
        Self { state, px }
    }

    pub fn nearest(px: ScreenPoint<f64>, geom: &ViewingGeometry<f64>) -> Self {
        Self::from_state(GimbalState::nearest_to_gaze(&screen_point_to_gaze(px, geom)), geom)
    }
}

const TARGET_ATTEMPTS: usize = 10_000;

fn random_targets(
    rng: &mut ChaCha8Rng,
    count: usize,
    cfg: &ExperimentConfig,
    participant: u32,
) -> Result<Vec<Target>, HarnessError> {
    let geom = &cfg.geometry;
    let (a, b) = cfg.margin_rect();
    let inside = |p: ScreenPoint<f64>| p.x >= a.x && p.x <= b.x && p.y >= a.y && p.y <= b.y;
    let (lo, hi) = cfg.amplitude_range_deg;
    let mut out: Vec<Target> = Vec::with_capacity(count);
    for index in 0..count {
        let mut found = None;
        for _ in 0..TARGET_ATTEMPTS {
            let px = ScreenPoint::new(rng.gen_range(a.x..=b.x), rng.gen_range(a.y..=b.y));
            let t = Target::nearest(px, geom);
            if !inside(t.px) {
                continue;
            }
            if let Some(prev) = out.last() {
                let amp = prev.state.gaze::<f64>().angle_to_deg(&t.state.gaze());
                if !(lo..=hi).contains(&amp) {
                    continue;
                }
            }
            found = Some(t);
            break;
        }
        out.push(found.ok_or(HarnessError::InfeasibleStep { participant, index })?);
    }
    Ok(out)
}

/// Fixation targets of one participant: `saccades_per_condition + 1` points,
/// uniform over the margin-reduced screen, each consecutive pair subtending
/// an angle inside `amplitude_range_deg`. Identical for every condition.
pub fn gen_targets(participant: u32, cfg: &ExperimentConfig) -> Result<Vec<Target>, HarnessError> {
    let mut rng = keyed_rng(cfg.seed, Stream::Targets, &[participant as u64]);
    random_targets(&mut rng, cfg.saccades_per_condition as usize + 1, cfg, participant)
}

/// Calibrate once on the 13-point grid.
pub fn calibrate_system(cfg: &ExperimentConfig) -> Result<CalibrationMap, HarnessError> {
    let tcfg = cfg.tracker_config();
    let grid = CalibrationGrid::from_config(&cfg.geometry, &tcfg);
    let mut rng = keyed_rng(cfg.seed, Stream::Calibration, &[]);
    let obs = observe_grid(
        &grid_gazes(&grid, &cfg.geometry),
        &cfg.eye,
        &cfg.camera,
        &cfg.calibration_condition,
        &tcfg,
        &mut rng,
    );
    Ok(calibrate_with(&obs, &grid, &cfg.geometry, tcfg.calibration_model)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternName {
    HLine,
    VLine,
    MultiH,
    MultiV,
    Cross,
    Grid13,
    Random160,
}

impl PatternName {
    pub const ALL: [PatternName; 7] =
        [Self::HLine, Self::VLine, Self::MultiH, Self::MultiV, Self::Cross, Self::Grid13, Self::Random160];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::HLine => "h_line",
            Self::VLine => "v_line",
            Self::MultiH => "multi_h",
            Self::MultiV => "multi_v",
            Self::Cross => "cross",
            Self::Grid13 => "grid13",
            Self::Random160 => "random160",
        }
    }
}

impl std::fmt::Display for PatternName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PatternName {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL.into_iter().find(|p| p.as_str() == s).ok_or_else(|| HarnessError::UnknownPattern(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternPoint {
    pub state: GimbalState,
    pub dwell_ms: f64,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternSpec {
    pub name: PatternName,
    pub start: GimbalState,
    pub points: Vec<PatternPoint>,
}

/// Spacing of the simple line patterns: 8 micro-steps = 0.9 deg.
pub const LATTICE_STEPS: i64 = 8;

impl PatternSpec {
    pub fn validate(&self) -> Result<(), HarnessError> {
        self.start.validate()?;
        for p in &self.points {
            p.state.validate()?;
            if !(p.dwell_ms >= 0.0) {
                return Err(HarnessError::Config(format!("negative dwell at {}", p.label)));
            }
        }
        if self.points.is_empty() {
            return Err(HarnessError::Config("pattern has no points".into()));
        }
        Ok(())
    }

    /// Script with each point's index as its label.
    pub fn to_script(&self) -> PatternScript {
        PatternScript {
            start: self.start,
            moves: self
                .points
                .iter()
                .enumerate()
                .map(|(i, p)| ScriptMove { target: p.state, dwell_ms: p.dwell_ms, label: Some(i as u32) })
                .collect(),
        }
    }

    pub fn labels(&self) -> Vec<String> {
        self.points.iter().map(|p| p.label.clone()).collect()
    }

    /// Commanded screen position of every point.
    pub fn truth_px(&self, geom: &ViewingGeometry<f64>) -> Vec<ScreenPoint<f64>> {
        self.points.iter().map(|p| Target::from_state(p.state, geom).px).collect()
    }
}

fn lattice(units: &[(i64, i64)], dwell_ms: f64) -> Vec<PatternPoint> {
    units
        .iter()
        .map(|&(x, y)| PatternPoint {
            state: GimbalState { x_steps: x * LATTICE_STEPS, y_steps: y * LATTICE_STEPS },
            dwell_ms,
            label: format!("({x},{y})"),
        })
        .collect()
}

fn boustrophedon(rows: &[i64], cols: &[i64], horizontal: bool) -> Vec<(i64, i64)> {
    let (outer, inner) = if horizontal { (rows, cols) } else { (cols, rows) };
    let mut out = vec![(0, 0)];
    for (i, &o) in outer.iter().enumerate() {
        let mut line: Vec<i64> = inner.to_vec();
        if i % 2 == 1 {
            line.reverse();
        }
        out.extend(line.into_iter().map(|v| if horizontal { (v, o) } else { (o, v) }));
    }
    out.push((0, 0));
    out
}

/// Build one of the seven test patterns. Line patterns use the 0.9 deg
/// lattice (x up to +-15 units, y up to +-10 units, +-8 off the vertical axis); grid13 uses the tracker
/// calibration grid; random160 draws 160 saccades like the saccade
/// experiment, from the pattern stream.
pub fn pattern(name: PatternName, cfg: &ExperimentConfig) -> Result<PatternSpec, HarnessError> {
    let dwell = cfg.fixation_ms;
    let points = match name {
        PatternName::HLine => lattice(&[(0, 0), (-5, 0), (-15, 0), (-10, 0), (0, 0), (5, 0), (15, 0), (10, 0), (0, 0)], dwell),
        PatternName::VLine => lattice(&[(0, 0), (0, 4), (0, 10), (0, 6), (0, 0), (0, -4), (0, -10), (0, -6), (0, 0)], dwell),
        PatternName::MultiH => lattice(&boustrophedon(&[8, 0, -8], &[-15, -5, 5, 15], true), dwell),
        PatternName::MultiV => lattice(&boustrophedon(&[8, 0, -8], &[-15, -5, 5, 15], false), dwell),
        PatternName::Cross => lattice(
            &[(0, 0), (-10, 10), (-5, 5), (5, -5), (10, -10), (0, 0), (10, 10), (5, 5), (-5, -5), (-10, -10), (0, 0)],
            dwell,
        ),
        PatternName::Grid13 => {
            let grid = CalibrationGrid::from_config(&cfg.geometry, &cfg.tracker);
            grid.points
                .iter()
                .zip(crate::tracker::GRID_LABELS)
                .map(|(p, l)| PatternPoint { state: Target::nearest(*p, &cfg.geometry).state, dwell_ms: dwell, label: l.into() })
                .collect()
        }
        PatternName::Random160 => {
            let mut rng = keyed_rng(cfg.seed, Stream::Pattern, &[160]);
            random_targets(&mut rng, 161, cfg, 0)?
                .into_iter()
                .enumerate()
                .map(|(i, t)| PatternPoint { state: t.state, dwell_ms: dwell, label: format!("r{i}") })
                .collect()
        }
    };
    let spec = PatternSpec { name, start: GimbalState::default(), points };
    spec.validate()?;
    Ok(spec)
}
