use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::experiment::timeline_log;
use super::{calibrate_system, keyed_rng, positioned, ExperimentConfig, HarnessError, PatternName, PatternSpec, Stream};
use crate::geometry::ScreenPoint;
use crate::motion::Timeline;
use crate::stats::{accuracy_table, precision_table, pupil_direction_bias, PointStats, PupilBias};
use crate::tracker::{run_tracker, CalibrationMap, LogLine, Reading};

/// Positioning session of pattern runs; the saccade experiment uses 0.
const PATTERN_SESSION: u64 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionDataset {
    pub pattern: PatternSpec,
    pub truth_px: Vec<ScreenPoint<f64>>,
    pub calibration: CalibrationMap,
    /// One sample log per trial.
    pub trials: Vec<Vec<LogLine>>,
}

/// Repeat `pattern` `trials` times from the neutral position, recording each
/// repetition at 1 kHz under the calibration scene.
pub fn run_precision_experiment(pattern: &PatternSpec, trials: u32, cfg: &ExperimentConfig) -> Result<PrecisionDataset, HarnessError> {
    cfg.validate()?;
    let map = calibrate_system(cfg)?;
    run_precision_experiment_with(pattern, trials, cfg, map)
}

pub fn run_precision_experiment_with(
    pattern: &PatternSpec,
    trials: u32,
    cfg: &ExperimentConfig,
    calibration: CalibrationMap,
) -> Result<PrecisionDataset, HarnessError> {
    pattern.validate()?;
    let tcfg = cfg.tracker_config();
    let logs = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let t = trial as u64;
            let start = positioned(pattern.start, cfg, PATTERN_SESSION, &[t, u64::MAX]);
            let moves = pattern.points.iter().enumerate().map(|(i, p)| {
                (positioned(p.state, cfg, PATTERN_SESSION, &[t, i as u64]), p.state, p.dwell_ms, Some(i as u32))
            });
            let timeline = Timeline::build(start, moves, &cfg.motion);
            let mut rng = keyed_rng(cfg.seed, Stream::Precision, &[t]);
            let samples =
                run_tracker(&timeline, &cfg.eye, &cfg.camera, &cfg.calibration_condition, &calibration, &tcfg, 0, &mut rng);
            timeline_log(&timeline, samples, &cfg.geometry)
        })
        .collect();
    Ok(PrecisionDataset { truth_px: pattern.truth_px(&cfg.geometry), pattern: pattern.clone(), calibration, trials: logs })
}

/// Valid samples between each `FIX_START i` and `FIX_END i` message.
pub fn fixation_windows(log: &[LogLine]) -> Result<Vec<(u32, Vec<Reading>)>, HarnessError> {
    let mut out = Vec::new();
    let mut open: Option<(u32, Vec<Reading>)> = None;
    let parse_label = |text: &str, tag: &str| -> Result<Option<u32>, HarnessError> {
        match text.strip_prefix(tag) {
            Some(rest) => rest
                .trim()
                .parse()
                .map(Some)
                .map_err(|_| HarnessError::RunFormat(format!("bad message '{text}'"))),
            None => Ok(None),
        }
    };
    for line in log {
        match line {
            LogLine::Msg { text, .. } => {
                if let Some(l) = parse_label(text, "FIX_START ")? {
                    open = Some((l, Vec::new()));
                } else if let Some(l) = parse_label(text, "FIX_END ")? {
                    match open.take() {
                        Some((o, samples)) if o == l => out.push((l, samples)),
                        _ => return Err(HarnessError::RunFormat(format!("unmatched FIX_END {l}"))),
                    }
                }
            }
            LogLine::Sample(s) => {
                if let (Some((_, buf)), Some(r)) = (open.as_mut(), s.reading) {
                    buf.push(r);
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionRecordings {
    /// `[point][trial]` fixation positions.
    pub points: Vec<Vec<Vec<ScreenPoint<f64>>>>,
    /// `[trial][point]` mean fixation pupil size (NaN when a window is empty).
    pub pupil: Vec<Vec<f64>>,
}

pub fn collect_recordings(trials: &[Vec<LogLine>], n_points: usize) -> Result<PrecisionRecordings, HarnessError> {
    let mut points = vec![vec![Vec::new(); trials.len()]; n_points];
    let mut pupil = vec![vec![f64::NAN; n_points]; trials.len()];
    for (t, log) in trials.iter().enumerate() {
        for (label, samples) in fixation_windows(log)? {
            let i = label as usize;
            if i >= n_points {
                return Err(HarnessError::RunFormat(format!("fixation label {i} beyond {n_points} points")));
            }
            points[i][t] = samples.iter().map(|r| ScreenPoint::new(r.x_px, r.y_px)).collect();
            if !samples.is_empty() {
                pupil[t][i] = samples.iter().map(|r| r.pupil).sum::<f64>() / samples.len() as f64;
            }
        }
    }
    Ok(PrecisionRecordings { points, pupil })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionReport {
    pub pattern: PatternName,
    pub labels: Vec<String>,
    pub accuracy: Vec<PointStats>,
    /// Needs two or more trials.
    pub precision: Option<Vec<PointStats>>,
    /// grid13 with four or more trials only.
    pub pupil_bias: Option<PupilBias>,
}

pub fn analyze_precision(
    pattern: &PatternSpec,
    truth_px: &[ScreenPoint<f64>],
    trials: &[Vec<LogLine>],
    geom: &crate::geometry::ViewingGeometry<f64>,
) -> Result<PrecisionReport, HarnessError> {
    let rec = collect_recordings(trials, truth_px.len())?;
    let accuracy = accuracy_table(&rec.points, truth_px, geom)?;
    let precision = if trials.len() >= 2 { Some(precision_table(&rec.points, truth_px, geom)?) } else { None };
    let pupil_bias = if pattern.name == PatternName::Grid13 && trials.len() >= 4 {
        Some(pupil_direction_bias(&rec.pupil)?)
    } else {
        None
    };
    Ok(PrecisionReport { pattern: pattern.name, labels: pattern.labels(), accuracy, precision, pupil_bias })
}

impl PrecisionDataset {
    pub fn analyze(&self, geom: &crate::geometry::ViewingGeometry<f64>) -> Result<PrecisionReport, HarnessError> {
        analyze_precision(&self.pattern, &self.truth_px, &self.trials, geom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::pattern;
    use crate::motion::PositioningNoise;
    use crate::stats::point_stats;
    use crate::tracker::TrackingMode;

    #[test]
    fn single_noiseless_trial_has_zero_spread() {
        let cfg = ExperimentConfig { positioning_noise: PositioningNoise::none(), ..ExperimentConfig::default() };
        let p = pattern(PatternName::HLine, &cfg).unwrap();
        let ds = run_precision_experiment(&p, 1, &cfg).unwrap();
        let rec = collect_recordings(&ds.trials, p.points.len()).unwrap();
        for (i, pts) in rec.points.iter().enumerate() {
            let s = point_stats(i, pts, ds.truth_px[i], &cfg.geometry).unwrap();
            assert!(s.n_samples >= 290);
            assert!(s.sd_px.x < 1e-9 && s.sd_px.y < 1e-9, "{:?}", s.sd_px);
        }
        let r = ds.analyze(&cfg.geometry).unwrap();
        assert!(r.precision.is_none() && r.pupil_bias.is_none());
    }

    #[test]
    fn raster_grid_dwell_is_accurate() {
        let cfg = ExperimentConfig { mode: TrackingMode::Raster, ..ExperimentConfig::default() };
        let p = pattern(PatternName::Grid13, &cfg).unwrap();
        let ds = run_precision_experiment(&p, 2, &cfg).unwrap();
        let r = ds.analyze(&cfg.geometry).unwrap();
        for s in r.precision.as_ref().unwrap() {
            assert!(s.abs_dev_deg.x <= 0.7 && s.abs_dev_deg.y <= 0.7, "{s:?}");
            assert!(s.sd_deg.x <= 0.05 && s.sd_deg.y <= 0.05, "{s:?}");
            assert_eq!(s.n_trials, 2);
        }
    }

    #[test]
    fn unmatched_fixation_end_is_rejected() {
        let log = vec![LogLine::Msg { t_ms: 0, text: "FIX_END 3".into() }];
        assert!(matches!(fixation_windows(&log), Err(HarnessError::RunFormat(_))));
    }
}
