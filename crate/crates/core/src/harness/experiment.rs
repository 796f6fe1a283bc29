use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{condition_key, gen_targets, keyed_rng, positioned, Aggregation, ExperimentConfig, HarnessError, Stream, Target};
use crate::events::{classify_saccades, detect_saccades, EventRecord, EventStatus};
use crate::motion::{GimbalState, Timeline};
use crate::stats::{fit_main_sequence, rm_anova, MainSequenceFit, RmAnovaResult};
use crate::tracker::{run_tracker, CalibrationMap, LogLine, Sample};

/// Summary of one participant x condition block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub participant: u32,
    pub condition: String,
    pub n_commanded: usize,
    pub n_detected: usize,
    pub n_retained: usize,
    pub n_invalid_samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub summary: CellSummary,
    pub records: Vec<EventRecord>,
    /// Sample log with target messages, when `store_samples` is set.
    pub log: Option<Vec<LogLine>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaccadeDataset {
    pub config: ExperimentConfig,
    pub calibration: CalibrationMap,
    /// Participant-major, conditions in configuration order.
    pub cells: Vec<CellResult>,
}

impl SaccadeDataset {
    pub fn records(&self) -> impl Iterator<Item = &EventRecord> {
        self.cells.iter().flat_map(|c| c.records.iter())
    }

    pub fn commanded_saccades(&self) -> usize {
        self.cells.iter().map(|c| c.summary.n_commanded).sum()
    }
}

/// Messages bracketing each target: `TARGET i x y` when the move starts,
/// `FIX_START i` / `FIX_END i` around the dwell.
pub(crate) fn timeline_log(timeline: &Timeline<f64>, samples: Vec<Sample>, geom: &crate::geometry::ViewingGeometry<f64>) -> Vec<LogLine> {
    let mut msgs = Vec::new();
    for seg in &timeline.segments {
        let Some(label) = seg.label else { continue };
        let t = Target::from_state(seg.commanded, geom);
        let ms = |s: f64| (s * 1000.0 - 1e-9).ceil() as i64;
        msgs.push((ms(seg.start_s), 0, format!("TARGET {label} {} {}", t.px.x, t.px.y)));
        msgs.push((ms(seg.move_end_s()), 1, format!("FIX_START {label}")));
        msgs.push(((seg.end_s() * 1000.0 + 1e-9).floor() as i64, 2, format!("FIX_END {label}")));
    }
    msgs.sort_by_key(|m| (m.0, m.1));
    let mut out = Vec::with_capacity(samples.len() + msgs.len());
    let mut mi = msgs.into_iter().peekable();
    for s in samples {
        while let Some(m) = mi.next_if(|m| m.0 <= s.t_ms) {
            out.push(LogLine::Msg { t_ms: m.0, text: m.2 });
        }
        out.push(LogLine::Sample(s));
    }
    out.extend(mi.map(|m| LogLine::Msg { t_ms: m.0, text: m.2 }));
    out
}

/// Label of the segment whose move starts closest to `t_ms`.
fn nearest_label(timeline: &Timeline<f64>, t_ms: i64) -> u32 {
    timeline
        .segments
        .iter()
        .filter_map(|s| s.label.map(|l| (l, (s.start_s * 1000.0 - t_ms as f64).abs())))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(l, _)| l)
        .unwrap_or(0)
}

#[allow(clippy::too_many_arguments)]
fn run_cell(
    cfg: &ExperimentConfig,
    map: &CalibrationMap,
    start: GimbalState,
    targets: &[Target],
    participant: u32,
    cond_idx: usize,
) -> Result<CellResult, HarnessError> {
    let scene = &cfg.conditions[cond_idx];
    let cname = scene.name.to_string();
    let ckey = condition_key(&cname);
    let p = participant as u64;
    let land = |t: GimbalState, i: u64| positioned(t, cfg, 0, &[p, ckey, i]);
    let first = land(start, u64::MAX);
    let moves = std::iter::once((first, start, cfg.fixation_ms, None)).chain(
        targets.iter().enumerate().map(|(i, t)| (land(t.state, i as u64), t.state, cfg.fixation_ms, Some(i as u32))),
    );
    let timeline = Timeline::build(first, moves, &cfg.motion);
    let tcfg = cfg.tracker_config();
    let mut rng = keyed_rng(cfg.seed, Stream::Pixels, &[p, ckey]);
    let samples = run_tracker(&timeline, &cfg.eye, &cfg.camera, scene, map, &tcfg, 0, &mut rng);
    let n_invalid = samples.iter().filter(|s| !s.is_valid()).count();
    let (saccades, fixations) = detect_saccades(&samples, &cfg.geometry, &cfg.detector)?;
    let (lo, hi) = cfg.detector.amplitude_window_deg;
    let statuses = classify_saccades(&saccades, &fixations, lo, hi, cfg.detector.split_gap_ms);
    let records: Vec<EventRecord> = saccades
        .iter()
        .zip(&statuses)
        .map(|(e, s)| EventRecord {
            trial: nearest_label(&timeline, e.t_start_ms),
            participant,
            condition: cname.clone(),
            t_start_ms: e.t_start_ms,
            t_end_ms: e.t_end_ms,
            amplitude_deg: e.amplitude_deg,
            peak_velocity_degps: e.peak_velocity_degps,
            mean_pupil_size: e.mean_pupil_size,
            status: *s,
        })
        .collect();
    let summary = CellSummary {
        participant,
        condition: cname,
        n_commanded: targets.len().saturating_sub(1),
        n_detected: records.len(),
        n_retained: statuses.iter().filter(|s| **s == EventStatus::Retained).count(),
        n_invalid_samples: n_invalid,
    };
    let log = cfg.store_samples.then(|| timeline_log(&timeline, samples, &cfg.geometry));
    Ok(CellResult { summary, records, log })
}

/// Run every participant x condition cell. Participant `p` starts from the
/// last target of participant `p - 1` (the first from the neutral position),
/// so the first detected saccade of a cell is the inter-participant
/// transition, which the amplitude window normally removes.
pub fn run_saccade_experiment(cfg: &ExperimentConfig) -> Result<SaccadeDataset, HarnessError> {
    cfg.validate()?;
    let calibration = super::calibrate_system(cfg)?;
    run_saccade_experiment_with(cfg, calibration)
}

pub fn run_saccade_experiment_with(cfg: &ExperimentConfig, calibration: CalibrationMap) -> Result<SaccadeDataset, HarnessError> {
    let targets: Vec<Vec<Target>> =
        (0..cfg.participants).into_par_iter().map(|p| gen_targets(p, cfg)).collect::<Result<_, _>>()?;
    let k = cfg.conditions.len();
    let cells = (0..targets.len() * k)
        .into_par_iter()
        .map(|i| {
            let (p, c) = (i / k, i % k);
            let start = if p == 0 { GimbalState::default() } else { targets[p - 1].last().expect("non-empty").state };
            run_cell(cfg, &calibration, start, &targets[p], p as u32, c)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SaccadeDataset { config: cfg.clone(), calibration, cells })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    PeakVelocity,
    PupilSize,
}

impl Measure {
    fn of(&self, r: &EventRecord) -> f64 {
        match self {
            Self::PeakVelocity => r.peak_velocity_degps,
            Self::PupilSize => r.mean_pupil_size,
        }
    }
}

/// Subjects x conditions matrix for the brightness ANOVA.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionMatrix {
    pub conditions: Vec<String>,
    pub subjects: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    /// Participants without retained saccades in some condition.
    pub excluded_participants: Vec<u32>,
}

/// Build the matrix from retained events. Participants lacking a retained
/// saccade in any condition are excluded.
pub fn condition_matrix(records: &[EventRecord], conditions: &[String], measure: Measure, agg: Aggregation) -> ConditionMatrix {
    use std::collections::BTreeMap;
    let k = conditions.len();
    let col = |c: &str| conditions.iter().position(|n| n == c);
    // participant -> trial -> per-condition values
    let mut by_p: BTreeMap<u32, BTreeMap<u32, Vec<Vec<f64>>>> = BTreeMap::new();
    let mut seen: BTreeMap<u32, ()> = BTreeMap::new();
    for r in records {
        seen.insert(r.participant, ());
        if r.status != EventStatus::Retained {
            continue;
        }
        let Some(j) = col(&r.condition) else { continue };
        by_p.entry(r.participant).or_default().entry(r.trial).or_insert_with(|| vec![Vec::new(); k])[j].push(measure.of(r));
    }
    let mut out = ConditionMatrix { conditions: conditions.to_vec(), subjects: Vec::new(), rows: Vec::new(), excluded_participants: Vec::new() };
    for &p in seen.keys() {
        let trials = by_p.get(&p);
        let mut sums = vec![(0.0, 0usize); k];
        for cells in trials.into_iter().flat_map(|t| t.values()) {
            for (j, v) in cells.iter().enumerate() {
                sums[j].0 += v.iter().sum::<f64>();
                sums[j].1 += v.len();
            }
        }
        if sums.iter().any(|s| s.1 == 0) {
            out.excluded_participants.push(p);
            continue;
        }
        match agg {
            Aggregation::PerParticipant => {
                out.subjects.push(format!("p{p}"));
                out.rows.push(sums.iter().map(|(s, n)| s / *n as f64).collect());
            }
            Aggregation::PerSaccade => {
                for (t, cells) in trials.expect("has retained") {
                    if cells.iter().all(|v| v.len() == 1) {
                        out.subjects.push(format!("p{p}t{t}"));
                        out.rows.push(cells.iter().map(|v| v[0]).collect());
                    }
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionFit {
    pub condition: String,
    pub fit: MainSequenceFit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaccadeReport {
    pub conditions: Vec<String>,
    pub aggregation: Aggregation,
    pub n_detected: usize,
    pub n_retained: usize,
    pub retained_fraction: f64,
    /// Retained events with amplitude outside the window (should be zero).
    pub retained_out_of_window: usize,
    pub main_sequence: Vec<ConditionFit>,
    pub peak_velocity: ConditionMatrix,
    pub pupil_size: ConditionMatrix,
    pub peak_velocity_anova: RmAnovaResult,
    pub pupil_size_anova: RmAnovaResult,
}

impl SaccadeReport {
    /// (max - min) / mean of the per-condition means.
    pub fn relative_spread(means: &[f64]) -> f64 {
        let max = means.iter().copied().fold(f64::MIN, f64::max);
        let min = means.iter().copied().fold(f64::MAX, f64::min);
        (max - min) / (means.iter().sum::<f64>() / means.len() as f64)
    }
}

/// Main sequences, brightness ANOVAs and exclusion accounting from event records.
pub fn analyze_saccades(
    records: &[EventRecord],
    conditions: &[String],
    window_deg: (f64, f64),
    agg: Aggregation,
) -> Result<SaccadeReport, HarnessError> {
    let retained: Vec<&EventRecord> = records.iter().filter(|r| r.status == EventStatus::Retained).collect();
    let fit_of = |rs: &mut dyn Iterator<Item = &&EventRecord>| {
        let pts: Vec<(f64, f64)> = rs.map(|r| (r.amplitude_deg, r.peak_velocity_degps)).collect();
        fit_main_sequence(&pts)
    };
    let mut main_sequence = vec![ConditionFit { condition: "all".into(), fit: fit_of(&mut retained.iter())? }];
    for c in conditions {
        main_sequence.push(ConditionFit { condition: c.clone(), fit: fit_of(&mut retained.iter().filter(|r| &r.condition == c))? });
    }
    let pv = condition_matrix(records, conditions, Measure::PeakVelocity, agg);
    let pupil = condition_matrix(records, conditions, Measure::PupilSize, agg);
    Ok(SaccadeReport {
        conditions: conditions.to_vec(),
        aggregation: agg,
        n_detected: records.len(),
        n_retained: retained.len(),
        retained_fraction: retained.len() as f64 / records.len().max(1) as f64,
        retained_out_of_window: retained.iter().filter(|r| !(window_deg.0..=window_deg.1).contains(&r.amplitude_deg)).count(),
        main_sequence,
        peak_velocity_anova: rm_anova(&pv.rows)?,
        pupil_size_anova: rm_anova(&pupil.rows)?,
        peak_velocity: pv,
        pupil_size: pupil,
    })
}
