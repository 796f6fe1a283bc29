//! Run directories.
//!
//! ```text
//! experiment/  run.json config.json calibration.json events.csv cells.json samples/p0000_dark.asc ...
//! pattern/     run.json config.json calibration.json pattern.json trials/trial_000.asc ...
//! ```

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    analyze_precision, analyze_saccades, Aggregation, CellSummary, ExperimentConfig, HarnessError, PatternSpec,
    PrecisionDataset, SaccadeDataset, SaccadeReport,
};
use crate::events::{read_events_csv, write_events_csv, EventRecord};
use crate::geometry::ScreenPoint;
use crate::stats::{write_accuracy_csv, write_precision_csv, RmAnovaResult};
use crate::tracker::{read_log, write_log, CalibrationMap, LogLine};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    Experiment,
    Pattern,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    kind: RunKind,
}

fn create(path: &Path) -> Result<BufWriter<File>, HarnessError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), HarnessError> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, v)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, HarnessError> {
    let f = File::open(path).map_err(|e| HarnessError::RunFormat(format!("{}: {e}", path.display())))?;
    serde_json::from_reader(BufReader::new(f))
        .map_err(|e| HarnessError::RunFormat(format!("{}: {e}", path.display())))
}

fn write_log_file(path: &Path, log: &[LogLine]) -> Result<(), HarnessError> {
    let mut w = create(path)?;
    write_log(&mut w, log)?;
    w.flush()?;
    Ok(())
}

fn read_log_file(path: &Path) -> Result<Vec<LogLine>, HarnessError> {
    Ok(read_log(BufReader::new(File::open(path)?))?)
}

fn kind_of(dir: &Path) -> Option<RunKind> {
    read_json::<Manifest>(&dir.join("run.json")).ok().map(|m| m.kind)
}

pub fn sample_log_name(participant: u32, condition: &str) -> String {
    format!("p{participant:04}_{condition}.asc")
}

/// Write a saccade run under `dir`.
pub fn write_experiment_dir(dir: &Path, ds: &SaccadeDataset) -> Result<(), HarnessError> {
    write_json(&dir.join("run.json"), &Manifest { kind: RunKind::Experiment })?;
    write_json(&dir.join("config.json"), &ds.config)?;
    write_json(&dir.join("calibration.json"), &ds.calibration)?;
    let records: Vec<EventRecord> = ds.records().cloned().collect();
    let mut w = create(&dir.join("events.csv"))?;
    write_events_csv(&mut w, &records)?;
    w.flush()?;
    let cells: Vec<&CellSummary> = ds.cells.iter().map(|c| &c.summary).collect();
    write_json(&dir.join("cells.json"), &cells)?;
    for c in &ds.cells {
        if let Some(log) = &c.log {
            write_log_file(&dir.join("samples").join(sample_log_name(c.summary.participant, &c.summary.condition)), log)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRun {
    pub config: ExperimentConfig,
    pub calibration: CalibrationMap,
    pub records: Vec<EventRecord>,
    pub cells: Vec<CellSummary>,
}

pub fn read_experiment_dir(dir: &Path) -> Result<ExperimentRun, HarnessError> {
    if kind_of(dir) != Some(RunKind::Experiment) {
        return Err(HarnessError::RunFormat(format!("{} is not an experiment run", dir.display())));
    }
    let config: ExperimentConfig = read_json(&dir.join("config.json"))?;
    config.validate()?;
    let f = File::open(dir.join("events.csv"))?;
    Ok(ExperimentRun {
        calibration: read_json(&dir.join("calibration.json"))?,
        records: read_events_csv(BufReader::new(f))?,
        cells: read_json(&dir.join("cells.json"))?,
        config,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PatternFile {
    pattern: PatternSpec,
    truth_px: Vec<ScreenPoint<f64>>,
}

pub fn trial_log_name(trial: usize) -> String {
    format!("trial_{trial:03}.asc")
}

pub fn write_pattern_dir(dir: &Path, ds: &PrecisionDataset, cfg: &ExperimentConfig) -> Result<(), HarnessError> {
    write_json(&dir.join("run.json"), &Manifest { kind: RunKind::Pattern })?;
    write_json(&dir.join("config.json"), cfg)?;
    write_json(&dir.join("calibration.json"), &ds.calibration)?;
    write_json(&dir.join("pattern.json"), &PatternFile { pattern: ds.pattern.clone(), truth_px: ds.truth_px.clone() })?;
    for (t, log) in ds.trials.iter().enumerate() {
        write_log_file(&dir.join("trials").join(trial_log_name(t)), log)?;
    }
    Ok(())
}

pub fn read_pattern_dir(dir: &Path) -> Result<(ExperimentConfig, PrecisionDataset), HarnessError> {
    if kind_of(dir) != Some(RunKind::Pattern) {
        return Err(HarnessError::RunFormat(format!("{} is not a pattern run", dir.display())));
    }
    let config: ExperimentConfig = read_json(&dir.join("config.json"))?;
    config.validate()?;
    let pf: PatternFile = read_json(&dir.join("pattern.json"))?;
    let mut trials = Vec::new();
    loop {
        let path = dir.join("trials").join(trial_log_name(trials.len()));
        if !path.exists() {
            break;
        }
        trials.push(read_log_file(&path)?);
    }
    if trials.is_empty() {
        return Err(HarnessError::RunFormat(format!("{} has no trial logs", dir.display())));
    }
    let ds = PrecisionDataset {
        pattern: pf.pattern,
        truth_px: pf.truth_px,
        calibration: read_json(&dir.join("calibration.json"))?,
        trials,
    };
    Ok((config, ds))
}

/// Brightness statistics as written to `anova.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnovaReport {
    pub conditions: Vec<String>,
    pub aggregation: Aggregation,
    pub n_detected: usize,
    pub n_retained: usize,
    pub retained_fraction: f64,
    pub retained_out_of_window: usize,
    pub subjects: usize,
    pub excluded_participants: Vec<u32>,
    pub peak_velocity: RmAnovaResult,
    pub pupil_size: RmAnovaResult,
}

impl From<&SaccadeReport> for AnovaReport {
    fn from(r: &SaccadeReport) -> Self {
        Self {
            conditions: r.conditions.clone(),
            aggregation: r.aggregation,
            n_detected: r.n_detected,
            n_retained: r.n_retained,
            retained_fraction: r.retained_fraction,
            retained_out_of_window: r.retained_out_of_window,
            subjects: r.peak_velocity.rows.len(),
            excluded_participants: r.peak_velocity.excluded_participants.clone(),
            peak_velocity: r.peak_velocity_anova.clone(),
            pupil_size: r.pupil_size_anova.clone(),
        }
    }
}

pub fn write_mainseq_csv<W: Write>(w: W, r: &SaccadeReport) -> Result<(), HarnessError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["condition", "n", "slope_degps_per_deg", "intercept_degps", "pv_at_10deg_degps", "r2"])?;
    for c in &r.main_sequence {
        out.write_record([
            c.condition.clone(),
            c.fit.n.to_string(),
            c.fit.slope.to_string(),
            c.fit.intercept.to_string(),
            c.fit.pv_at_10deg.to_string(),
            c.fit.r2.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Runs found under `run`: the directory itself or its `experiment/` and
/// `pattern/` children.
pub fn find_runs(run: &Path) -> Vec<(RunKind, PathBuf)> {
    if let Some(k) = kind_of(run) {
        return vec![(k, run.to_path_buf())];
    }
    ["experiment", "pattern"].iter().filter_map(|d| kind_of(&run.join(d)).map(|k| (k, run.join(d)))).collect()
}

/// Analyse every run under `run` and write the reports to `report`.
/// Returns the paths written.
pub fn analyze_run(run: &Path, report: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    let runs = find_runs(run);
    if runs.is_empty() {
        return Err(HarnessError::RunFormat(format!("no experiment or pattern run under {}", run.display())));
    }
    fs::create_dir_all(report)?;
    let mut written = Vec::new();
    for (kind, dir) in runs {
        match kind {
            RunKind::Experiment => {
                let r = read_experiment_dir(&dir)?;
                let rep = analyze_saccades(
                    &r.records,
                    &r.config.condition_names(),
                    r.config.detector.amplitude_window_deg,
                    r.config.aggregation,
                )?;
                let p = report.join("mainseq.csv");
                let mut w = create(&p)?;
                write_mainseq_csv(&mut w, &rep)?;
                w.flush()?;
                written.push(p);
                let p = report.join("anova.json");
                write_json(&p, &AnovaReport::from(&rep))?;
                written.push(p);
            }
            RunKind::Pattern => {
                let (cfg, ds) = read_pattern_dir(&dir)?;
                let rep = analyze_precision(&ds.pattern, &ds.truth_px, &ds.trials, &cfg.geometry)?;
                let p = report.join("accuracy.csv");
                let mut w = create(&p)?;
                write_accuracy_csv(&mut w, &rep.accuracy, &rep.labels)?;
                w.flush()?;
                written.push(p);
                if let Some(prec) = &rep.precision {
                    let p = report.join("precision.csv");
                    let mut w = create(&p)?;
                    write_precision_csv(&mut w, prec, &rep.labels)?;
                    w.flush()?;
                    written.push(p);
                }
                if let Some(b) = &rep.pupil_bias {
                    let p = report.join("bias.json");
                    write_json(&p, b)?;
                    written.push(p);
                }
            }
        }
    }
    Ok(written)
}
