use relay_core::events::EventStatus;
use relay_core::harness::{
    analyze_saccades, pattern, read_experiment_dir, read_pattern_dir, run_precision_experiment, run_saccade_experiment,
    write_experiment_dir, write_pattern_dir, ExperimentConfig, PatternName,
};
use relay_core::tracker::TrackingMode;

fn small() -> ExperimentConfig {
    ExperimentConfig { participants: 3, saccades_per_condition: 10, precision_trials: 4, seed: 7, ..ExperimentConfig::default() }
}

#[test]
fn experiment_round_trip_reproduces_analysis() {
    let cfg = small();
    let ds = run_saccade_experiment(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_experiment_dir(dir.path(), &ds).unwrap();
    let run = read_experiment_dir(dir.path()).unwrap();
    assert_eq!(run.config, cfg);
    assert_eq!(run.calibration, ds.calibration);
    let mem: Vec<_> = ds.records().cloned().collect();
    assert_eq!(run.records, mem);
    let names = cfg.condition_names();
    let a = analyze_saccades(&mem, &names, cfg.detector.amplitude_window_deg, cfg.aggregation).unwrap();
    let b = analyze_saccades(&run.records, &names, cfg.detector.amplitude_window_deg, cfg.aggregation).unwrap();
    assert_eq!(serde_json::to_string(&a.peak_velocity_anova).unwrap(), serde_json::to_string(&b.peak_velocity_anova).unwrap());
    assert_eq!(serde_json::to_string(&a.pupil_size_anova).unwrap(), serde_json::to_string(&b.pupil_size_anova).unwrap());
}

#[test]
fn exclusion_accounting_is_exact_per_cell() {
    let cfg = ExperimentConfig { mode: TrackingMode::Raster, participants: 2, saccades_per_condition: 8, ..small() };
    let ds = run_saccade_experiment(&cfg).unwrap();
    for c in &ds.cells {
        let retained = c.records.iter().filter(|r| r.status == EventStatus::Retained).count();
        let excluded = c.records.len() - retained;
        assert_eq!(c.summary.n_retained, retained);
        assert_eq!(retained + excluded, c.summary.n_detected);
    }
}

#[test]
fn pattern_round_trip_reproduces_accuracy() {
    let cfg = small();
    let spec = pattern(PatternName::Grid13, &cfg).unwrap();
    let ds = run_precision_experiment(&spec, 4, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_pattern_dir(dir.path(), &ds, &cfg).unwrap();
    let (cfg2, ds2) = read_pattern_dir(dir.path()).unwrap();
    assert_eq!(cfg2, cfg);
    let a = ds.analyze(&cfg.geometry).unwrap();
    let b = ds2.analyze(&cfg2.geometry).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert!(a.pupil_bias.is_some());
}
