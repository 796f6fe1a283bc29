//! `relay`: command-line front end of the artificial-eye simulator.
//!
//! Exit codes: 0 success, 1 invalid input, 2 simulation or I/O failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use relay_core::harness::{
    calibrate_system, export_laser_pattern, pattern, run_precision_experiment, run_saccade_experiment,
    write_experiment_dir, write_pattern_dir, ExperimentConfig, HarnessError, PatternName,
};
use relay_core::tracker::TrackingMode;

#[derive(Debug, Parser)]
#[command(name = "relay", version, about = "Robotic artificial eye and P-CR eye tracker simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the default configuration as JSON.
    Defaults,
    /// Run the 13-point calibration and write the fitted map.
    Calibrate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Repeat a test pattern and write the run under `<out>/pattern/`.
    Pattern {
        #[arg(long)]
        name: PatternName,
        /// Defaults to the configured precision trial count.
        #[arg(long)]
        trials: Option<u32>,
        #[arg(long)]
        mode: Option<TrackingMode>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the artificial-saccade experiment and write it under `<out>/experiment/`.
    Experiment {
        #[arg(long)]
        participants: Option<u32>,
        /// Saccades per participant and condition.
        #[arg(long)]
        saccades: Option<u32>,
        #[arg(long)]
        mode: Option<TrackingMode>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Analyse the runs under a directory and write the reports.
    Analyze {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Export the laser-mirror spots of a pattern as SVG, with a CSV beside it.
    Laser {
        #[arg(long)]
        pattern: PatternName,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, HarnessError> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| HarnessError::Config(format!("{}: {e}", p.display())))?;
            ExperimentConfig::from_json(&text)
        }
        None => Ok(ExperimentConfig::default()),
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

fn run(cmd: Command) -> Result<(), HarnessError> {
    match cmd {
        Command::Defaults => println!("{}", ExperimentConfig::default().to_json()),
        Command::Calibrate { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let map = calibrate_system(&cfg)?;
            let mut json = serde_json::to_vec_pretty(&map)?;
            json.push(b'\n');
            write_file(&out, &json)?;
            eprintln!("calibration written to {}", out.display());
        }
        Command::Pattern { name, trials, mode, seed, config, out } => {
            let mut cfg = load_config(config.as_deref())?;
            cfg.mode = mode.unwrap_or(cfg.mode);
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.precision_trials = trials.unwrap_or(cfg.precision_trials);
            cfg.validate()?;
            let spec = pattern(name, &cfg)?;
            let ds = run_precision_experiment(&spec, cfg.precision_trials, &cfg)?;
            let dir = out.join("pattern");
            write_pattern_dir(&dir, &ds, &cfg)?;
            eprintln!("{} trials of {name} written to {}", ds.trials.len(), dir.display());
        }
        Command::Experiment { participants, saccades, mode, seed, config, out } => {
            let mut cfg = load_config(config.as_deref())?;
            cfg.participants = participants.unwrap_or(cfg.participants);
            cfg.saccades_per_condition = saccades.unwrap_or(cfg.saccades_per_condition);
            cfg.mode = mode.unwrap_or(cfg.mode);
            cfg.seed = seed.unwrap_or(cfg.seed);
            cfg.validate()?;
            let ds = run_saccade_experiment(&cfg)?;
            let dir = out.join("experiment");
            write_experiment_dir(&dir, &ds)?;
            eprintln!("{} cells written to {}", ds.cells.len(), dir.display());
        }
        Command::Analyze { run, report } => {
            for p in relay_core::harness::analyze_run(&run, &report)? {
                println!("{}", p.display());
            }
        }
        Command::Laser { pattern: name, config, out } => {
            let cfg = load_config(config.as_deref())?;
            let spec = pattern(name, &cfg)?;
            let export = export_laser_pattern(&spec, &cfg.laser_rig, &cfg)?;
            write_file(&out, export.to_svg().as_bytes())?;
            let mut csv = Vec::new();
            export.write_csv(&mut csv)?;
            let csv_path = out.with_extension("csv");
            write_file(&csv_path, &csv)?;
            let off = export.vertices.iter().filter(|v| !v.on_canvas).count();
            eprintln!("{} and {} written ({off} vertices off canvas)", out.display(), csv_path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
