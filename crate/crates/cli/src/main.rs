use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use censurv::dataio::{
    generate_synthetic, load_dataset, read_predictions, read_relabel_audit, save_dataset,
    write_km_csv, write_metrics, write_predictions, write_run, SyntheticConfig,
};
use censurv::pipeline::{
    ablation_run, cross_validate, metrics_from_predictions, missing_sweep, Component, TrainConfig,
};
use censurv::survstat::{GroupSplit, RiskScores, SurvivalRecord};
use censurv::{Error, Result};
use clap::{Parser, Subcommand};

/// Multimodal survival analysis with censored-record relabelling.
#[derive(Parser)]
#[command(name = "censurv", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort with known true survival times.
    Gen {
        #[arg(long)]
        patients: usize,
        #[arg(long)]
        censor_rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Weibull shape of the true times (1 = exponential).
        #[arg(long)]
        time_shape: Option<f64>,
        /// Chance that each modality of a patient is absent.
        #[arg(long)]
        missing_rate: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-validate a model and save the run directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute metrics from a run's saved predictions.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-validate with one component switched off.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        component: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate with test patients randomly losing modalities.
    Missing {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',')]
        rates: Vec<f64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export Kaplan-Meier curves of the median-risk groups of a run.
    Km {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_config(path: Option<&Path>, seed: Option<u64>) -> Result<TrainConfig> {
    let mut config = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            serde_json::from_str(&text).map_err(|e| Error::Parse {
                file: p.to_path_buf(),
                location: format!("line {}, column {}", e.line(), e.column()),
                msg: e.to_string(),
            })?
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    config.validate()?;
    Ok(config)
}

fn print_summary(label: &str, mean: f64, std: f64) {
    println!("{label}: C-index {mean:.4} +/- {std:.4}");
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen {
            patients,
            censor_rate,
            seed,
            time_shape,
            missing_rate,
            out,
        } => {
            let defaults = SyntheticConfig::default();
            let config = SyntheticConfig {
                num_patients: patients,
                censor_rate,
                seed,
                time_shape: time_shape.unwrap_or(defaults.time_shape),
                modality_missing_rate: missing_rate.unwrap_or(defaults.modality_missing_rate),
                ..defaults
            };
            let cohort = generate_synthetic(&config)?;
            save_dataset(&cohort, &out)?;
            println!(
                "wrote {} patients ({:.1}% censored) to {}",
                cohort.len(),
                100.0 * cohort.censored_fraction(),
                out.display()
            );
        }
        Command::Train {
            data,
            config,
            seed,
            out,
        } => {
            let config = read_config(config.as_deref(), seed)?;
            let cohort = load_dataset(&data)?;
            let outcome = cross_validate(&cohort, &config)?;
            write_run(&outcome, &out)?;
            print_summary("test", outcome.metrics.mean_cindex, outcome.metrics.std_cindex);
        }
        Command::Eval { run, out } => {
            let config = read_config(Some(&run.join("config.json")), None)?;
            let rows = read_predictions(&run.join("predictions.csv"))?;
            let audit = read_relabel_audit(&run.join("relabel_audit.jsonl"))?;
            let metrics = metrics_from_predictions(&rows, &audit, config.total_epochs.checked_sub(1))?;
            write_metrics(&metrics, &out)?;
            print_summary("test", metrics.mean_cindex, metrics.std_cindex);
        }
        Command::Ablate {
            data,
            component,
            config,
            seed,
            out,
        } => {
            let component: Component = component.parse()?;
            let config = read_config(config.as_deref(), seed)?;
            let cohort = load_dataset(&data)?;
            let outcome = ablation_run(&cohort, &config, component)?;
            write_run(&outcome, &out)?;
            print_summary(
                &format!("without {component:?}").to_lowercase(),
                outcome.metrics.mean_cindex,
                outcome.metrics.std_cindex,
            );
        }
        Command::Missing {
            data,
            rates,
            config,
            seed,
            out,
        } => {
            if rates.is_empty() {
                return Err(Error::Invalid("--rates needs at least one value".into()));
            }
            let config = read_config(config.as_deref(), seed)?;
            let cohort = load_dataset(&data)?;
            let (base, runs) = missing_sweep(&cohort, &config, &rates)?;
            write_run(&base, &out)?;
            print_summary("rate 0", base.metrics.mean_cindex, base.metrics.std_cindex);
            let mut summary = Vec::with_capacity(runs.len());
            for r in &runs {
                let dir = out.join(format!("missing_{}", r.rate));
                write_metrics(&r.metrics, &dir.join("metrics.json"))?;
                write_predictions(&r.predictions, &dir.join("predictions.csv"))?;
                print_summary(&format!("rate {}", r.rate), r.metrics.mean_cindex, r.metrics.std_cindex);
                summary.push(serde_json::json!({
                    "rate": r.rate,
                    "mean_cindex": r.metrics.mean_cindex,
                    "std_cindex": r.metrics.std_cindex,
                }));
            }
            let path = out.join("missing.json");
            let text = serde_json::to_string_pretty(&summary).expect("plain json values") + "\n";
            fs::write(&path, text).map_err(|e| Error::Io { path, source: e })?;
        }
        Command::Km { run, out } => {
            let rows = read_predictions(&run.join("predictions.csv"))?;
            // split each fold at its own median, since risk scales differ between folds
            let mut by_fold: BTreeMap<usize, RiskScores> = BTreeMap::new();
            let mut records = Vec::with_capacity(rows.len());
            for r in &rows {
                by_fold.entry(r.fold).or_default().insert(r.patient_id.clone(), r.risk)?;
                records.push(SurvivalRecord::new(r.patient_id.clone(), r.time, r.event)?);
            }
            if records.len() < 2 {
                return Err(Error::Invalid("need at least two predictions".into()));
            }
            let mut split = GroupSplit {
                high_risk: Default::default(),
                low_risk: Default::default(),
            };
            for scores in by_fold.values() {
                let s = GroupSplit::by_median(scores);
                split.high_risk.extend(s.high_risk);
                split.low_risk.extend(s.low_risk);
            }
            write_km_csv(&records, &split, &out)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
