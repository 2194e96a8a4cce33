//! Command-line front end for the unlearning-verification toolkit.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use everify_core::data::{select_targets, Dataset, WrongLabelMode};
use everify_core::error::Error;
use everify_core::harness::{
    apply_unlearner, build_split, load_checkpoint, perturb_phase, read_targets, run_scenario,
    run_sweep, save_checkpoint, train_phase, write_report, write_targets, ExperimentConfig,
    ReportFormat, SweepAxis,
};
use everify_core::verify::{verify_with_beta, ModelOracle};

#[derive(Parser)]
#[command(name = "everify", about = "Verify whether a machine-unlearning request was honestly executed", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the model described by a config and save a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Craft the perturbed unlearning request for a trained checkpoint.
    Perturb {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run the configured unlearner on a request directory.
    Unlearn {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        request: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Query a checkpoint on saved targets and emit the JSON verdict.
    Verify {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        targets: PathBuf,
        #[arg(long)]
        json: PathBuf,
    },
    /// Execute one end-to-end scenario and append its metrics row.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Sweep esr or d over a grid, one scenario per point.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = ["esr", "d"])]
        axis: String,
        /// Comma-separated grid values.
        #[arg(long)]
        grid: String,
        #[arg(long)]
        report: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train { config, out } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let (_, split) = build_split(&cfg)?;
            let trained = train_phase(&cfg, &split)?;
            save_checkpoint(&trained, &out)?;
            println!("trained {} parameters -> {}", trained.param_count(), out.display());
        }
        Command::Perturb { config, ckpt, out_dir } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let (_, split) = build_split(&cfg)?;
            let trained = load_checkpoint(&ckpt)?;
            let targets = select_targets(
                &trained,
                &split.heldout,
                cfg.target_count,
                cfg.conf_threshold,
                WrongLabelMode::SecondBest,
            )?;
            let request = perturb_phase(&cfg, &trained, &split.erased, &targets)?;
            std::fs::create_dir_all(&out_dir)?;
            request.original.write_csv(&out_dir.join("original.csv"))?;
            request.perturbed.write_csv(&out_dir.join("perturbed.csv"))?;
            write_targets(&targets, &out_dir.join("targets.csv"))?;
            let meta = serde_json::to_string_pretty(&request.metadata(&cfg.perturb))
                .map_err(|e| Error::format(format!("metadata serialization: {e}")))?;
            std::fs::write(out_dir.join("metadata.json"), meta + "\n")?;
            println!(
                "request written to {} (best phi {:.6})",
                out_dir.display(),
                request.trace.best_phi
            );
        }
        Command::Unlearn { config, ckpt, request, out } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let (dataset, split) = build_split(&cfg)?;
            let trained = load_checkpoint(&ckpt)?;
            let perturbed =
                Dataset::read_csv(&request.join("perturbed.csv"), dataset.k, dataset.value_range)?;
            let remaining = split.train.subset(
                &(0..split.train.len())
                    .filter(|i| !split.erased_indices.contains(i))
                    .collect::<Vec<_>>(),
            )?;
            let (params, diverged) = apply_unlearner(&cfg, &trained, &perturbed, &remaining)?;
            save_checkpoint(&params, &out)?;
            if diverged {
                eprintln!("warning: unlearner diverged; best prior iterate saved");
            }
            println!("unlearned checkpoint -> {}", out.display());
        }
        Command::Verify { config, ckpt, targets, json } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let params = load_checkpoint(&ckpt)?;
            let targets = read_targets(&targets)?;
            let report = verify_with_beta(
                &ModelOracle(&params),
                &targets,
                params.class_count(),
                cfg.tau,
                cfg.beta_override,
            )?;
            let text = serde_json::to_string_pretty(&report)
                .map_err(|e| Error::format(format!("report serialization: {e}")))?;
            std::fs::write(&json, text + "\n")?;
            let verdict = match &report.test {
                Some(t) => format!("{:?}", t.decision),
                None => "Inconclusive".to_string(),
            };
            println!("uv {:.4}, verdict {verdict} -> {}", report.uv, json.display());
        }
        Command::Run { config, report } => {
            let cfg = ExperimentConfig::from_file(&config)?;
            let (metrics, _) = run_scenario(&cfg)?;
            write_report(std::slice::from_ref(&metrics), &report, ReportFormat::Csv)?;
            println!(
                "{}: decision {}, uv {:.4}, ao {:.4}, au {:.4}",
                metrics.scenario, metrics.decision, metrics.uv, metrics.ao, metrics.au
            );
        }
        Command::Sweep { config, axis, grid, report } => {
            let mut cfg = ExperimentConfig::from_file(&config)?;
            let values: Vec<f64> = grid
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::config(format!("bad grid value `{s}`")))
                })
                .collect::<Result<_, _>>()?;
            cfg.sweep = match axis.as_str() {
                "esr" => SweepAxis::Esr(values),
                _ => SweepAxis::D(values),
            };
            let rows = run_sweep(&cfg)?;
            write_report(&rows, &report, ReportFormat::Csv)?;
            println!("{} sweep rows -> {}", rows.len(), report.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Config(_) => 2,
                Error::Numeric(_) | Error::InsufficientTargets { .. } => 3,
                Error::Io(_) | Error::Format(_) => 4,
                Error::Shape(_) => 2,
            };
            ExitCode::from(code)
        }
    }
}
