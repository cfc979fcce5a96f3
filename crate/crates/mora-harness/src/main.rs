use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use mora::error::{Error, Result};
use mora::model::Method;
use mora_harness::{
    cmd_ablate_blocks, cmd_ablate_rank, cmd_sweep_missing, cmd_train, consolidate,
    ExperimentConfig, Overrides,
};

#[derive(Parser)]
#[command(
    name = "mora",
    about = "Missing-modality adapter fine-tuning experiments on synthetic data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (JSON with model/adapter/train/task/missing/sweep).
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides the config's out_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated run seeds (overrides the config's seeds).
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Adapter method: mora, lora, or none.
    #[arg(long)]
    method: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured method and evaluate across the test specs.
    Train(RunArgs),
    /// Train per train-spec and evaluate across the whole test grid.
    SweepMissing(RunArgs),
    /// Train one model per adapter rank.
    AblateRank(RunArgs),
    /// Train one model per plugged-block set.
    AblateBlocks(RunArgs),
    /// Merge every report under a run directory into summary CSVs.
    Report {
        /// Directory holding report.json files (searched recursively).
        run_dir: PathBuf,
        /// Where to write summary.csv and fig2_series.csv (default: run_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_with_overrides(args: &RunArgs) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    let method = match &args.method {
        Some(m) => Some(Method::from_str(m)?),
        None => None,
    };
    cfg.apply(Overrides {
        seeds: args.seeds.clone(),
        method,
        out_dir: args.out.clone(),
    });
    cfg.validate()?;
    let out_dir = cfg.resolved_out_dir();
    std::fs::create_dir_all(&out_dir)?;
    Ok((cfg, out_dir))
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Train(args) => {
            let (cfg, out_dir) = load_with_overrides(args)?;
            let report = cmd_train(&cfg, &out_dir)?;
            for s in &report.summary {
                println!(
                    "{} test ({}, {}): macro-F1 {:.4} +/- {:.4}",
                    report.method, s.test_avail_img, s.test_avail_txt, s.mean_f1, s.std_f1
                );
            }
            println!(
                "trainable ratio {:.5} ({} / {} params); report at {}",
                report.trainable_ratio,
                report.trainable_params,
                report.total_params,
                out_dir.join("report.json").display()
            );
        }
        Command::SweepMissing(args) => {
            let (cfg, out_dir) = load_with_overrides(args)?;
            let reports = cmd_sweep_missing(&cfg, &out_dir)?;
            println!(
                "{} sweep runs written under {} (grid.csv, summary.csv)",
                reports.len(),
                out_dir.display()
            );
        }
        Command::AblateRank(args) => {
            let (cfg, out_dir) = load_with_overrides(args)?;
            let reports = cmd_ablate_rank(&cfg, &out_dir)?;
            for r in &reports {
                println!(
                    "{}: macro-F1 {:.4}, trainable {}",
                    r.label, r.summary[0].mean_f1, r.trainable_params
                );
            }
        }
        Command::AblateBlocks(args) => {
            let (cfg, out_dir) = load_with_overrides(args)?;
            let reports = cmd_ablate_blocks(&cfg, &out_dir)?;
            for r in &reports {
                println!(
                    "{}: macro-F1 {:.4}, trainable {}",
                    r.label, r.summary[0].mean_f1, r.trainable_params
                );
            }
        }
        Command::Report { run_dir, out } => {
            let out_dir = out.clone().unwrap_or_else(|| run_dir.clone());
            let reports = consolidate(run_dir, &out_dir)?;
            println!(
                "merged {} reports into {}",
                reports.len(),
                out_dir.join("summary.csv").display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error[{}]: {err}", categorize(&err));
            ExitCode::FAILURE
        }
    }
}

fn categorize(err: &Error) -> &'static str {
    err.category()
}
