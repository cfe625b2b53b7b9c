use std::path::{Path, PathBuf};

use clap::Args;
use genb::biasworld::SplitBundle;
use genb::eval::{write_attention_csv, RunReport};
use genb::trainer::{final_evaluation, train_from, TrainConfig, TrainState};

use crate::failure::{io_failure, CmdResult, Failure};
use crate::gen::load_splits;

pub const CONFIG_ECHO: &str = "config.toml";
pub const REPORT_FILE: &str = "report.json";
pub const ATTENTION_FILE: &str = "attention.csv";
pub const QTYPE_FILE: &str = "qtype_accuracy.csv";

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory holding train.tar and test.tar.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for reports, logs and checkpoints.
    #[arg(long)]
    pub out: PathBuf,
    /// Flat TOML training config; missing keys take their defaults.
    #[arg(long, conflicts_with = "resume")]
    pub config: Option<PathBuf>,
    /// Continue from a checkpoint with the config stored in it.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

pub fn run(args: &TrainArgs) -> CmdResult {
    let (train, test) = load_splits(&args.data)?;
    let state = match &args.resume {
        Some(ckpt) => {
            let mut state = TrainState::load(ckpt)?;
            if let Some(e) = args.epochs {
                state.config.epochs = e;
            }
            if args.seed.is_some_and(|s| s != state.config.seed) {
                return Err(Failure::Usage("--seed cannot change the seed of a resumed run".into()));
            }
            state
        }
        None => {
            let mut config = match &args.config {
                Some(path) => TrainConfig::from_file(path)?,
                None => TrainConfig::default(),
            };
            if let Some(s) = args.seed {
                config.seed = s;
            }
            if let Some(e) = args.epochs {
                config.epochs = e;
            }
            TrainState::new(config, &train.spec)?
        }
    };
    let report = run_in_dir(state, &train, &test, &args.out)?;
    print_summary(&report);
    Ok(())
}

/// Trains and writes every run artifact under `out`.
pub fn run_in_dir(state: TrainState, train: &SplitBundle, test: &SplitBundle, out: &Path) -> CmdResult<RunReport> {
    std::fs::create_dir_all(out).map_err(|e| io_failure(out, e))?;
    let echo = out.join(CONFIG_ECHO);
    std::fs::write(&echo, state.config.to_toml_string()).map_err(|e| io_failure(&echo, e))?;
    let outcome = train_from(state, train, test, Some(out))?;
    outcome.report.save(&out.join(REPORT_FILE))?;
    outcome.report.write_qtype_csv(&out.join(QTYPE_FILE))?;
    write_attention_csv(&out.join(ATTENTION_FILE), &outcome.attention)?;
    Ok(outcome.report)
}

fn print_summary(report: &RunReport) {
    let stats = &report.split_statistics;
    println!(
        "prior baseline: train {:.4} test {:.4}",
        stats.prior_baseline_train, stats.prior_baseline_test
    );
    match &report.final_metrics {
        Some(fin) => {
            println!(
                "target: train {:.4} test {:.4} ood gap {:+.4}",
                fin.train.overall, fin.test.overall, fin.ood_gap
            );
            println!(
                "bias: prior TV {:.4} noise test acc {:.4} attention dispersion {:.4}",
                fin.bias.prior_divergence.mean_tv, fin.bias.noise_test_accuracy, fin.bias.mean_attention_dispersion
            );
        }
        None => println!("no training steps run"),
    }
    println!("wall clock {:.1}s", report.wall_clock_secs);
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory holding train.tar and test.tar.
    #[arg(long)]
    pub data: PathBuf,
    /// Where to write the metrics as JSON; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn eval(args: &EvalArgs) -> CmdResult {
    let (train, test) = load_splits(&args.data)?;
    let state = TrainState::load(&args.checkpoint)?;
    if state.models.config.num_answers != train.spec.num_answers {
        return Err(Failure::Usage(format!(
            "{} has {} answers but the dataset has {}",
            args.checkpoint.display(),
            state.models.config.num_answers,
            train.spec.num_answers
        )));
    }
    let (metrics, _) = final_evaluation(&state, &train, &test)?;
    let json = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
    match &args.out {
        Some(path) => {
            std::fs::write(path, json + "\n").map_err(|e| io_failure(path, e))?;
            println!(
                "step {}: train {:.4} test {:.4} ood gap {:+.4}",
                state.step, metrics.train.overall, metrics.test.overall, metrics.ood_gap
            );
        }
        None => println!("{json}"),
    }
    Ok(())
}
