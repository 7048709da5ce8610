//! `survmoe` command-line front end.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use survmoe::heads::HeadKind;
use survmoe::parallel::Execution;
use survmoe::runner::config::Settings;
use survmoe::runner::{
    self, ClusterArgs, Command, DataSource, EvalArgs, GenDataArgs, GradCheckArgs, SplitName, SweepArgs, TrainArgs,
};
use survmoe::{Error, Result};

/// Relative `--out` paths are resolved under this directory when it is set.
const OUTPUT_ROOT_ENV: &str = "SURVMOE_OUTPUT_ROOT";

#[derive(Parser)]
#[command(name = "survmoe", version, about = "Mixture-of-experts survival models over an MTLR likelihood")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the 10-class synthetic survival dataset.
    GenData(GenDataCli),
    /// Train one model and write a checkpoint.
    Train(TrainCli),
    /// Evaluate a checkpoint on one split.
    Eval(EvalCli),
    /// Train every (head, experts, seed) cell and tabulate test metrics.
    SweepExperts(SweepCli),
    /// Routing-based cluster report for one or more checkpoints.
    ClusterReport(ClusterCli),
    /// Finite-difference gradient check of every head.
    GradCheck(GradCheckCli),
    /// Re-run a manifest and compare its metrics bit for bit.
    Replay(ReplayCli),
}

#[derive(Args)]
struct OutCli {
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
}

impl OutCli {
    fn resolve(&self, default: &str) -> PathBuf {
        let out = self.out.clone().unwrap_or_else(|| PathBuf::from(default));
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if out.is_relative() => PathBuf::from(root).join(out),
            _ => out,
        }
    }
}

#[derive(Args)]
struct DataCli {
    /// Records CSV.
    #[arg(long)]
    data: PathBuf,
    /// JSON column-role declaration (default: `time`, `event`, rest continuous).
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Truth labels CSV (`id,class`).
    #[arg(long)]
    labels: Option<PathBuf>,
}

impl DataCli {
    fn source(&self) -> DataSource {
        DataSource {
            data: self.data.clone(),
            schema: self.schema.clone(),
            labels: self.labels.clone(),
        }
    }
}

#[derive(Args)]
struct GenDataCli {
    #[arg(long, default_value_t = 1600)]
    samples_per_class: usize,
    #[arg(long, default_value_t = 0.15)]
    censor_rate: f64,
    #[arg(long, default_value_t = 16)]
    feature_dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutCli,
}

/// Flags shared by `train` and `sweep-experts`; unset flags fall through to
/// the config file, then the preset, then defaults.
#[derive(Args)]
struct TrainFlags {
    /// TOML settings file (keys as in `Settings`, e.g. `learning_rate`, `hidden_dim`).
    #[arg(long)]
    config: Option<PathBuf>,
    /// `<mnist|support2|sepsis>-<head>`, e.g. `support2-personalized`.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lambda_lb: Option<f64>,
    #[arg(long)]
    kappa_init: Option<f64>,
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Train/validation/test fractions.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    split: Option<Vec<f64>>,
    #[arg(long)]
    split_seed: Option<u64>,
    /// Single-threaded execution.
    #[arg(long)]
    sequential: bool,
}

impl TrainFlags {
    fn settings(&self, head: Option<HeadKind>, experts: Option<usize>, seed: Option<u64>) -> Result<Settings> {
        let file = match &self.config {
            Some(p) => Settings::from_toml_file(p)?,
            None => Settings::default(),
        };
        let cli = Settings {
            preset: self.preset.clone(),
            head,
            experts,
            hidden_dim: self.hidden_dim,
            layers: self.layers,
            learning_rate: self.lr,
            batch_size: self.batch_size,
            lambda_lb: self.lambda_lb,
            kappa_init: self.kappa_init,
            bins: self.bins,
            patience: self.patience,
            max_epochs: self.max_epochs,
            seed,
            split: self.split.as_ref().map(|v| [v[0], v[1], v[2]]),
            split_seed: self.split_seed,
            sequential: self.sequential.then_some(true),
        };
        Ok(file.overlay(cli))
    }
}

#[derive(Args)]
struct TrainCli {
    #[command(flatten)]
    data: DataCli,
    #[arg(long)]
    head: Option<HeadKind>,
    #[arg(long)]
    experts: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    flags: TrainFlags,
    #[command(flatten)]
    out: OutCli,
}

#[derive(Args)]
struct EvalCli {
    /// Checkpoint file or training output directory.
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataCli,
    #[arg(long, default_value = "test")]
    split: SplitName,
    /// Fail unless the checkpoint uses this many time bins.
    #[arg(long)]
    bins: Option<usize>,
    /// Equal-mass ECE bins.
    #[arg(long, default_value_t = 10)]
    ece_bins: usize,
    /// Percentiles of the time-bin grid for the Brier score.
    #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,0.75")]
    percentiles: Vec<f64>,
    #[arg(long)]
    sequential: bool,
    #[command(flatten)]
    out: OutCli,
}

#[derive(Args)]
struct SweepCli {
    #[command(flatten)]
    data: DataCli,
    #[arg(long, value_delimiter = ',', default_value = "fixed,adjustable,personalized")]
    heads: Vec<HeadKind>,
    #[arg(long, default_value_t = 2)]
    min_experts: usize,
    #[arg(long, default_value_t = 10)]
    max_experts: usize,
    #[arg(long, default_value_t = 1)]
    step: usize,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[command(flatten)]
    flags: TrainFlags,
    #[command(flatten)]
    out: OutCli,
}

#[derive(Args)]
struct ClusterCli {
    /// Repeat for cross-seed ARI; the first one is reported in full.
    #[arg(long = "checkpoint", required = true)]
    checkpoints: Vec<PathBuf>,
    #[command(flatten)]
    data: DataCli,
    #[arg(long, default_value = "test")]
    split: SplitName,
    /// Require pairwise ARI across checkpoints.
    #[arg(long)]
    ari: bool,
    #[arg(long)]
    sequential: bool,
    #[command(flatten)]
    out: OutCli,
}

#[derive(Args)]
struct GradCheckCli {
    #[arg(long, value_delimiter = ',', default_value = "fixed,adjustable,personalized")]
    heads: Vec<HeadKind>,
    #[arg(long, value_delimiter = ',', default_value = "2,4")]
    experts: Vec<usize>,
    #[arg(long, default_value_t = 1e-5)]
    epsilon: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, hide = true)]
    inject_sign_flip: bool,
    #[command(flatten)]
    out: OutCli,
}

#[derive(Args)]
struct ReplayCli {
    /// Manifest file or the directory holding it.
    manifest: PathBuf,
    #[command(flatten)]
    out: OutCli,
}

fn execution(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

fn build(cmd: Cmd) -> Result<Option<Command>> {
    Ok(Some(match cmd {
        Cmd::GenData(c) => Command::GenData(GenDataArgs {
            samples_per_class: c.samples_per_class,
            censor_rate: c.censor_rate,
            feature_dim: c.feature_dim,
            seed: c.seed,
            out: c.out.resolve("synthetic"),
            force: c.out.force,
        }),
        Cmd::Train(c) => {
            let (model, train, split) = c.flags.settings(c.head, c.experts, c.seed)?.resolve()?;
            Command::Train(TrainArgs {
                data: c.data.source(),
                split,
                model,
                train,
                out: c.out.resolve("train"),
                force: c.out.force,
            })
        }
        Cmd::Eval(c) => Command::Eval(EvalArgs {
            checkpoint: c.checkpoint,
            data: c.data.source(),
            split: c.split,
            bins: c.bins,
            ece_bins: c.ece_bins,
            percentiles: c.percentiles,
            execution: execution(c.sequential),
            out: c.out.resolve("eval"),
            force: c.out.force,
        }),
        Cmd::SweepExperts(c) => {
            let (model, train, split) = c.flags.settings(None, None, None)?.resolve_unchecked()?;
            Command::SweepExperts(SweepArgs {
                data: c.data.source(),
                split,
                heads: c.heads,
                min_experts: c.min_experts,
                max_experts: c.max_experts,
                step: c.step,
                seeds: c.seeds,
                hidden_dim: model.hidden_dim,
                layers: model.layers,
                train,
                out: c.out.resolve("sweep"),
                force: c.out.force,
            })
        }
        Cmd::ClusterReport(c) => Command::ClusterReport(ClusterArgs {
            checkpoints: c.checkpoints,
            data: c.data.source(),
            split: c.split,
            ari: c.ari,
            execution: execution(c.sequential),
            out: c.out.resolve("clusters"),
            force: c.out.force,
        }),
        Cmd::GradCheck(c) => Command::GradCheck(GradCheckArgs {
            heads: c.heads,
            experts: c.experts,
            epsilon: c.epsilon,
            tolerance: c.tolerance,
            seed: c.seed,
            inject_sign_flip: c.inject_sign_flip,
            out: c.out.resolve("grad-check"),
            force: c.out.force,
        }),
        Cmd::Replay(c) => {
            let out = c.out.resolve("replay");
            let report = runner::replay(&c.manifest, &out)?;
            if report.identical {
                println!("replay of {}: metrics identical", report.command);
                return Ok(None);
            }
            return Err(Error::Numerical(format!(
                "replay of {} differs at: {}",
                report.command,
                report.differences.join(", ")
            )));
        }
    }))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = build(cli.command).and_then(|cmd| match cmd {
        Some(cmd) => runner::run(&cmd).map(|m| {
            println!("{} finished in {:.1}s; manifest in {}", cmd.name(), m.runtime_secs, cmd.out().display());
        }),
        None => Ok(()),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
