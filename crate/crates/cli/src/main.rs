use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use atm_cli::commands;
use atm_cli::{error_category, Outcome, RunConfig, UsageError};
use atm_core::theory::VerifyConfig;
use atm_core::ModelConfig;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "atm", version, about = "Adaptive token merging for vision transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Replaces the synthetic weight and input seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.apply_seed(s);
        }
        if let Some(o) = &self.out {
            cfg.output = o.clone();
        }
        Ok(cfg)
    }
}

fn parse_list<T: std::str::FromStr>(text: &str) -> anyhow::Result<Vec<T>> {
    text.split(',')
        .map(|s| s.trim().parse::<T>().map_err(|_| UsageError(format!("bad list item `{s}`")).into()))
        .collect()
}

#[derive(Subcommand)]
enum Command {
    /// Forward every input batch with the configured schedule.
    Run(Common),
    /// Tune each schedule kind to a FLOPs reduction and compare them.
    CompareSchedules {
        #[command(flatten)]
        common: Common,
        /// Target reduction as a fraction, e.g. 0.33.
        #[arg(long, default_value_t = 0.33)]
        target_reduction: f64,
    },
    /// Grid over (alpha, beta, theta_min); resumes from existing output.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, env = "ATM_WORKERS", default_value_t = 1)]
        workers: usize,
        /// Stop after this many new points.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Check the merging-error bounds and closed form on random cases.
    Verify {
        #[arg(long, default_value_t = 100_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        /// Upper-bound multiplier; values below 2 inject a fault.
        #[arg(long, default_value_t = 2.0, hide = true)]
        upper_coefficient: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// CLS distance after merging in a single layer, per layer and threshold.
    ProbeLoss {
        #[command(flatten)]
        common: Common,
        /// Comma-separated thresholds.
        #[arg(long, default_value = "0.8,0.85,0.9,0.95")]
        thetas: String,
    },
    /// Cost of the same inputs re-batched at several sizes.
    BatchSensitivity {
        #[command(flatten)]
        common: Common,
        /// Comma-separated batch sizes.
        #[arg(long, default_value = "1,4,16")]
        batch_sizes: String,
    },
    /// Write token maps for every input image.
    Render(Common),
    /// Baseline FLOPs of the configured model, or of the DeiT presets.
    Flops {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn dispatch(cmd: Command) -> anyhow::Result<Outcome> {
    match cmd {
        Command::Run(c) => commands::cmd_run(&c.load()?),
        Command::CompareSchedules { common, target_reduction } => {
            commands::cmd_compare_schedules(&common.load()?, target_reduction)
        }
        Command::Sweep { common, workers, limit } => {
            if workers == 0 {
                return Err(UsageError("--workers must be at least 1".into()).into());
            }
            commands::cmd_sweep(&common.load()?, workers, limit)
        }
        Command::Verify { trials, seed, dim, upper_coefficient, out } => {
            let cfg = VerifyConfig { trials, seed, dim, upper_coefficient, ..Default::default() };
            commands::cmd_verify(&cfg, out.as_deref())
        }
        Command::ProbeLoss { common, thetas } => commands::cmd_probe_loss(&common.load()?, &parse_list(&thetas)?),
        Command::BatchSensitivity { common, batch_sizes } => {
            commands::cmd_batch_sensitivity(&common.load()?, &parse_list(&batch_sizes)?)
        }
        Command::Render(c) => commands::cmd_render(&c.load()?),
        Command::Flops { config, out } => {
            let models = match config {
                Some(p) => vec![("model".to_string(), RunConfig::load(&p).context("loading config")?.model)],
                None => ["deit-t", "deit-s", "deit-b"]
                    .iter()
                    .map(|n| (n.to_string(), ModelConfig::preset(n).expect("built-in preset")))
                    .collect(),
            };
            commands::cmd_flops(&models, out.as_ref())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(Outcome::Success) => ExitCode::SUCCESS,
        Ok(Outcome::Failed) => ExitCode::from(1),
        Err(e) => {
            let cat = error_category(&e);
            eprintln!("error[{cat}]: {e:#}");
            ExitCode::from(if cat == "usage" { 2 } else { 1 })
        }
    }
}
