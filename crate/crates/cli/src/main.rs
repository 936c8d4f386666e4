use std::path::PathBuf;

use anyhow::{Context, Result};
use argus_core::pipeline;
use argus_core::RunConfig;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "argus", version, about = "Pre-train, fine-tune and evaluate a sequential recommender")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run config; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Requests bit-reproducible execution (recorded in the echoed config).
    #[arg(long)]
    deterministic: bool,
    /// Overrides the output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic event log and dataset header.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Pre-train on next-item and feedback prediction.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Start from an existing checkpoint.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Fine-tune the two-tower scorer on impression pairs.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Pre-trained checkpoint; random initialization when absent.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Compute holdout metrics and export per-impression scores.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
    },
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    if common.deterministic {
        cfg.deterministic = true;
    }
    if let Some(dir) = &common.out_dir {
        cfg.out_dir = dir.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Generate { common } => {
            let cfg = resolve(&common)?;
            let n = pipeline::run_generate(&cfg).context("generate")?;
            println!("{n} events -> {}", cfg.data.events.display());
        }
        Command::Pretrain { common, init } => {
            let cfg = resolve(&common)?;
            let path = pipeline::run_pretrain(&cfg, init.as_deref()).context("pretrain")?;
            println!("{}", path.display());
        }
        Command::Finetune { common, init } => {
            let cfg = resolve(&common)?;
            let path = pipeline::run_finetune(&cfg, init.as_deref()).context("finetune")?;
            println!("{}", path.display());
        }
        Command::Evaluate { common, ckpt } => {
            let cfg = resolve(&common)?;
            let report = pipeline::run_evaluate(&cfg, &ckpt).context("evaluate")?;
            print!("{}", report.to_table());
        }
    }
    Ok(())
}
