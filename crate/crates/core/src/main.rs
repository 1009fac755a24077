use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use moe_locality::harness::{self, ExperimentConfig, CHECKPOINT_FILE};

#[derive(Parser)]
#[command(
    name = "moe-locality",
    about = "Routing-locality fine-tuning and expert offload simulation"
)]
struct Cli {
    /// Experiment config (JSON). Defaults to the built-in desk preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; overrides the config's seed everywhere.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the synthetic dataset.
    GenData,
    /// Pretrain (unless --base is given) and fine-tune; writes checkpoint and metrics.
    Train {
        /// Start fine-tuning from this checkpoint instead of pretraining.
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Decode held-out prompts with the predictor and offload simulator.
    Simulate {
        /// Defaults to OUT/checkpoint.json.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and simulate every grid point.
    Sweep {
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Summarise OUT/sweep.csv into OUT/report.json.
    Report,
    /// Print the desk preset config.
    DefaultConfig,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
        None => ExperimentConfig::desk(7),
    };
    Ok(match cli.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if cli.workers == 0 {
        bail!("--workers must be >= 1");
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.workers)
        .build_global()
        .context("starting thread pool")?;
    let cfg = load_config(&cli)?;
    let out = cli.out.as_path();
    match &cli.cmd {
        Cmd::GenData => {
            let d = harness::cmd_gen_data(&cfg, out)?;
            println!("{} train / {} val sequences", d.train.len(), d.val.len());
        }
        Cmd::Train { base } => {
            let a = harness::cmd_train(&cfg, out, base.as_deref())?;
            if let Some(m) = a.outcome.history.last() {
                println!(
                    "epoch {}: val_nll {:.4}, transfers/layer {:.3}",
                    m.epoch, m.val_nll, m.transfers_per_layer
                );
            }
        }
        Cmd::Simulate { checkpoint } => {
            let ck = checkpoint.clone().unwrap_or_else(|| out.join(CHECKPOINT_FILE));
            if !ck.exists() {
                bail!("checkpoint {} not found; run `train` first", ck.display());
            }
            for r in harness::cmd_simulate(&cfg, &ck, out)? {
                println!(
                    "{:<10} prefetch={:<9} tx/layer {:.3}  hit {:.3}  tok/s {:.1}",
                    r.policy,
                    r.prefetch.name(),
                    r.transfers_per_layer,
                    r.hit_rate,
                    r.tokens_per_s_est
                );
            }
        }
        Cmd::Sweep { base } => {
            let rows = harness::cmd_sweep(&cfg, out, base.as_deref(), cli.workers)?;
            println!(
                "{} rows written to {}",
                rows.len(),
                out.join(harness::SWEEP_CSV).display()
            );
        }
        Cmd::Report => {
            let rows = harness::cmd_report(out)?;
            println!("{} rows summarised", rows.len());
        }
        Cmd::DefaultConfig => println!("{}", serde_json::to_string_pretty(&cfg)?),
    }
    Ok(())
}
