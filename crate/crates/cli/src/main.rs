use std::path::PathBuf;
use std::process::ExitCode;

use ape_cli::commands::read_meta;
use ape_cli::{cmd_eval, cmd_plot, cmd_pretrain, cmd_probe, cmd_train_rl, EncoderSource, RunConfig};
use ape_core::checkpoint::Checkpoint;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "ape", about = "Adaptive contrastive pretraining and world-model policy learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON configuration; omitted keys take the profile defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set moco.lr=0.1` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Contrastive pretraining of the encoder with the adaptive scheduler.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "runs/pretrain")]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<u64>,
        /// Metrics CSV path (default: <out>/pretrain.csv).
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Continue from a pretraining checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Policy learning on PixelChase.
    TrainRl {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "runs/rl")]
        out: PathBuf,
        /// Raw environment frames to train for.
        #[arg(long)]
        env_steps: Option<usize>,
        /// Checkpoint path, `random-frozen` or `random-trainable`.
        #[arg(long, default_value = "random-frozen")]
        encoder: EncoderSource,
        #[arg(long)]
        freeze_stages: Option<usize>,
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Linear probe of a checkpoint's encoder trunk.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        /// Exported dataset directory (default: generate ShapeWorld).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Append the accuracy to this CSV.
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Write a PCA scatter of the validation features.
        #[arg(long)]
        pca: Option<PathBuf>,
    },
    /// Greedy evaluation of a policy checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Line charts of metrics CSVs; several files are overlaid with their mean.
    Plot {
        #[arg(long = "metrics", required = true, num_args = 1..)]
        metrics: Vec<PathBuf>,
        #[arg(long, default_value = "plots")]
        out: PathBuf,
        /// Columns to chart (default: all).
        #[arg(long, num_args = 1..)]
        columns: Vec<String>,
    },
}

/// The run configuration: the stored one when resuming without `--config`.
fn config(common: &Common, resume: Option<&PathBuf>) -> ape_cli::Result<RunConfig> {
    let mut cfg = match (resume, &common.config) {
        (Some(ck), None) => {
            let (_, stored, _) = read_meta(&Checkpoint::load(ck)?)?;
            RunConfig::resolve(Some(&stored.to_json()), &common.set)?
        }
        _ => RunConfig::load(common.config.as_deref(), &common.set)?,
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> ape_cli::Result<()> {
    match cli.command {
        Command::Pretrain {
            common,
            out,
            epochs,
            metrics,
            resume,
        } => {
            let mut cfg = config(&common, resume.as_ref())?;
            if let Some(e) = epochs {
                cfg.pretrain.epochs = e;
            }
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("config.json"), cfg.to_json())?;
            let r = cmd_pretrain(&cfg, &out, metrics.as_deref(), resume.as_deref())?;
            if let Some(a) = r.initial_probe {
                println!("probe accuracy at initialisation: {a:.4}");
            }
            if let Some(a) = r.final_probe {
                println!("probe accuracy after pretraining: {a:.4}");
            }
            println!("checkpoint {}\nmetrics {}", r.checkpoint.display(), r.metrics.display());
        }
        Command::TrainRl {
            common,
            out,
            env_steps,
            encoder,
            freeze_stages,
            metrics,
            resume,
        } => {
            let mut cfg = config(&common, resume.as_ref())?;
            if let Some(n) = env_steps {
                cfg.rl.env_steps = n;
            }
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("config.json"), cfg.to_json())?;
            let r = cmd_train_rl(&cfg, &encoder, freeze_stages, &out, metrics.as_deref(), resume.as_deref())?;
            for row in &r.rows {
                println!("env_steps {:>7}  return {:.3}", row.env_steps, row.episode_return);
            }
            println!("checkpoint {}\nmetrics {}", r.checkpoint.display(), r.metrics.display());
        }
        Command::Probe {
            common,
            ckpt,
            data,
            metrics,
            pca,
        } => {
            let cfg = config(&common, None)?;
            let acc = cmd_probe(&ckpt, data.as_deref(), &cfg, metrics.as_deref(), pca.as_deref())?;
            println!("probe accuracy {acc:.4}");
        }
        Command::Eval { ckpt, episodes } => {
            println!("mean return {:.4}", cmd_eval(&ckpt, episodes)?);
        }
        Command::Plot { metrics, out, columns } => {
            for path in cmd_plot(&metrics, &out, &columns)? {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
