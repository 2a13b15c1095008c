use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use asia_core::pipeline::{cmd_eval, cmd_fixture, cmd_noiseopt, cmd_segment, cmd_train, Overrides, PipelineConfig};
use asia_core::Result;

#[derive(Parser)]
#[command(name = "asia", about = "Multi-view part segmentation of UV-mapped meshes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Config file of `key = value` lines (see docs/config.md).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    views: Option<usize>,
    #[arg(long = "atlas-res")]
    atlas_res: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    /// Epochs per training phase (`train`) or noise-optimization epochs.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "ignore-background")]
    ignore_background: bool,
}

impl Common {
    fn config(&self, training: bool) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        Overrides {
            seed: self.seed,
            views: self.views,
            atlas_res: self.atlas_res,
            lambda: self.lambda,
            eta: self.eta,
            epochs: self.epochs,
            ignore_background: self.ignore_background,
        }
        .apply(&mut cfg, training)?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Learn part tokens and adapters from a dataset directory.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Segment rendered views of a mesh and fuse them in UV space.
    Segment {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Segment, then optimize the per-view noise for consistency.
    Noiseopt {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Per-part IoU between a predicted and a ground-truth atlas.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        valid: Option<PathBuf>,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "ignore-background")]
        ignore_background: bool,
    },
    /// Write the synthetic sphere fixture (mesh, texture, GT atlas, dataset).
    Fixture {
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "train-views", default_value_t = 8)]
        train_views: usize,
        #[command(flatten)]
        common: Common,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { dataset, out, common } => {
            let run = cmd_train(&common.config(true)?, &dataset, &out)?;
            println!("wrote {}", run.checkpoint.display());
        }
        Command::Segment {
            checkpoint,
            mesh,
            out,
            common,
        } => {
            let run = cmd_segment(&common.config(false)?, &checkpoint, &mesh, &out)?;
            println!("fused {} texels into {}", run.atlas.valid_count(), out.display());
        }
        Command::Noiseopt {
            checkpoint,
            mesh,
            out,
            common,
        } => {
            let run = cmd_noiseopt(&common.config(false)?, &checkpoint, &mesh, &out)?;
            println!(
                "energy {:.6e} -> {:.6e} (epoch {})",
                run.summary.initial.total, run.summary.best.total, run.summary.best_epoch
            );
        }
        Command::Eval {
            pred,
            gt,
            valid,
            out,
            ignore_background,
        } => {
            let (_, json) = cmd_eval(&pred, &gt, valid.as_deref(), ignore_background)?;
            let text = serde_json::to_string_pretty(&json).expect("json") + "\n";
            match out {
                Some(p) => std::fs::write(p, text)?,
                None => print!("{text}"),
            }
        }
        Command::Fixture {
            out,
            train_views,
            common,
        } => {
            cmd_fixture(&common.config(false)?, &out, train_views)?;
            println!("wrote fixture to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
