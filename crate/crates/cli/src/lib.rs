//! Command-line driver: synthesise a scene, train, evaluate and render maps.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data, format or
//! I/O error, 3 numeric failure during training.

pub mod commands;
pub mod config;
pub mod error;
pub mod ppm;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
pub use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "lsaf", version, about = "Joint hyperspectral and LiDAR land-cover classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded synthetic scene (HSI, LiDAR and label rasters plus run.toml).
    Synth(SynthArgs),
    /// Train on the configured scene; writes checkpoint, loss and metrics CSVs.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the configured test split.
    Eval(EvalArgs),
    /// Render a classification map as a binary PPM image.
    Map(MapArgs),
}

/// Overrides shared by the commands that read a run config.
#[derive(Debug, Default, Args)]
pub struct RunArgs {
    /// TOML run configuration.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Seed for parameter initialisation and shuffling (`train.seed`).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of epochs (`train.epochs`).
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Adam learning rate (`train.lr`).
    #[arg(long)]
    pub lr: Option<f64>,
    /// Mini-batch size (`train.batch`).
    #[arg(long)]
    pub batch: Option<usize>,
    /// Odd patch side length (`model.patch`).
    #[arg(long)]
    pub patch: Option<usize>,
    /// PCA output bands (`model.pca_dims`).
    #[arg(long)]
    pub pca_dims: Option<usize>,
    /// Output directory (`out.dir`).
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

impl RunArgs {
    /// The config file (or defaults) with flag overrides applied.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = self.seed {
            cfg.train.seed = v;
        }
        if let Some(v) = self.epochs {
            cfg.train.epochs = v;
        }
        if let Some(v) = self.lr {
            cfg.train.lr = v;
        }
        if let Some(v) = self.batch {
            cfg.train.batch = v;
        }
        if let Some(v) = self.patch {
            cfg.model.patch = v;
        }
        if let Some(v) = self.pca_dims {
            cfg.model.pca_dims = v;
        }
        if let Some(v) = &self.out {
            cfg.out.dir = v.clone();
        }
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// TOML run configuration; only its `[synth]` section is read.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub bands: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory receiving the rasters.
    #[arg(long, value_name = "DIR", default_value = "synth")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Continue from `<out>/checkpoint.lsaf`.
    #[arg(long)]
    pub resume: bool,
    /// Rewrite the checkpoint every N epochs (`train.checkpoint_every`).
    #[arg(long, value_name = "N")]
    pub checkpoint_every: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Checkpoint to evaluate; defaults to `<out>/checkpoint.lsaf`.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MapArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Checkpoint to apply; defaults to `<out>/checkpoint.lsaf`.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    /// Output image; defaults to `<out>/map.ppm`.
    #[arg(long, value_name = "FILE")]
    pub image: Option<PathBuf>,
    /// Paint every pixel, not only those with a reference label.
    #[arg(long)]
    pub all_pixels: bool,
}

/// Runs one parsed command, printing reports to stdout.
pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(a) => {
            let mut s = match &a.config {
                Some(p) => RunConfig::load(p)?.synth,
                None => config::SynthSection::default(),
            };
            s.classes = a.classes.unwrap_or(s.classes);
            s.height = a.height.unwrap_or(s.height);
            s.width = a.width.unwrap_or(s.width);
            s.bands = a.bands.unwrap_or(s.bands);
            s.seed = a.seed.unwrap_or(s.seed);
            for p in commands::cmd_synth(&s, &a.out)? {
                println!("{}", p.display());
            }
        }
        Command::Train(a) => {
            let mut cfg = a.run.resolve()?;
            if let Some(n) = a.checkpoint_every {
                cfg.train.checkpoint_every = n;
            }
            let outcome = commands::cmd_train(&cfg, a.resume)?;
            println!("{}", outcome.table);
            println!("checkpoint: {}", outcome.checkpoint.display());
        }
        Command::Eval(a) => {
            let cfg = a.run.resolve()?;
            let ck = a.checkpoint.unwrap_or_else(|| cfg.out.dir.join(commands::CHECKPOINT_FILE));
            println!("{}", commands::cmd_eval(&cfg, &ck)?.table);
        }
        Command::Map(a) => {
            let cfg = a.run.resolve()?;
            let ck = a.checkpoint.unwrap_or_else(|| cfg.out.dir.join(commands::CHECKPOINT_FILE));
            let image = a.image.unwrap_or_else(|| cfg.out.dir.join(commands::MAP_FILE));
            let m = commands::cmd_map(&cfg, &ck, &image, a.all_pixels)?;
            println!("{} ({}x{})", m.path.display(), m.width, m.height);
        }
    }
    Ok(())
}
