//! The TOML run configuration. Every section and key is optional; unknown
//! keys are rejected. Relative paths resolve against the config file's
//! directory.

use std::path::{Path, PathBuf};

use lsaf_core::model::{Branches, ModelConfig};
use lsaf_core::train::TrainConfig;
use serde::Deserialize;

use crate::error::CliError;

#[derive(Clone, Debug, Default, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub synth: SynthSection,
    pub out: OutSection,
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub hsi: Option<PathBuf>,
    pub lidar: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    /// Class count; taken from the largest label when absent.
    pub classes: Option<usize>,
    /// Per-class fraction of labelled pixels used for training.
    pub train_fraction: f64,
    pub split_seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            hsi: None,
            lidar: None,
            labels: None,
            classes: None,
            train_fraction: 0.2,
            split_seed: 0,
        }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub patch: usize,
    pub pca_dims: usize,
    pub hsi_widths: [usize; 3],
    pub spectral_kernels: [usize; 3],
    pub features: usize,
    pub hsi_2d_padding: usize,
    pub lidar_widths: [usize; 3],
    pub lidar_padding: usize,
    pub hidden: usize,
    pub se_reduction: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            patch: m.patch,
            pca_dims: m.pca_dims,
            hsi_widths: m.hsi_widths,
            spectral_kernels: m.spectral_kernels,
            features: m.features,
            hsi_2d_padding: m.hsi_2d_padding,
            lidar_widths: m.lidar_widths,
            lidar_padding: m.lidar_padding,
            hidden: m.hidden,
            se_reduction: m.se_reduction,
        }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Seeds parameter initialisation and the epoch shuffles.
    pub seed: u64,
    /// Rewrite the checkpoint every this many epochs; 0 writes it only at the end.
    pub checkpoint_every: usize,
    /// Samples per forward pass during evaluation and map rendering.
    pub eval_batch: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            lr: t.lr as f64,
            epochs: t.epochs,
            batch: t.batch,
            beta1: t.beta1 as f64,
            beta2: t.beta2 as f64,
            eps: t.eps as f64,
            seed: t.seed,
            checkpoint_every: 10,
            eval_batch: 256,
        }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub seed: u64,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            classes: 15,
            height: 64,
            width: 64,
            bands: 48,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct OutSection {
    pub dir: PathBuf,
}

impl Default for OutSection {
    fn default() -> Self {
        OutSection { dir: PathBuf::from("out") }
    }
}

/// Data file paths, all present.
#[derive(Clone, Debug, PartialEq)]
pub struct DataPaths {
    pub hsi: PathBuf,
    pub lidar: PathBuf,
    pub labels: PathBuf,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {}", e.message())))
    }

    /// Reads a config file and resolves its relative paths against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            CliError::Usage(m) => CliError::Usage(format!("{}: {m}", path.display())),
            e => e,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data.hsi, &mut cfg.data.lidar, &mut cfg.data.labels].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if cfg.out.dir.is_relative() {
            cfg.out.dir = base.join(&cfg.out.dir);
        }
        Ok(cfg)
    }

    pub fn data_paths(&self) -> Result<DataPaths, CliError> {
        let need = |p: &Option<PathBuf>, key: &str| {
            p.clone()
                .ok_or_else(|| CliError::Usage(format!("config key `data.{key}` is not set")))
        };
        Ok(DataPaths {
            hsi: need(&self.data.hsi, "hsi")?,
            lidar: need(&self.data.lidar, "lidar")?,
            labels: need(&self.data.labels, "labels")?,
        })
    }

    pub fn model_config(&self, classes: usize) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            classes,
            pca_dims: m.pca_dims,
            patch: m.patch,
            hsi_widths: m.hsi_widths,
            spectral_kernels: m.spectral_kernels,
            features: m.features,
            hsi_2d_padding: m.hsi_2d_padding,
            lidar_widths: m.lidar_widths,
            lidar_padding: m.lidar_padding,
            hidden: m.hidden,
            se_reduction: m.se_reduction,
            branches: Branches::Fused,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lr: t.lr as _,
            epochs: t.epochs,
            batch: t.batch,
            beta1: t.beta1 as _,
            beta2: t.beta2 as _,
            eps: t.eps as _,
            seed: t.seed,
            checkpoint_every: t.checkpoint_every,
        }
    }

    /// Everything checkable without touching the data files.
    pub fn validate(&self) -> Result<(), CliError> {
        let f = self.data.train_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(CliError::Usage(format!("`data.train_fraction` must lie in (0, 1), got {f}")));
        }
        if self.train.eval_batch == 0 {
            return Err(CliError::Usage("`train.eval_batch` must be at least 1".into()));
        }
        self.train_config().validate()?;
        // The class count only sizes the heads; 2 stands in until the labels are read.
        self.model_config(self.data.classes.unwrap_or(2)).validate()?;
        Ok(())
    }
}
