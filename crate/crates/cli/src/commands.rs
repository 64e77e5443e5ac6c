use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use lsaf_core::data::{cut_patches, extract_patches, split, synth_generate, PatchSet, Preprocessor, RasterPair};
use lsaf_core::model::{Checkpoint, Lsaf};
use lsaf_core::train::report::{class_names, render_table, write_loss_csv, write_metrics_csv, ReportColumn};
use lsaf_core::train::{argmax, evaluate, train_from, EpochRecord, MetricsReport, Observer, TrainState};
use lsaf_core::Tensor;
use rayon::prelude::*;

use crate::config::{RunConfig, SynthSection};
use crate::error::CliError;
use crate::ppm;

pub const HSI_FILE: &str = "hsi.lsaf";
pub const LIDAR_FILE: &str = "lidar.lsaf";
pub const LABELS_FILE: &str = "labels.lsaf";
pub const CONFIG_FILE: &str = "run.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.lsaf";
pub const LOSS_FILE: &str = "loss.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EVAL_METRICS_FILE: &str = "eval_metrics.csv";
pub const MAP_FILE: &str = "map.ppm";

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(CliError::io(format!("cannot create {}", dir.display())))
}

/// Writes the synthetic scene's three rasters and a `run.toml` pointing at
/// them; returns the written paths.
pub fn cmd_synth(cfg: &SynthSection, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let pair = synth_generate(cfg.classes, cfg.height, cfg.width, cfg.bands, cfg.seed)?;
    create_dir(out)?;
    let paths = [HSI_FILE, LIDAR_FILE, LABELS_FILE].map(|f| out.join(f));
    pair.save(&paths[0], &paths[1], &paths[2])?;
    let run = out.join(CONFIG_FILE);
    let text = format!(
        "# Synthetic scene: {} classes, {}x{} pixels, {} bands, seed {}\n\
         [data]\nhsi = \"{HSI_FILE}\"\nlidar = \"{LIDAR_FILE}\"\nlabels = \"{LABELS_FILE}\"\n\n[out]\ndir = \"run\"\n",
        cfg.classes, cfg.height, cfg.width, cfg.bands, cfg.seed
    );
    fs::write(&run, text).map_err(CliError::io(format!("cannot write {}", run.display())))?;
    info!("wrote synthetic scene to {}", out.display());
    Ok(paths.into_iter().chain([run]).collect())
}

/// A scene after spectral reduction and scaling.
pub struct Prepared {
    pub prep: Preprocessor,
    pub scene: RasterPair,
    pub classes: usize,
}

/// Loads the configured rasters and reduces them, fitting a preprocessor
/// unless one is supplied.
pub fn prepare(cfg: &RunConfig, prep: Option<Preprocessor>) -> Result<Prepared, CliError> {
    let paths = cfg.data_paths()?;
    let pair = RasterPair::load(&paths.hsi, &paths.lidar, &paths.labels)?;
    let classes = cfg.data.classes.unwrap_or(pair.classes);
    if classes < pair.labels.max_label() as usize {
        return Err(CliError::Usage(format!(
            "`data.classes` = {classes} but the labels reach {}",
            pair.labels.max_label()
        )));
    }
    let prep = match prep {
        Some(p) => {
            if p.pca.bands() != pair.bands() || p.pca.dims() != cfg.model.pca_dims {
                return Err(lsaf_core::Error::Format(format!(
                    "checkpoint preprocessor maps {} bands to {}, config expects {} to {}",
                    p.pca.bands(),
                    p.pca.dims(),
                    pair.bands(),
                    cfg.model.pca_dims
                ))
                .into());
            }
            p
        }
        None => Preprocessor::fit(&pair, cfg.model.pca_dims, true)?,
    };
    let scene = prep.apply(&pair)?;
    Ok(Prepared { prep, scene, classes })
}

/// Labelled patches split into (train, test) as configured.
pub fn patch_split(cfg: &RunConfig, p: &Prepared) -> Result<(PatchSet, PatchSet), CliError> {
    let set = extract_patches(&p.scene, cfg.model.patch)?;
    Ok(split(&set, cfg.data.train_fraction, cfg.data.split_seed)?)
}

fn bundle(model: &Lsaf, prep: &Preprocessor, state: &TrainState) -> Checkpoint {
    let mut ck = Checkpoint::new();
    ck.extend_prefixed("model.", &model.state());
    ck.extend_prefixed("prep.", &prep.to_checkpoint());
    ck.extend_prefixed("train.", &state.to_checkpoint(&model.params));
    ck
}

/// Writes via a sibling temp file and a rename, so a crash never leaves a
/// truncated checkpoint.
fn write_checkpoint(ck: &Checkpoint, path: &Path) -> Result<(), CliError> {
    let tmp = path.with_extension("lsaf.tmp");
    ck.write(&tmp)?;
    fs::rename(&tmp, path).map_err(CliError::io(format!("cannot move checkpoint to {}", path.display())))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    if !path.exists() {
        return Err(CliError::Io {
            context: format!("cannot read checkpoint {}", path.display()),
            source: std::io::ErrorKind::NotFound.into(),
        });
    }
    Ok(Checkpoint::read(path)?)
}

struct Progress<'a> {
    path: PathBuf,
    prep: &'a Preprocessor,
}

impl Observer for Progress<'_> {
    fn on_epoch(&mut self, r: &EpochRecord, _: &Lsaf) -> lsaf_core::Result<()> {
        info!("epoch {:>4}  loss {:.6}  train-mode accuracy {:6.2}%", r.epoch, r.loss, r.accuracy);
        Ok(())
    }

    fn on_checkpoint(&mut self, model: &Lsaf, state: &TrainState) -> lsaf_core::Result<()> {
        write_checkpoint(&bundle(model, self.prep, state), &self.path).map_err(|e| match e {
            CliError::Core(e) => e,
            CliError::Io { source, .. } => lsaf_core::Error::Io(source),
            CliError::Usage(m) => lsaf_core::Error::Config(m),
        })
    }
}

pub struct TrainOutcome {
    pub trace: Vec<EpochRecord>,
    pub test: MetricsReport,
    pub table: String,
    pub checkpoint: PathBuf,
}

/// Trains (or resumes) and writes the checkpoint, loss trace and test metrics.
pub fn cmd_train(cfg: &RunConfig, resume: bool) -> Result<TrainOutcome, CliError> {
    cfg.validate()?;
    let paths = cfg.data_paths()?;
    for (key, p) in [("hsi", &paths.hsi), ("lidar", &paths.lidar), ("labels", &paths.labels)] {
        if !p.exists() {
            return Err(CliError::Usage(format!("config key `data.{key}`: {} does not exist", p.display())));
        }
    }
    let out = &cfg.out.dir;
    let ck_path = out.join(CHECKPOINT_FILE);
    let resumed = if resume { Some(read_checkpoint(&ck_path)?) } else { None };

    let prep = match &resumed {
        Some(ck) => Some(Preprocessor::from_checkpoint(&ck.with_prefix("prep."))?),
        None => None,
    };
    let prepared = prepare(cfg, prep)?;
    let (train_set, test_set) = patch_split(cfg, &prepared)?;
    let mut model = Lsaf::new(cfg.model_config(prepared.classes), cfg.train.seed)?;
    let mut state = TrainState::new(&model);
    if let Some(ck) = &resumed {
        model.load_state(&ck.with_prefix("model."))?;
        state = TrainState::from_checkpoint(&ck.with_prefix("train."), &model.params)?;
        info!("resuming after epoch {}", state.epochs_done());
    }
    info!(
        "{} training / {} test patches, {} classes, {} parameters",
        train_set.len(),
        test_set.len(),
        prepared.classes,
        model.params.numel()
    );

    create_dir(out)?;
    let tcfg = cfg.train_config();
    let mut progress = Progress {
        path: ck_path.clone(),
        prep: &prepared.prep,
    };
    train_from(&mut model, &train_set, &tcfg, &mut state, &mut progress)?;
    write_checkpoint(&bundle(&model, &prepared.prep, &state), &ck_path)?;
    write_loss_csv(out.join(LOSS_FILE), &state.trace)?;

    let test = evaluate(&model, &test_set, cfg.train.eval_batch)?;
    let names = class_names(prepared.classes);
    write_metrics_csv(out.join(METRICS_FILE), &test, &names)?;
    let table = render_table(&names, &[ReportColumn::from_report("LSAF", &test)]);
    Ok(TrainOutcome {
        trace: state.trace,
        test,
        table,
        checkpoint: ck_path,
    })
}

/// Builds the configured model and loads a checkpoint into it.
pub fn load_model(cfg: &RunConfig, ck: &Checkpoint) -> Result<(Lsaf, Prepared), CliError> {
    let prep = Preprocessor::from_checkpoint(&ck.with_prefix("prep."))?;
    let prepared = prepare(cfg, Some(prep))?;
    let mut model = Lsaf::new(cfg.model_config(prepared.classes), cfg.train.seed)?;
    model.load_state(&ck.with_prefix("model."))?;
    Ok((model, prepared))
}

pub struct EvalOutcome {
    pub test: MetricsReport,
    pub table: String,
}

/// Re-evaluates a checkpoint on the configured test split.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path) -> Result<EvalOutcome, CliError> {
    cfg.validate()?;
    let ck = read_checkpoint(checkpoint)?;
    let (model, prepared) = load_model(cfg, &ck)?;
    let (_, test_set) = patch_split(cfg, &prepared)?;
    let test = evaluate(&model, &test_set, cfg.train.eval_batch)?;
    let names = class_names(prepared.classes);
    create_dir(&cfg.out.dir)?;
    write_metrics_csv(cfg.out.dir.join(EVAL_METRICS_FILE), &test, &names)?;
    let table = render_table(&names, &[ReportColumn::from_report("LSAF", &test)]);
    Ok(EvalOutcome { test, table })
}

/// Per-pixel predicted classes (1-based) over the whole scene, row-major.
pub fn classify_scene(model: &Lsaf, scene: &RasterPair, batch: usize) -> Result<Vec<u16>, CliError> {
    let (h, w) = (scene.height(), scene.width());
    let s = model.config().patch;
    let rows_per_block = (batch / w).max(1);
    let blocks: Vec<(usize, usize)> = (0..h)
        .step_by(rows_per_block)
        .map(|r| (r, rows_per_block.min(h - r)))
        .collect();
    let parts: Vec<lsaf_core::Result<Vec<u16>>> = blocks
        .par_iter()
        .map(|&(r0, nr)| {
            let coords: Vec<(usize, usize)> = (r0..r0 + nr).flat_map(|r| (0..w).map(move |c| (r, c))).collect();
            let hsi = cut_patches(&scene.hsi, &coords, s)?;
            let lidar = cut_patches(&scene.lidar, &coords, s)?;
            let logits: Tensor = model.predict(&hsi, &lidar)?;
            let k = logits.shape()[1];
            Ok(logits.data().chunks(k).map(|row| argmax(row) as u16 + 1).collect())
        })
        .collect();
    let mut out = Vec::with_capacity(h * w);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

pub struct MapOutcome {
    pub path: PathBuf,
    pub width: usize,
    pub height: usize,
    /// Classes painted per pixel; 0 where left black.
    pub classes: Vec<u16>,
}

/// Renders the classification map. Pixels without a reference label are
/// black unless `all_pixels`.
pub fn cmd_map(cfg: &RunConfig, checkpoint: &Path, image: &Path, all_pixels: bool) -> Result<MapOutcome, CliError> {
    cfg.validate()?;
    let ck = read_checkpoint(checkpoint)?;
    let (model, prepared) = load_model(cfg, &ck)?;
    let scene = &prepared.scene;
    let mut classes = classify_scene(&model, scene, cfg.train.eval_batch)?;
    if !all_pixels {
        for (c, &truth) in classes.iter_mut().zip(&scene.labels.data) {
            if truth == 0 {
                *c = 0;
            }
        }
    }
    let (width, height) = (scene.width(), scene.height());
    if let Some(dir) = image.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    fs::write(image, ppm::encode(&classes, width, height))
        .map_err(CliError::io(format!("cannot write {}", image.display())))?;
    Ok(MapOutcome {
        path: image.to_path_buf(),
        width,
        height,
        classes,
    })
}
