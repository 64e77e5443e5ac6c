//! Synthetic co-registered scenes for desk-scale experiments.
//!
//! Classes occupy jittered-grid Voronoi cells. Every class has a Gaussian
//! spectral bump and a mean elevation, except that designated class pairs
//! share one of the two: *spectral twins* share a signature and differ only
//! in elevation, *elevation twins* share an elevation and differ only
//! spectrally. A single modality therefore cannot resolve every class.
//!
//! The two members of a twin pair share their Voronoi cells and are mixed in
//! a random block mosaic inside them, so the spatial context of a patch says
//! nothing about which twin sits at its center.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::raster::{LabelMap, RasterPair};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub seed: u64,
    /// Per-band reflectance noise σ.
    pub noise: Scalar,
    /// Per-pixel elevation noise σ, meters.
    pub elevation_noise: Scalar,
    /// Pairs of each twin kind; capped so pairs never overlap.
    pub twin_pairs: usize,
    /// Voronoi sites per class.
    pub sites_per_class: usize,
    /// Side, in pixels, of the mosaic blocks that split a twin pair's cells.
    pub mosaic_block: usize,
}

impl SynthConfig {
    pub fn new(classes: usize, height: usize, width: usize, bands: usize, seed: u64) -> Self {
        SynthConfig {
            classes,
            height,
            width,
            bands,
            seed,
            noise: 0.02,
            elevation_noise: 0.5,
            twin_pairs: 2,
            sites_per_class: 2,
            mosaic_block: 1,
        }
    }
}

/// A generated scene with its ground-truth class parameters.
#[derive(Clone, Debug)]
pub struct SynthScene {
    pub pair: RasterPair,
    /// Noise-free spectrum of each class (index = label − 1).
    pub signatures: Vec<Vec<Scalar>>,
    /// Mean elevation of each class, meters.
    pub elevations: Vec<Scalar>,
    /// Labels that share a spectrum (LiDAR separates them).
    pub spectral_twins: Vec<(u16, u16)>,
    /// Labels that share an elevation (HSI separates them).
    pub elevation_twins: Vec<(u16, u16)>,
}

/// Generates a scene with default noise levels.
pub fn synth_generate(classes: usize, height: usize, width: usize, bands: usize, seed: u64) -> Result<RasterPair> {
    Ok(generate(&SynthConfig::new(classes, height, width, bands, seed))?.pair)
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthScene> {
    let k = cfg.classes;
    if k < 2 {
        return Err(Error::Config(format!("synthetic scene needs at least 2 classes, got {k}")));
    }
    if cfg.height == 0 || cfg.width == 0 || cfg.bands == 0 {
        return Err(Error::Config("synthetic scene dimensions must be positive".into()));
    }
    if k > u16::MAX as usize {
        return Err(Error::Config(format!("{k} classes exceed the u16 label range")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // classes 0..2p are spectral twins (0,1),(2,3)..; the next 2p are elevation twins
    let pairs = cfg.twin_pairs.min(k / 4);
    let spectral_twins: Vec<(u16, u16)> = (0..pairs).map(|i| (2 * i as u16 + 1, 2 * i as u16 + 2)).collect();
    let elevation_twins: Vec<(u16, u16)> = (0..pairs)
        .map(|i| ((2 * (pairs + i)) as u16 + 1, (2 * (pairs + i)) as u16 + 2))
        .collect();
    let spectral_group: Vec<usize> = (0..k).map(|c| if c < 2 * pairs { c / 2 } else { c - pairs }).collect();
    let elevation_group: Vec<usize> = (0..k)
        .map(|c| {
            if (2 * pairs..4 * pairs).contains(&c) {
                2 * pairs + (c - 2 * pairs) / 2
            } else if c >= 4 * pairs {
                c - pairs
            } else {
                c
            }
        })
        .collect();
    let n_spectral = k - pairs;
    let n_elevation = k - pairs;

    let width = cfg.bands as Scalar / (2.0 * n_spectral as Scalar);
    let group_signature = |g: usize| -> Vec<Scalar> {
        let center = (g as Scalar + 0.5) / n_spectral as Scalar * cfg.bands as Scalar;
        (0..cfg.bands)
            .map(|b| {
                let d = (b as Scalar - center) / width.max(0.5);
                0.2 + 0.6 * (-0.5 * d * d).exp()
            })
            .collect()
    };
    let signatures: Vec<Vec<Scalar>> = spectral_group.iter().map(|&g| group_signature(g)).collect();

    let mut levels: Vec<usize> = (0..n_elevation).collect();
    levels.shuffle(&mut rng);
    let elevations: Vec<Scalar> = elevation_group
        .iter()
        .map(|&g| 2.0 + 3.0 * levels[g] as Scalar)
        .collect();

    // jittered-grid Voronoi sites, each class owning sites_per_class of them
    let n_sites = k * cfg.sites_per_class.max(1);
    let gx = (n_sites as f64 * cfg.width as f64 / cfg.height as f64).sqrt().ceil().max(1.0) as usize;
    let gy = n_sites.div_ceil(gx);
    let mut cells: Vec<usize> = (0..gx * gy).collect();
    cells.shuffle(&mut rng);
    let (cw, ch) = (cfg.width as f64 / gx as f64, cfg.height as f64 / gy as f64);
    // twins occupy one shared region: pairs are the consecutive classes below 4p
    let region_of = |c: usize| if c < 4 * pairs { c / 2 } else { c - 2 * pairs };
    let mut owners: Vec<usize> = (0..n_sites).map(|i| region_of(i % k)).collect();
    owners.shuffle(&mut rng);
    let sites: Vec<(f64, f64, usize)> = cells[..n_sites]
        .iter()
        .zip(&owners)
        .map(|(&cell, &region)| {
            let (cx, cy) = ((cell % gx) as f64, (cell / gx) as f64);
            let x = (cx + 0.2 + 0.6 * rng.random::<f64>()) * cw;
            let y = (cy + 0.2 + 0.6 * rng.random::<f64>()) * ch;
            (y, x, region)
        })
        .collect();

    let (h, w) = (cfg.height, cfg.width);
    let block = cfg.mosaic_block.max(1);
    let (bw, bh) = (w.div_ceil(block), h.div_ceil(block));
    let mosaic: Vec<usize> = (0..bw * bh).map(|_| rng.random_range(0..2)).collect();
    let mut class_map = vec![0usize; h * w];
    let mut labels = vec![0u16; h * w];
    for r in 0..h {
        for c in 0..w {
            let (py, px) = (r as f64 + 0.5, c as f64 + 0.5);
            let mut best = (f64::INFINITY, 0usize);
            let mut second = f64::INFINITY;
            for &(sy, sx, region) in &sites {
                let d = ((py - sy).powi(2) + (px - sx).powi(2)).sqrt();
                if d < best.0 {
                    second = if region != best.1 { best.0 } else { second };
                    best = (d, region);
                } else if d < second && region != best.1 {
                    second = d;
                }
            }
            let class = if best.1 < 2 * pairs {
                2 * best.1 + mosaic[(r / block) * bw + c / block]
            } else {
                best.1 + 2 * pairs
            };
            class_map[r * w + c] = class;
            // pixels straddling a boundary between different regions stay unlabeled
            if second - best.0 >= 0.5 {
                labels[r * w + c] = class as u16 + 1;
            }
        }
    }

    let spectral_noise = Normal::new(0.0, cfg.noise.max(0.0) as f64).expect("finite σ");
    let elev_noise = Normal::new(0.0, cfg.elevation_noise.max(0.0) as f64).expect("finite σ");
    let mut hsi = vec![0.0; cfg.bands * h * w];
    let mut lidar = vec![0.0; h * w];
    for p in 0..h * w {
        let class = class_map[p];
        for b in 0..cfg.bands {
            hsi[b * h * w + p] = signatures[class][b] + spectral_noise.sample(&mut rng) as Scalar;
        }
        lidar[p] = elevations[class] + elev_noise.sample(&mut rng) as Scalar;
    }

    let pair = RasterPair::new(
        Tensor::new(vec![cfg.bands, h, w], hsi)?,
        Tensor::new(vec![1, h, w], lidar)?,
        LabelMap::new(h, w, labels)?,
        Some(k),
    )?;
    Ok(SynthScene {
        pair,
        signatures,
        elevations,
        spectral_twins,
        elevation_twins,
    })
}
