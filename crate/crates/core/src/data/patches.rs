use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::raster::RasterPair;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_PATCH: usize = 11;

/// Labeled patches cut at identical coordinates from both modalities.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    /// `n × r × s × s`.
    pub hsi: Tensor,
    /// `n × 1 × s × s`.
    pub lidar: Tensor,
    /// Class labels in `1..=K`.
    pub labels: Vec<u16>,
    /// `(row, col)` of each patch center.
    pub coords: Vec<(usize, usize)>,
    pub size: usize,
}

/// Reflects an index into `0..len` without repeating the edge sample.
fn reflect(i: isize, len: usize) -> usize {
    let last = len as isize - 1;
    let r = if i < 0 {
        -i
    } else if i > last {
        2 * last - i
    } else {
        i
    };
    r as usize
}

fn check_size(s: usize, h: usize, w: usize) -> Result<()> {
    if s % 2 == 0 {
        return Err(Error::Config(format!("patch size {s} must be odd")));
    }
    if s > 2 * h.min(w) {
        return Err(Error::Config(format!(
            "patch size {s} exceeds twice the smaller scene side ({}x{})",
            h, w
        )));
    }
    Ok(())
}

/// Cuts `s × s` windows centered on `coords` from a `bands × H × W` raster,
/// mirror-padding at the borders. Output is `coords.len() × bands × s × s`.
pub fn cut_patches(raster: &Tensor, coords: &[(usize, usize)], s: usize) -> Result<Tensor> {
    let &[bands, h, w] = raster.shape() else {
        return Err(Error::dim("extract_patches", raster.shape(), &[0, 0, 0]));
    };
    check_size(s, h, w)?;
    if coords.is_empty() {
        return Err(Error::Config("no patch centers given".into()));
    }
    let half = (s / 2) as isize;
    let src = raster.data();
    let mut out = Vec::with_capacity(coords.len() * bands * s * s);
    for &(row, col) in coords {
        for b in 0..bands {
            let plane = &src[b * h * w..(b + 1) * h * w];
            for dy in -half..=half {
                let y = reflect(row as isize + dy, h);
                for dx in -half..=half {
                    let x = reflect(col as isize + dx, w);
                    out.push(plane[y * w + x]);
                }
            }
        }
    }
    Tensor::new(vec![coords.len(), bands, s, s], out)
}

/// One patch per labeled pixel, in row-major pixel order.
pub fn extract_patches(pair: &RasterPair, s: usize) -> Result<PatchSet> {
    let coords: Vec<(usize, usize)> = (0..pair.height())
        .flat_map(|r| (0..pair.width()).map(move |c| (r, c)))
        .filter(|&(r, c)| pair.labels.get(r, c) != 0)
        .collect();
    if coords.is_empty() {
        return Err(Error::Config("scene has no labeled pixels".into()));
    }
    let labels = coords.iter().map(|&(r, c)| pair.labels.get(r, c)).collect();
    Ok(PatchSet {
        hsi: cut_patches(&pair.hsi, &coords, s)?,
        lidar: cut_patches(&pair.lidar, &coords, s)?,
        labels,
        coords,
        size: s,
    })
}

fn gather(t: &Tensor, idx: &[usize]) -> Tensor {
    let per = t.numel() / t.shape()[0];
    let mut data: Vec<Scalar> = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(shape, data).expect("gathered shape consistent")
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> PatchSet {
        PatchSet {
            hsi: gather(&self.hsi, idx),
            lidar: gather(&self.lidar, idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            coords: idx.iter().map(|&i| self.coords[i]).collect(),
            size: self.size,
        }
    }

    /// Batch tensors plus zero-based class targets for the selected samples.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Tensor, Vec<usize>) {
        (
            gather(&self.hsi, idx),
            gather(&self.lidar, idx),
            idx.iter().map(|&i| self.labels[i] as usize - 1).collect(),
        )
    }
}

/// Stratified split of sample indices: in each class a seeded shuffle sends
/// `round(fraction·n)` samples (clamped to `1..n`) to training.
pub fn split_indices(labels: &[u16], fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("split fraction {fraction} must lie in (0, 1)")));
    }
    let max = labels.iter().copied().max().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for class in 1..=max {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        if members.len() < 2 {
            return Err(Error::Stratification {
                class,
                count: members.len(),
            });
        }
        members.shuffle(&mut rng);
        let n = members.len();
        let k = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
        train.extend_from_slice(&members[..k]);
        test.extend_from_slice(&members[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

pub fn split(set: &PatchSet, fraction: f64, seed: u64) -> Result<(PatchSet, PatchSet)> {
    let (train, test) = split_indices(&set.labels, fraction, seed)?;
    Ok((set.subset(&train), set.subset(&test)))
}
