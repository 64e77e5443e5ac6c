//! Raster ingestion, spectral reduction, patch extraction and splitting.

mod patches;
mod pca;
pub mod raster;
pub mod synth;

pub use patches::{cut_patches, extract_patches, split, split_indices, PatchSet, DEFAULT_PATCH};
pub use pca::{normalize, pca_fit, BandRange, PcaModel};
pub use raster::{DType, LabelMap, RasterFile, RasterHeader, RasterPair};
pub use synth::{generate, synth_generate, SynthConfig, SynthScene};

use crate::error::{Error, Result};
use crate::model::Checkpoint;
use crate::tensor::Tensor;

/// Default PCA output dimension (144 Houston bands reduced to 30).
pub const DEFAULT_PCA_DIMS: usize = 30;

/// Fitted spectral reduction and scaling applied to a scene before patching.
#[derive(Clone, Debug, PartialEq)]
pub struct Preprocessor {
    pub pca: PcaModel,
    pub hsi_range: BandRange,
    pub lidar_range: BandRange,
}

impl Preprocessor {
    /// PCA to `dims` components (fit on labeled pixels only when `masked`),
    /// then per-band min-max scaling of both modalities.
    pub fn fit(pair: &RasterPair, dims: usize, masked: bool) -> Result<Self> {
        let pca = pca_fit(&pair.hsi, dims, masked.then_some(&pair.labels))?;
        let reduced = pca.transform(&pair.hsi)?;
        Ok(Preprocessor {
            hsi_range: BandRange::fit(&reduced),
            lidar_range: BandRange::fit(&pair.lidar),
            pca,
        })
    }

    /// The scene with HSI reduced to `dims` bands and both modalities scaled.
    pub fn apply(&self, pair: &RasterPair) -> Result<RasterPair> {
        let hsi = self.hsi_range.apply(&self.pca.transform(&pair.hsi)?)?;
        let lidar = self.lidar_range.apply(&pair.lidar)?;
        RasterPair::new(hsi, lidar, pair.labels.clone(), Some(pair.classes))
    }

    /// Entries `pca.mean`, `pca.components`, `pca.variance`, `hsi.min`,
    /// `hsi.max`, `lidar.min` and `lidar.max`.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let vector = |v: &[crate::tensor::Scalar]| Tensor::new(vec![v.len()], v.to_vec()).expect("non-empty");
        let mut ck = Checkpoint::new();
        ck.insert("pca.mean", vector(&self.pca.mean));
        ck.insert("pca.components", self.pca.components.clone());
        ck.insert("pca.variance", vector(&self.pca.explained_variance));
        ck.insert("hsi.min", vector(&self.hsi_range.min));
        ck.insert("hsi.max", vector(&self.hsi_range.max));
        ck.insert("lidar.min", vector(&self.lidar_range.min));
        ck.insert("lidar.max", vector(&self.lidar_range.max));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let vector = |name: &str| -> Result<Vec<crate::tensor::Scalar>> {
            let t = ck.require(name)?;
            if t.rank() != 1 {
                return Err(Error::Format(format!("`{name}` must be a vector, has shape {:?}", t.shape())));
            }
            Ok(t.data().to_vec())
        };
        let mean = vector("pca.mean")?;
        let explained_variance = vector("pca.variance")?;
        let components = ck.require("pca.components")?.clone();
        if components.shape() != [mean.len(), explained_variance.len()] {
            return Err(Error::Format(format!(
                "`pca.components` has shape {:?}, expected [{}, {}]",
                components.shape(),
                mean.len(),
                explained_variance.len()
            )));
        }
        let range = |prefix: &str, bands: Option<usize>| -> Result<BandRange> {
            let (min, max) = (vector(&format!("{prefix}.min"))?, vector(&format!("{prefix}.max"))?);
            if min.len() != max.len() || bands.is_some_and(|b| b != min.len()) {
                return Err(Error::Format(format!("`{prefix}` range lengths disagree")));
            }
            Ok(BandRange { min, max })
        };
        Ok(Preprocessor {
            hsi_range: range("hsi", Some(explained_variance.len()))?,
            lidar_range: range("lidar", Some(1))?,
            pca: PcaModel {
                mean,
                components,
                explained_variance,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preprocessor_checkpoint_roundtrip() {
        let pair = synth_generate(3, 10, 10, 6, 0).unwrap();
        let prep = Preprocessor::fit(&pair, 4, true).unwrap();
        let ck = prep.to_checkpoint();
        assert_eq!(Preprocessor::from_checkpoint(&ck).unwrap(), prep);
        let back = Checkpoint::decode(&ck.encode().unwrap()).unwrap();
        assert_eq!(Preprocessor::from_checkpoint(&back).unwrap(), prep);

        let mut broken = ck.clone();
        broken.insert("hsi.min", Tensor::zeros(&[3]));
        assert!(Preprocessor::from_checkpoint(&broken).is_err());
    }
}
