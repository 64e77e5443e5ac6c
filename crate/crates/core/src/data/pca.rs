//! Spectral PCA over the band axis of a `bands × H × W` cube.

use nalgebra::{DMatrix, SymmetricEigen};

use super::raster::LabelMap;
use crate::error::{Error, Result};
use crate::tensor::kernels::{gemm_nn, gemm_nt, gemm_tn};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct PcaModel {
    /// Per-band mean of the fitted pixels.
    pub mean: Vec<Scalar>,
    /// `bands × r`, column-orthonormal.
    pub components: Tensor,
    /// Eigenvalues of the sample covariance, non-increasing.
    pub explained_variance: Vec<Scalar>,
}

fn pixels(hsi: &Tensor) -> Result<(usize, usize)> {
    match hsi.shape() {
        &[b, h, w] => Ok((b, h * w)),
        s => Err(Error::dim("pca", s, &[0, 0, 0])),
    }
}

/// Fits `r` principal components to the band covariance. With `mask`, only
/// pixels whose label is non-zero contribute.
pub fn pca_fit(hsi: &Tensor, r: usize, mask: Option<&LabelMap>) -> Result<PcaModel> {
    let (bands, n_pix) = pixels(hsi)?;
    if r == 0 || r > bands {
        return Err(Error::Config(format!("PCA dimension {r} must lie in 1..={bands}")));
    }
    let selected: Vec<usize> = match mask {
        Some(m) => {
            if m.data.len() != n_pix {
                return Err(Error::dim("pca mask", hsi.shape(), &[m.height, m.width]));
            }
            (0..n_pix).filter(|&p| m.data[p] != 0).collect()
        }
        None => (0..n_pix).collect(),
    };
    let n = selected.len();
    if n < 2 {
        return Err(Error::Config(format!("PCA needs at least 2 pixels, got {n}")));
    }
    let data = hsi.data();
    let mut mean = vec![0.0; bands];
    for (b, m) in mean.iter_mut().enumerate() {
        let band = &data[b * n_pix..(b + 1) * n_pix];
        *m = selected.iter().map(|&p| band[p]).sum::<Scalar>() / n as Scalar;
    }
    let mut centered = vec![0.0; bands * n];
    for b in 0..bands {
        let band = &data[b * n_pix..(b + 1) * n_pix];
        for (j, &p) in selected.iter().enumerate() {
            centered[b * n + j] = band[p] - mean[b];
        }
    }
    let mut cov = gemm_nt(&centered, &centered, bands, n, bands);
    cov.iter_mut().for_each(|v| *v /= (n - 1) as Scalar);

    let eig = SymmetricEigen::new(DMatrix::from_row_slice(bands, bands, &cov));
    let mut order: Vec<usize> = (0..bands).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut components = Tensor::zeros(&[bands, r]);
    let mut explained_variance = Vec::with_capacity(r);
    for (col, &src) in order.iter().take(r).enumerate() {
        let v = eig.eigenvectors.column(src);
        // largest-magnitude entry positive; first index wins ties
        let pivot = (0..bands).fold(0, |best, i| if v[i].abs() > v[best].abs() { i } else { best });
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        for b in 0..bands {
            components.set(&[b, col], sign * v[b]);
        }
        explained_variance.push(eig.eigenvalues[src].max(0.0));
    }
    Ok(PcaModel {
        mean,
        components,
        explained_variance,
    })
}

impl PcaModel {
    pub fn bands(&self) -> usize {
        self.mean.len()
    }

    pub fn dims(&self) -> usize {
        self.explained_variance.len()
    }

    /// Projects every pixel: `(x − mean) · components`, giving `r × H × W`.
    pub fn transform(&self, hsi: &Tensor) -> Result<Tensor> {
        let (bands, n_pix) = pixels(hsi)?;
        if bands != self.bands() {
            return Err(Error::dim("pca_transform", &[self.bands()], hsi.shape()));
        }
        let mut centered = hsi.data().to_vec();
        for (b, chunk) in centered.chunks_exact_mut(n_pix).enumerate() {
            chunk.iter_mut().for_each(|v| *v -= self.mean[b]);
        }
        let out = gemm_tn(self.components.data(), &centered, bands, self.dims(), n_pix);
        Tensor::new(vec![self.dims(), hsi.shape()[1], hsi.shape()[2]], out)
    }

    /// Maps reduced pixels back to band space.
    pub fn inverse_transform(&self, reduced: &Tensor) -> Result<Tensor> {
        let (r, n_pix) = pixels(reduced)?;
        if r != self.dims() {
            return Err(Error::dim("pca_inverse", &[self.dims()], reduced.shape()));
        }
        let mut out = gemm_nn(self.components.data(), reduced.data(), self.bands(), r, n_pix);
        for (b, chunk) in out.chunks_exact_mut(n_pix).enumerate() {
            chunk.iter_mut().for_each(|v| *v += self.mean[b]);
        }
        Tensor::new(vec![self.bands(), reduced.shape()[1], reduced.shape()[2]], out)
    }
}

/// Per-band min/max recorded for min-max scaling.
#[derive(Clone, Debug, PartialEq)]
pub struct BandRange {
    pub min: Vec<Scalar>,
    pub max: Vec<Scalar>,
}

impl BandRange {
    pub fn fit(raster: &Tensor) -> Self {
        let bands = raster.shape()[0];
        let plane = raster.numel() / bands;
        let (mut min, mut max) = (Vec::with_capacity(bands), Vec::with_capacity(bands));
        for band in raster.data().chunks_exact(plane) {
            min.push(band.iter().copied().fold(Scalar::INFINITY, Scalar::min));
            max.push(band.iter().copied().fold(Scalar::NEG_INFINITY, Scalar::max));
        }
        BandRange { min, max }
    }

    /// Scales each band to `[0, 1]`; bands with zero range map to 0.
    pub fn apply(&self, raster: &Tensor) -> Result<Tensor> {
        let bands = raster.shape()[0];
        if bands != self.min.len() {
            return Err(Error::dim("normalize", &[self.min.len()], raster.shape()));
        }
        let plane = raster.numel() / bands;
        let mut out = raster.clone();
        for (b, band) in out.data_mut().chunks_exact_mut(plane).enumerate() {
            let span = self.max[b] - self.min[b];
            for v in band {
                *v = if span > 0.0 { (*v - self.min[b]) / span } else { 0.0 };
            }
        }
        Ok(out)
    }
}

/// Per-band min-max scaling of a `bands × …` raster to `[0, 1]`.
pub fn normalize(raster: &Tensor) -> Tensor {
    BandRange::fit(raster)
        .apply(raster)
        .expect("range fitted on the same raster")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn normalize_closed_form() {
        let t = Tensor::new(vec![1, 1, 2], vec![2.0, 4.0]).unwrap();
        assert_eq!(normalize(&t).data(), &[0.0, 1.0]);
        let c = Tensor::full(&[1, 2, 2], 7.5);
        assert_eq!(normalize(&c), Tensor::zeros(&[1, 2, 2]));
        let unit = Tensor::new(vec![1, 1, 3], vec![0.0, 0.25, 1.0]).unwrap();
        assert_eq!(normalize(&unit), unit);
    }

    #[test]
    fn r_above_bands_rejected() {
        let t = Tensor::zeros(&[3, 2, 2]);
        assert!(matches!(pca_fit(&t, 4, None), Err(Error::Config(_))));
    }

    #[test]
    fn decorrelated_data_gives_axis_permutation() {
        // three bands with distinct variances, sampled independently
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let scales = [1.0, 3.0, 2.0];
        let n = 4000;
        let hsi = Tensor::from_fn(&[3, 1, n], |i| scales[i / n] * (rng.random::<Scalar>() - 0.5));
        let pca = pca_fit(&hsi, 3, None).unwrap();
        let expected_axis = [1, 2, 0];
        for (col, &axis) in expected_axis.iter().enumerate() {
            for b in 0..3 {
                let v = pca.components.at(&[b, col]);
                let want = if b == axis { 1.0 } else { 0.0 };
                assert!((v - want).abs() < 0.1, "component {col} band {b}: {v}");
            }
        }
    }

    #[test]
    fn mean_pixel_maps_to_zero() {
        let hsi = Tensor::from_fn(&[4, 3, 3], |i| ((i * 7) % 11) as Scalar);
        let pca = pca_fit(&hsi, 2, None).unwrap();
        let mean_px = Tensor::new(vec![4, 1, 1], pca.mean.clone()).unwrap();
        let z = pca.transform(&mean_px).unwrap();
        assert!(z.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn band_mismatch_rejected() {
        let hsi = Tensor::from_fn(&[4, 3, 3], |i| (i as Scalar).sin());
        let pca = pca_fit(&hsi, 2, None).unwrap();
        assert!(matches!(
            pca.transform(&Tensor::zeros(&[3, 3, 3])),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn masked_fit_ignores_unlabeled_pixels() {
        let hsi = Tensor::new(vec![1, 1, 4], vec![0.0, 2.0, 100.0, -50.0]).unwrap();
        let mask = LabelMap::new(1, 4, vec![1, 1, 0, 0]).unwrap();
        let pca = pca_fit(&hsi, 1, Some(&mask)).unwrap();
        assert_eq!(pca.mean, vec![1.0]);
        assert!((pca.explained_variance[0] - 2.0).abs() < 1e-12);
    }
}
