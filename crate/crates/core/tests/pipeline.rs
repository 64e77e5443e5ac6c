//! Data pipeline and model wiring checked against hand-derived oracles.

use lsaf_core::data::{
    extract_patches, generate, pca_fit, split_indices, DType, LabelMap, RasterFile, RasterHeader, RasterPair,
    SynthConfig,
};
use lsaf_core::model::{Checkpoint, Lsaf, ModelConfig};
use lsaf_core::tensor::{Graph, Mode};
use lsaf_core::{Scalar, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[test]
fn pca_two_band_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let n = 400;
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for _ in 0..n {
        let t: f64 = normal.sample(&mut rng);
        let e: f64 = normal.sample(&mut rng);
        x.push(3.0 + t + 0.1 * e);
        y.push(-1.0 + 2.0 * t - 0.05 * e);
    }
    let hsi = Tensor::new(vec![2, 20, 20], [x.clone(), y.clone()].concat()).unwrap();
    let pca = pca_fit(&hsi, 2, None).unwrap();

    let mean = |v: &[f64]| v.iter().sum::<f64>() / n as f64;
    let (mx, my) = (mean(&x), mean(&y));
    let cov = |a: &[f64], ma: f64, b: &[f64], mb: f64| {
        a.iter().zip(b).map(|(p, q)| (p - ma) * (q - mb)).sum::<f64>() / (n - 1) as f64
    };
    let (a, b, c) = (cov(&x, mx, &x, mx), cov(&x, mx, &y, my), cov(&y, my, &y, my));
    let root = (((a - c) / 2.0).powi(2) + b * b).sqrt();
    let (l1, l2) = ((a + c) / 2.0 + root, (a + c) / 2.0 - root);
    assert!((pca.explained_variance[0] - l1).abs() < 1e-10);
    assert!((pca.explained_variance[1] - l2).abs() < 1e-10);
    assert!((pca.mean[0] - mx).abs() < 1e-12 && (pca.mean[1] - my).abs() < 1e-12);

    // eigenvector of [[a,b],[b,c]] for l1 is (b, l1 − a), normalized
    let norm = (b * b + (l1 - a).powi(2)).sqrt();
    let (v0, v1) = (b / norm, (l1 - a) / norm);
    let sign = if v0.abs() >= v1.abs() { v0.signum() } else { v1.signum() };
    assert!((pca.components.at(&[0, 0]) - sign * v0).abs() < 1e-10);
    assert!((pca.components.at(&[1, 0]) - sign * v1).abs() < 1e-10);
    // largest-magnitude entry is positive
    assert!(pca.components.at(&[1, 0]) > 0.0);
}

#[test]
fn pca_inverse_is_exact_at_full_rank() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let hsi = Tensor::from_fn(&[5, 6, 7], |_| rng.random_range(0.0..1.0));
    let pca = pca_fit(&hsi, 5, None).unwrap();
    let back = pca.inverse_transform(&pca.transform(&hsi).unwrap()).unwrap();
    assert!(back.max_abs_diff(&hsi) < 1e-12);
}

/// Nearest-centroid classification with the generator's own class
/// parameters, using the named modalities.
fn centroid_accuracy(cfg: &SynthConfig, use_hsi: bool, use_lidar: bool) -> f64 {
    let scene = generate(cfg).unwrap();
    let pair = &scene.pair;
    let (h, w) = (pair.height(), pair.width());
    let plane = h * w;
    let (mut hit, mut total) = (0usize, 0usize);
    for p in 0..plane {
        let truth = pair.labels.data[p];
        if truth == 0 {
            continue;
        }
        let mut best = (Scalar::INFINITY, 0usize);
        for k in 0..cfg.classes {
            let mut d = 0.0;
            if use_hsi {
                d += (0..cfg.bands)
                    .map(|b| (pair.hsi.data()[b * plane + p] - scene.signatures[k][b]).powi(2) / cfg.noise.powi(2))
                    .sum::<Scalar>();
            }
            if use_lidar {
                d += (pair.lidar.data()[p] - scene.elevations[k]).powi(2) / cfg.elevation_noise.powi(2);
            }
            if d < best.0 {
                best = (d, k);
            }
        }
        total += 1;
        hit += (best.1 + 1 == truth as usize) as usize;
    }
    100.0 * hit as f64 / total as f64
}

#[test]
fn synthetic_scene_needs_both_modalities() {
    let cfg = SynthConfig::new(15, 48, 48, 48, 4);
    let both = centroid_accuracy(&cfg, true, true);
    let hsi = centroid_accuracy(&cfg, true, false);
    let lidar = centroid_accuracy(&cfg, false, true);
    assert!(both > 99.5, "joint nearest centroid {both}");
    // each modality confuses its twin pairs: roughly half their pixels
    assert!(hsi < 95.0, "hsi-only nearest centroid {hsi}");
    assert!(lidar < 95.0, "lidar-only nearest centroid {lidar}");
}

#[test]
fn patches_and_splits_are_consistent() {
    let pair = lsaf_core::data::synth_generate(5, 20, 20, 6, 9).unwrap();
    let set = extract_patches(&pair, 9).unwrap();
    assert_eq!(set.len(), pair.labels.labeled_count());
    for (i, &(r, c)) in set.coords.iter().enumerate() {
        assert_eq!(set.labels[i], pair.labels.get(r, c));
        // the patch center is the pixel itself
        assert_eq!(set.lidar.at(&[i, 0, 4, 4]), pair.lidar.at(&[0, r, c]));
        assert_eq!(set.hsi.at(&[i, 5, 4, 4]), pair.hsi.at(&[5, r, c]));
    }
    let (train, test) = split_indices(&set.labels, 0.3, 1).unwrap();
    let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..set.len()).collect::<Vec<_>>());
    assert_eq!(split_indices(&set.labels, 0.3, 1).unwrap().0, train);
}

#[test]
fn init_variance_matches_kaiming_uniform() {
    let model = Lsaf::new(ModelConfig::default(), 3).unwrap();
    let mut checked = 0;
    for (name, t) in model.params.iter() {
        if !name.ends_with(".weight") || t.numel() < 500 {
            continue;
        }
        let fan_in = t.numel() / t.shape()[0];
        let expected = 2.0 / fan_in as Scalar;
        let mean = t.sum() / t.numel() as Scalar;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<Scalar>() / t.numel() as Scalar;
        assert!((var / expected - 1.0).abs() < 0.2, "{name}: {var} vs {expected}");
        checked += 1;
    }
    assert!(checked >= 10);
}

#[test]
fn fusion_weights_receive_gradient() {
    let cfg = ModelConfig {
        classes: 4,
        pca_dims: 16,
        patch: 9,
        ..ModelConfig::default()
    };
    let model = Lsaf::new(cfg, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let hsi = Tensor::from_fn(&[3, 16, 9, 9], |_| rng.random_range(0.0..1.0));
    let lidar = Tensor::from_fn(&[3, 1, 9, 9], |_| rng.random_range(0.0..1.0));
    let mut g = Graph::new();
    let vars = model.params.bind(&mut g);
    let (h, l) = (g.constant(hsi), g.constant(lidar));
    let out = model.forward(&mut g, &vars, h, l, Mode::Train).unwrap();
    let loss = g.cross_entropy(out.logits, &[0, 1, 3]).unwrap();
    g.backward(loss).unwrap();
    for name in ["head.lambda1", "head.lambda2"] {
        let grad = g.grad(vars[model.params.index_of(name).unwrap()]).unwrap();
        assert!(grad.item().abs() > 1e-8, "{name} gradient {}", grad.item());
    }
}

fn raster_strategy() -> impl Strategy<Value = RasterFile> {
    (1usize..4, 1usize..6, 1usize..6, 0u8..3).prop_flat_map(|(b, h, w, tag)| {
        let n = b * h * w;
        prop::collection::vec(any::<u64>(), n).prop_map(move |bits| {
            let header = RasterHeader {
                bands: b as u32,
                height: h as u32,
                width: w as u32,
                dtype: DType::from_tag(tag + 1).unwrap(),
            };
            let data = match header.dtype {
                DType::F32 => lsaf_core::data::raster::RasterData::F32(bits.iter().map(|&x| f32::from_bits(x as u32)).collect()),
                DType::U16 => lsaf_core::data::raster::RasterData::U16(bits.iter().map(|&x| x as u16).collect()),
                _ => lsaf_core::data::raster::RasterData::F64(bits.iter().map(|&x| f64::from_bits(x)).collect()),
            };
            RasterFile { header, data }
        })
    })
}

proptest! {
    #[test]
    fn raster_encoding_roundtrips_bytes(file in raster_strategy()) {
        let bytes = file.encode();
        let decoded = RasterFile::decode(&bytes).unwrap();
        prop_assert_eq!(decoded.encode(), bytes);
    }

    #[test]
    fn raster_decode_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..64), tag in 0u8..20) {
        let _ = RasterFile::decode(&bytes);
        let mut framed = RasterHeader { bands: 1, height: 2, width: 2, dtype: DType::U16 }.encode().to_vec();
        framed[20] = tag;
        framed.extend_from_slice(&bytes);
        let _ = RasterFile::decode(&framed);
    }

    #[test]
    fn checkpoint_decode_never_panics(seed in any::<u64>(), flips in prop::collection::vec((any::<usize>(), any::<u8>()), 1..6)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ck = Checkpoint::new();
        ck.insert("a", Tensor::from_fn(&[2, 3], |_| rng.random()));
        ck.insert("b.c", Tensor::from_fn(&[4], |_| rng.random()));
        let mut bytes = ck.encode().unwrap();
        prop_assert_eq!(Checkpoint::decode(&bytes).unwrap().encode().unwrap(), bytes.clone());
        for (at, v) in flips {
            let i = at % bytes.len();
            bytes[i] ^= v;
        }
        let _ = Checkpoint::decode(&bytes);
        let _ = Checkpoint::decode(&bytes[..bytes.len() / 2]);
    }

    #[test]
    fn label_rasters_roundtrip(h in 1usize..8, w in 1usize..8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels = LabelMap::new(h, w, (0..h * w).map(|_| rng.random_range(0..4)).collect()).unwrap();
        let back = RasterFile::decode(&RasterFile::from_labels(&labels).unwrap().encode()).unwrap().to_labels().unwrap();
        prop_assert_eq!(back, labels);
    }
}

#[test]
fn raster_pair_files_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let pair = lsaf_core::data::synth_generate(4, 10, 12, 5, 0).unwrap();
    let p = |f: &str| dir.path().join(f);
    pair.save(p("h"), p("l"), p("y")).unwrap();
    let back = RasterPair::load(p("h"), p("l"), p("y")).unwrap();
    // scenes are stored as f32, so a second save is byte-exact
    back.save(p("h2"), p("l2"), p("y2")).unwrap();
    for (a, b) in [("h", "h2"), ("l", "l2"), ("y", "y2")] {
        assert_eq!(std::fs::read(p(a)).unwrap(), std::fs::read(p(b)).unwrap());
    }
    assert_eq!(back.labels, pair.labels);
    assert!(back.hsi.max_abs_diff(&pair.hsi) < 1e-6);
    assert!(back.lidar.max_abs_diff(&pair.lidar) < 1e-5);
}
