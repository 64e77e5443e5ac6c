//! Per-operation gradient checks, convolution against a direct loop, and
//! algebraic properties of the tensor primitives.

use lsaf_core::tensor::kernels::{conv2d, conv3d};
use lsaf_core::tensor::{finite_diff_check_many, ConvSpec, Graph, Mode, Var};
use lsaf_core::{Result, Scalar, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// central differences at h = 1e-5 resolve about 1e-10 absolute
const TOL: Scalar = 1e-5;
const H: Scalar = 1e-5;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// A fixed random projection of `y` to a scalar, so every output element
/// carries a distinct upstream gradient.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = random(g.shape(y), &mut rng);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn check(name: &str, inputs: &[Tensor], seed: u64, f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) {
    let checks = finite_diff_check_many(|g, v| {
        let y = f(g, v)?;
        project(g, y, seed)
    }, inputs, H)
    .unwrap();
    for (i, c) in checks.iter().enumerate() {
        assert!(c.max_rel_error < TOL, "{name} seed {seed} input {i}: {:?}", c);
    }
}

#[test]
fn elementwise_and_linear_ops() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&[2, 3, 4], &mut rng);
        let b = random(&[2, 3, 4], &mut rng);
        let row = random(&[1, 3, 1], &mut rng);
        check("add", &[a.clone(), b.clone()], seed, |g, v| g.add(v[0], v[1]));
        check("mul", &[a.clone(), b.clone()], seed, |g, v| g.mul(v[0], v[1]));
        check("mul broadcast", &[a.clone(), row], seed, |g, v| g.mul(v[0], v[1]));
        check("scale", &[a.clone()], seed, |g, v| Ok(g.scale(v[0], -1.7)));
        check("sigmoid", &[a.clone()], seed, |g, v| Ok(g.sigmoid(v[0])));
        // keep relu inputs away from the kink
        let shifted = a.map(|x| if x.abs() < 0.05 { x + 0.1 } else { x });
        check("relu", &[shifted], seed, |g, v| Ok(g.relu(v[0])));

        let m = random(&[3, 4], &mut rng);
        let k = random(&[4, 5], &mut rng);
        check("matmul", &[m.clone(), k], seed, |g, v| g.matmul(v[0], v[1]));
        let w = random(&[5, 4], &mut rng);
        let bias = random(&[5], &mut rng);
        check("linear", &[a.clone(), w, bias], seed, |g, v| g.linear(v[0], v[1], Some(v[2])));
    }
}

#[test]
fn shape_ops() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&[2, 3, 4], &mut rng);
        let b = random(&[2, 2, 4], &mut rng);
        check("transpose", &[a.clone()], seed, |g, v| g.transpose(v[0], &[2, 0, 1]));
        check("reshape", &[a.clone()], seed, |g, v| g.reshape(v[0], &[6, 4]));
        check("concat", &[a.clone(), b], seed, |g, v| g.concat(&[v[0], v[1]], 1));
        check("narrow", &[a.clone()], seed, |g, v| g.narrow(v[0], 2, 1, 2));
        check("mean", &[a.clone()], seed, |g, v| g.mean(v[0], 2));
        check("softmax", &[a.clone()], seed, |g, v| g.softmax(v[0], 1));
    }
}

#[test]
fn convolutions_and_normalization() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x2 = random(&[2, 2, 5, 5], &mut rng);
        let w2 = random(&[3, 2, 3, 3], &mut rng);
        check("conv2d", &[x2.clone(), w2.clone()], seed, |g, v| g.conv2d(v[0], v[1], ConvSpec::new(1, 0)));
        check("conv2d padded", &[x2.clone(), w2.clone()], seed, |g, v| g.conv2d(v[0], v[1], ConvSpec::new(1, 1)));
        check("conv2d strided", &[x2.clone(), w2], seed, |g, v| g.conv2d(v[0], v[1], ConvSpec::new(2, 1)));

        let x3 = random(&[2, 1, 5, 4, 4], &mut rng);
        let w3 = random(&[2, 1, 3, 3, 3], &mut rng);
        check("conv3d", &[x3, w3], seed, |g, v| g.conv3d(v[0], v[1], ConvSpec::new(1, 0)));

        let gamma = random(&[2], &mut rng);
        let beta = random(&[2], &mut rng);
        check("batch_norm train", &[x2.clone(), gamma.clone(), beta.clone()], seed, |g, v| {
            Ok(g.batch_norm(v[0], v[1], v[2], 1e-5, Mode::Train, None)?.0)
        });
        let (rm, rv) = ([0.1, -0.2], [0.5, 1.5]);
        check("batch_norm eval", &[x2.clone(), gamma, beta], seed, |g, v| {
            Ok(g.batch_norm(v[0], v[1], v[2], 1e-5, Mode::Eval, Some((&rm, &rv)))?.0)
        });

        let logits = random(&[4, 5], &mut rng);
        let targets: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
        let c = finite_diff_check_many(|g, v| g.cross_entropy(v[0], &targets), &[logits], H).unwrap();
        assert!(c[0].max_rel_error < TOL, "cross_entropy seed {seed}: {:?}", c[0]);
    }
}

/// Direct six-deep loop over output and kernel coordinates.
fn naive_conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (&[cin, h, wd], &[cout, _, kh, kw]) = (x.shape(), w.shape()) else { unreachable!() };
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[cout, oh, ow]);
    for o in 0..cout {
        for i in 0..oh {
            for j in 0..ow {
                let mut s = 0.0;
                for c in 0..cin {
                    for a in 0..kh {
                        for b in 0..kw {
                            let (r, q) = ((i * stride + a) as isize - pad as isize, (j * stride + b) as isize - pad as isize);
                            if r >= 0 && q >= 0 && (r as usize) < h && (q as usize) < wd {
                                s += x.at(&[c, r as usize, q as usize]) * w.at(&[o, c, a, b]);
                            }
                        }
                    }
                }
                out.set(&[o, i, j], s);
            }
        }
    }
    out
}

fn naive_conv3d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (&[cin, d, h, wd], &[cout, _, kd, kh, kw]) = (x.shape(), w.shape()) else { unreachable!() };
    let out_len = |n: usize, k: usize| (n + 2 * pad - k) / stride + 1;
    let (od, oh, ow) = (out_len(d, kd), out_len(h, kh), out_len(wd, kw));
    let mut out = Tensor::zeros(&[cout, od, oh, ow]);
    let inside = |v: isize, n: usize| v >= 0 && (v as usize) < n;
    for o in 0..cout {
        for z in 0..od {
            for i in 0..oh {
                for j in 0..ow {
                    let mut s = 0.0;
                    for c in 0..cin {
                        for e in 0..kd {
                            for a in 0..kh {
                                for b in 0..kw {
                                    let zz = (z * stride + e) as isize - pad as isize;
                                    let r = (i * stride + a) as isize - pad as isize;
                                    let q = (j * stride + b) as isize - pad as isize;
                                    if inside(zz, d) && inside(r, h) && inside(q, wd) {
                                        s += x.at(&[c, zz as usize, r as usize, q as usize]) * w.at(&[o, c, e, a, b]);
                                    }
                                }
                            }
                        }
                    }
                    out.set(&[o, z, i, j], s);
                }
            }
        }
    }
    out
}

#[test]
fn conv_matches_direct_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for &(stride, pad, size) in &[(1, 0, 7), (1, 1, 6), (2, 0, 7), (2, 1, 7), (3, 2, 8), (1, 2, 5)] {
        let x = random(&[3, size, size + 1], &mut rng);
        let w = random(&[4, 3, 3, 2], &mut rng);
        let Ok(fast) = conv2d(&x, &w, stride, pad) else {
            continue; // non-integral output geometry is rejected by design
        };
        let slow = naive_conv2d(&x, &w, stride, pad);
        assert_eq!(fast.shape(), slow.shape());
        assert!(fast.max_abs_diff(&slow) < 1e-12, "stride {stride} pad {pad}");
    }
    for &(stride, pad) in &[(1, 0), (1, 1), (2, 1)] {
        let x = random(&[2, 7, 5, 5], &mut rng);
        let w = random(&[3, 2, 3, 3, 3], &mut rng);
        let fast = conv3d(&x, &w, stride, pad).unwrap();
        let slow = naive_conv3d(&x, &w, stride, pad);
        assert!(fast.max_abs_diff(&slow) < 1e-12, "3d stride {stride} pad {pad}");
    }
}

#[test]
fn batched_conv_equals_per_sample_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // more samples than one parallel chunk
    let x = random(&[19, 2, 6, 6], &mut rng);
    let w = random(&[3, 2, 3, 3], &mut rng);
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
    let y = g.conv2d(xv, wv, ConvSpec::new(1, 1)).unwrap();
    for i in 0..19 {
        let xi = x.narrow(0, i, 1).unwrap().reshape(&[2, 6, 6]).unwrap();
        let yi = g.value(y).narrow(0, i, 1).unwrap().reshape(&[3, 6, 6]).unwrap();
        assert_eq!(yi, conv2d(&xi, &w, 1, 1).unwrap());
    }
}

fn tensor_strategy(max_rank: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(1usize..5, 1..=max_rank).prop_flat_map(|shape| {
        let n: usize = shape.iter().product();
        prop::collection::vec(-50.0..50.0f64, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
    })
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(t in tensor_strategy(4), axis_seed in 0usize..4) {
        let axis = axis_seed % t.rank();
        let mut g = Graph::new();
        let v = g.constant(t.clone());
        let s = g.softmax(v, axis).unwrap();
        let sums = g.mean(s, axis).unwrap();
        let n = t.shape()[axis] as Scalar;
        for &m in g.value(sums).data() {
            prop_assert!((m * n - 1.0).abs() < 1e-12);
        }
        prop_assert!(g.value(s).data().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn transpose_then_inverse_is_identity(t in tensor_strategy(4), rot in 0usize..4) {
        let r = t.rank();
        let perm: Vec<usize> = (0..r).map(|i| (i + rot) % r).collect();
        let mut inv = vec![0; r];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let back = t.transpose(&perm).unwrap().transpose(&inv).unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn concat_then_narrow_recovers_parts(a in tensor_strategy(3), extra in 1usize..4) {
        let axis = a.rank() - 1;
        let mut shape = a.shape().to_vec();
        shape[axis] = extra;
        let b = Tensor::from_fn(&shape, |i| i as Scalar);
        let cat = Tensor::concat(&[&a, &b], axis).unwrap();
        let len = a.shape()[axis];
        prop_assert_eq!(cat.narrow(axis, 0, len).unwrap(), a);
        prop_assert_eq!(cat.narrow(axis, len, extra).unwrap(), b);
    }
}
