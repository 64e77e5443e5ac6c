//! Raw numeric kernels over contiguous slices.
//!
//! Every reduction here runs in a fixed order that does not depend on the
//! number of worker threads, so results are bit-reproducible.

use rayon::prelude::*;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Column block of `b` packed at once.
const NB: usize = 256;
/// Depth block; a packed `KB × NB` panel of `b` stays cache-resident.
const KB: usize = 256;
/// Register tile: `MR` rows by `NR` columns of `c`.
const MR: usize = 4;
const NR: usize = 8;

/// Packs rows `i0..i0+MR` (zero-padded) of `A[:, kb..kb+kn]` as `kn × MR`.
#[inline(always)]
fn pack_a(a: &[Scalar], rs: usize, cs: usize, m: usize, i0: usize, (kb, kn): (usize, usize), out: &mut Vec<Scalar>) {
    out.clear();
    for kk in kb..kb + kn {
        for r in 0..MR {
            out.push(if i0 + r < m { a[(i0 + r) * rs + kk * cs] } else { 0.0 });
        }
    }
}

/// Packs `b[kb..kb+kn, jb..jb+jn]` as consecutive zero-padded `kn × NR` panels.
#[inline(always)]
fn pack_b(b: &[Scalar], n: usize, (jb, jn): (usize, usize), (kb, kn): (usize, usize), out: &mut Vec<Scalar>) {
    out.clear();
    for j0 in (jb..jb + jn).step_by(NR) {
        let nr = NR.min(jb + jn - j0);
        for kk in kb..kb + kn {
            let row = &b[kk * n + j0..kk * n + j0 + nr];
            out.extend_from_slice(row);
            out.extend(std::iter::repeat_n(0.0, NR - nr));
        }
    }
}

#[inline(always)]
fn micro_acc(ap: &[Scalar], bp: &[Scalar], acc: &mut [[Scalar; NR]; MR]) {
    for (av, bv) in ap.chunks_exact(MR).zip(bp.chunks_exact(NR)) {
        let av: &[Scalar; MR] = av.try_into().unwrap();
        let bv: &[Scalar; NR] = bv.try_into().unwrap();
        for r in 0..MR {
            for t in 0..NR {
                acc[r][t] += av[r] * bv[t];
            }
        }
    }
}

/// `c[tile] += ap · bp` for one tile of at most `MR × NR`, accumulating in
/// packed (increasing depth) order.
#[inline(always)]
fn micro(ap: &[Scalar], bp: &[Scalar], c: &mut [Scalar], n: usize, (i0, mr): (usize, usize), (j0, nr): (usize, usize)) {
    let mut acc = [[0.0 as Scalar; NR]; MR];
    if mr == MR && nr == NR {
        for (r, row) in acc.iter_mut().enumerate() {
            *row = c[(i0 + r) * n + j0..][..NR].try_into().unwrap();
        }
        micro_acc(ap, bp, &mut acc);
        for (r, row) in acc.iter().enumerate() {
            c[(i0 + r) * n + j0..][..NR].copy_from_slice(row);
        }
    } else {
        for r in 0..mr {
            acc[r][..nr].copy_from_slice(&c[(i0 + r) * n + j0..][..nr]);
        }
        micro_acc(ap, bp, &mut acc);
        for r in 0..mr {
            c[(i0 + r) * n + j0..][..nr].copy_from_slice(&acc[r][..nr]);
        }
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn gemm_body(a: &[Scalar], rs: usize, cs: usize, b: &[Scalar], c: &mut [Scalar], m: usize, k: usize, n: usize) {
    let mut ap = Vec::with_capacity(KB * MR);
    let mut bp = Vec::with_capacity(KB * (NB + NR));
    for kb in (0..k).step_by(KB) {
        let kn = KB.min(k - kb);
        for jb in (0..n).step_by(NB) {
            let jn = NB.min(n - jb);
            pack_b(b, n, (jb, jn), (kb, kn), &mut bp);
            for i0 in (0..m).step_by(MR) {
                let mr = MR.min(m - i0);
                pack_a(a, rs, cs, m, i0, (kb, kn), &mut ap);
                for (p, panel) in bp.chunks_exact(kn * NR).enumerate() {
                    let j0 = jb + p * NR;
                    micro(&ap, panel, c, n, (i0, mr), (j0, NR.min(n - j0)));
                }
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
#[allow(clippy::too_many_arguments)]
fn gemm_body_avx2(a: &[Scalar], rs: usize, cs: usize, b: &[Scalar], c: &mut [Scalar], m: usize, k: usize, n: usize) {
    gemm_body(a, rs, cs, b, c, m, k, n)
}

/// `c[m×n] = A · b` where `A[i][kk] = a[i·rs + kk·cs]`. Blocked and
/// register-tiled, yet every output still accumulates over `kk` in
/// increasing order starting from zero with separate multiply and add, so
/// results match the naive triple loop bit for bit on every code path.
fn gemm_strided(a: &[Scalar], rs: usize, cs: usize, b: &[Scalar], m: usize, k: usize, n: usize) -> Vec<Scalar> {
    let mut c = vec![0.0; m * n];
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked just above.
        unsafe { gemm_body_avx2(a, rs, cs, b, &mut c, m, k, n) };
        return c;
    }
    gemm_body(a, rs, cs, b, &mut c, m, k, n);
    c
}

/// `c[m×n] = a[m×k] · b[k×n]`, accumulating each output over `k` in order.
pub fn gemm_nn(a: &[Scalar], b: &[Scalar], m: usize, k: usize, n: usize) -> Vec<Scalar> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    gemm_strided(a, k, 1, b, m, k, n)
}

/// `c[m×n] = aᵀ · b` with `a` stored as `k×m` and `b` as `k×n`.
pub fn gemm_tn(a: &[Scalar], b: &[Scalar], k: usize, m: usize, n: usize) -> Vec<Scalar> {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    gemm_strided(a, 1, m, b, m, k, n)
}

/// `c[m×n] = a · bᵀ` with `a` stored as `m×k` and `b` as `n×k`.
pub fn gemm_nt(a: &[Scalar], b: &[Scalar], m: usize, k: usize, n: usize) -> Vec<Scalar> {
    let bt = transpose2(b, n, k);
    gemm_nn(a, &bt, m, k, n)
}

/// Transpose of a `rows×cols` matrix.
pub fn transpose2(a: &[Scalar], rows: usize, cols: usize) -> Vec<Scalar> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Plain matrix product of two rank-2 tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    };
    if k != k2 {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    Tensor::new(vec![m, n], gemm_nn(a.data(), b.data(), m, k, n))
}

/// Geometry of a convolution over up to three spatial axes. Two-dimensional
/// convolutions use a depth axis of extent 1 with a depth-1 kernel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub output: [usize; 3],
}

/// Samples per im2col block. Fixed so the weight-gradient reduction order is
/// independent of the thread count.
const CONV_CHUNK: usize = 8;

impl ConvGeometry {
    pub fn new(
        batch: usize,
        in_channels: usize,
        out_channels: usize,
        input: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Self> {
        let mut output = [0; 3];
        for ax in 0..3 {
            output[ax] = conv_output_len(input[ax], kernel[ax], stride[ax], padding[ax])?;
        }
        Ok(ConvGeometry {
            batch,
            in_channels,
            out_channels,
            input,
            kernel,
            stride,
            padding,
            output,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel.iter().product::<usize>()
    }

    pub fn in_plane(&self) -> usize {
        self.input.iter().product()
    }

    pub fn out_plane(&self) -> usize {
        self.output.iter().product()
    }

    /// Output positions `lo..hi` along the innermost axis whose input index
    /// `xo·stride + kx − pad` is in range, for stride 1.
    fn x_span(&self, kx: usize) -> (usize, usize) {
        let pad = self.padding[2];
        let lo = pad.saturating_sub(kx).min(self.output[2]);
        let hi = (self.input[2] + pad).saturating_sub(kx).clamp(lo, self.output[2]);
        (lo, hi)
    }

    /// Input row `(zi, yi)` hit by kernel offsets `(kz, ky)` at output `(z, y)`.
    fn source_row(&self, z: usize, y: usize, kz: usize, ky: usize) -> Option<usize> {
        let zi = (z * self.stride[0] + kz).checked_sub(self.padding[0])?;
        let yi = (y * self.stride[1] + ky).checked_sub(self.padding[1])?;
        (zi < self.input[0] && yi < self.input[1]).then_some(zi * self.input[1] + yi)
    }

    /// im2col for samples `first..first + count`: a `patch_len × (count·out_plane)` matrix.
    fn im2col(&self, x: &[Scalar], first: usize, count: usize) -> Vec<Scalar> {
        let [kd, kh, kw] = self.kernel;
        let [od, oh, ow] = self.output;
        let iw = self.input[2];
        let mut col = Vec::with_capacity(self.patch_len() * count * self.out_plane());
        for row in 0..self.patch_len() {
            let kx = row % kw;
            let ky = (row / kw) % kh;
            let kz = (row / (kw * kh)) % kd;
            let ci = row / (kw * kh * kd);
            let (lo, hi) = self.x_span(kx);
            for s in 0..count {
                let plane = &x[((first + s) * self.in_channels + ci) * self.in_plane()..][..self.in_plane()];
                for z in 0..od {
                    for y in 0..oh {
                        let Some(r) = self.source_row(z, y, kz, ky) else {
                            col.extend(std::iter::repeat_n(0.0, ow));
                            continue;
                        };
                        let line = &plane[r * iw..(r + 1) * iw];
                        if self.stride[2] == 1 {
                            let off = kx as isize - self.padding[2] as isize;
                            col.extend(std::iter::repeat_n(0.0, lo));
                            col.extend_from_slice(&line[(lo as isize + off) as usize..(hi as isize + off) as usize]);
                            col.extend(std::iter::repeat_n(0.0, ow - hi));
                        } else {
                            col.extend((0..ow).map(|xo| {
                                (xo * self.stride[2] + kx)
                                    .checked_sub(self.padding[2])
                                    .and_then(|xi| line.get(xi).copied())
                                    .unwrap_or(0.0)
                            }));
                        }
                    }
                }
            }
        }
        col
    }

    /// Scatter-adds a column matrix back into input layout for samples `first..first + count`.
    fn col2im(&self, col: &[Scalar], count: usize, dx: &mut [Scalar]) {
        let p = self.out_plane();
        let cols = count * p;
        let [kd, kh, kw] = self.kernel;
        let [od, oh, ow] = self.output;
        let iw = self.input[2];
        let kvol = kd * kh * kw;
        for s in 0..count {
            for ci in 0..self.in_channels {
                let plane = &mut dx[(s * self.in_channels + ci) * self.in_plane()..][..self.in_plane()];
                for kr in 0..kvol {
                    let row = ci * kvol + kr;
                    let kx = kr % kw;
                    let ky = (kr / kw) % kh;
                    let kz = kr / (kw * kh);
                    let (lo, hi) = self.x_span(kx);
                    let src = &col[row * cols + s * p..row * cols + (s + 1) * p];
                    for z in 0..od {
                        for y in 0..oh {
                            let Some(r) = self.source_row(z, y, kz, ky) else {
                                continue;
                            };
                            let line = &mut plane[r * iw..(r + 1) * iw];
                            let src = &src[(z * oh + y) * ow..(z * oh + y + 1) * ow];
                            if self.stride[2] == 1 {
                                let off = kx as isize - self.padding[2] as isize;
                                let dst = &mut line[(lo as isize + off) as usize..(hi as isize + off) as usize];
                                dst.iter_mut().zip(&src[lo..hi]).for_each(|(d, v)| *d += v);
                            } else {
                                for (xo, v) in src.iter().enumerate() {
                                    if let Some(xi) = (xo * self.stride[2] + kx).checked_sub(self.padding[2]) {
                                        if xi < iw {
                                            line[xi] += v;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Forward convolution; `x` is `batch × in_channels × input`, `w` is
    /// `out_channels × patch_len`. Output is `batch × out_channels × output`.
    pub fn forward(&self, x: &[Scalar], w: &[Scalar]) -> Vec<Scalar> {
        let p = self.out_plane();
        let co = self.out_channels;
        let k = self.patch_len();
        let mut y = vec![0.0; self.batch * co * p];
        y.par_chunks_mut(CONV_CHUNK * co * p)
            .enumerate()
            .for_each(|(chunk, y_chunk)| {
                let first = chunk * CONV_CHUNK;
                let count = y_chunk.len() / (co * p);
                let col = self.im2col(x, first, count);
                let out = gemm_nn(w, &col, co, k, count * p);
                // out is co × (count·p); reorder to count × co × p
                for c in 0..co {
                    for s in 0..count {
                        y_chunk[(s * co + c) * p..(s * co + c + 1) * p]
                            .copy_from_slice(&out[c * count * p + s * p..c * count * p + (s + 1) * p]);
                    }
                }
            });
        y
    }

    /// Gradients with respect to the input (when `need_dx`) and the weights.
    pub fn backward(
        &self,
        x: &[Scalar],
        w: &[Scalar],
        dy: &[Scalar],
        need_dx: bool,
    ) -> (Option<Vec<Scalar>>, Vec<Scalar>) {
        let p = self.out_plane();
        let co = self.out_channels;
        let k = self.patch_len();
        let in_len = self.in_channels * self.in_plane();
        let chunks = self.batch.div_ceil(CONV_CHUNK);
        let partials: Vec<(Vec<Scalar>, Option<Vec<Scalar>>)> = (0..chunks)
            .into_par_iter()
            .map(|chunk| {
                let first = chunk * CONV_CHUNK;
                let count = CONV_CHUNK.min(self.batch - first);
                let cols = count * p;
                let col = self.im2col(x, first, count);
                let mut dyr = vec![0.0; co * cols];
                for c in 0..co {
                    for s in 0..count {
                        dyr[c * cols + s * p..c * cols + (s + 1) * p]
                            .copy_from_slice(&dy[((first + s) * co + c) * p..((first + s) * co + c + 1) * p]);
                    }
                }
                let dw = gemm_nt(&dyr, &col, co, cols, k);
                let dx = need_dx.then(|| {
                    let dcol = gemm_tn(w, &dyr, co, k, cols);
                    let mut dx = vec![0.0; count * in_len];
                    self.col2im(&dcol, count, &mut dx);
                    dx
                });
                (dw, dx)
            })
            .collect();
        let mut dw = vec![0.0; co * k];
        let mut dx = need_dx.then(|| Vec::with_capacity(self.batch * in_len));
        for (pw, px) in partials {
            dw.iter_mut().zip(&pw).for_each(|(a, b)| *a += b);
            if let (Some(dx), Some(px)) = (dx.as_mut(), px) {
                dx.extend_from_slice(&px);
            }
        }
        (dx, dw)
    }
}

pub fn conv_output_len(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 || kernel == 0 {
        return Err(Error::Config("convolution stride and kernel must be positive".into()));
    }
    let padded = input + 2 * padding;
    if kernel > padded {
        return Err(Error::Config(format!(
            "kernel extent {kernel} exceeds padded input extent {padded}"
        )));
    }
    if (padded - kernel) % stride != 0 {
        return Err(Error::Config(format!(
            "non-integral convolution output: ({input} + 2*{padding} - {kernel}) / {stride}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Single-sample 2-D cross-correlation: `input` is `cin×h×w`, `kernels`
/// `cout×cin×kh×kw`.
pub fn conv2d(input: &Tensor, kernels: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (&[cin, h, w], &[cout, kc, kh, kw]) = (input.shape(), kernels.shape()) else {
        return Err(Error::dim("conv2d", input.shape(), kernels.shape()));
    };
    if cin != kc {
        return Err(Error::dim("conv2d", input.shape(), kernels.shape()));
    }
    let g = ConvGeometry::new(
        1,
        cin,
        cout,
        [1, h, w],
        [1, kh, kw],
        [1, stride, stride],
        [0, padding, padding],
    )?;
    let y = g.forward(input.data(), kernels.data());
    Tensor::new(vec![cout, g.output[1], g.output[2]], y)
}

/// Single-sample 3-D cross-correlation: `input` is `cin×d×h×w`, `kernels`
/// `cout×cin×kd×kh×kw`.
pub fn conv3d(input: &Tensor, kernels: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (&[cin, d, h, w], &[cout, kc, kd, kh, kw]) = (input.shape(), kernels.shape()) else {
        return Err(Error::dim("conv3d", input.shape(), kernels.shape()));
    };
    if cin != kc {
        return Err(Error::dim("conv3d", input.shape(), kernels.shape()));
    }
    let g = ConvGeometry::new(1, cin, cout, [d, h, w], [kd, kh, kw], [stride; 3], [padding; 3])?;
    let y = g.forward(input.data(), kernels.data());
    Tensor::new(vec![cout, g.output[0], g.output[1], g.output[2]], y)
}
