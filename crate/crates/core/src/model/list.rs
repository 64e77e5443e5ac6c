//! Linear self-attention (LiST) over paired HSI/LiDAR feature maps.
//!
//! All features are batched `n × channels × positions`. The module combines a
//! cross-modal channel gate on the per-modality features with a
//! squeeze-and-excitation gate on the concatenated features, then weights
//! spatial positions with a per-channel softmax.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

/// A fully connected layer, `y = x · Wᵀ + b` with `W` stored `out × in`.
#[derive(Clone, Copy, Debug)]
pub struct Fc {
    pub weight: Var,
    pub bias: Var,
}

impl Fc {
    /// Applies the layer to the last axis.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.linear(x, self.weight, Some(self.bias))
    }

    /// Applies the layer across the channel axis of an `n × c × hw` tensor.
    pub fn forward_channels(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let t = g.transpose(x, &[0, 2, 1])?;
        let y = self.forward(g, t)?;
        g.transpose(y, &[0, 2, 1])
    }
}

/// Feature transforms producing `X̂_h`, `X̂_l` and `X_hl`.
#[derive(Clone, Copy, Debug)]
pub struct PreTransform {
    pub hsi: Fc,
    pub lidar: Fc,
    pub joint: Fc,
}

/// Weights of the shared cross-modal channel gate.
#[derive(Clone, Copy, Debug)]
pub struct ChannelAttention {
    pub inner_hsi: Fc,
    pub inner_lidar: Fc,
    /// Shared by both modality outputs.
    pub outer: Fc,
}

/// Squeeze-and-excitation weights: `2c → 2c/ρ → 2c`.
#[derive(Clone, Copy, Debug)]
pub struct SeBlock {
    pub squeeze: Fc,
    pub excite: Fc,
}

#[derive(Clone, Copy, Debug)]
pub struct ListWeights {
    pub pre: PreTransform,
    pub channel: ChannelAttention,
    pub se: SeBlock,
}

/// Intermediate tensors of one LiST pass.
#[derive(Clone, Copy, Debug)]
pub struct ListOutput {
    pub hsi_hat: Var,
    pub lidar_hat: Var,
    pub joint: Var,
    /// `n × hw × c` gate shared by both modalities.
    pub gate: Var,
    pub hsi_gated: Var,
    pub lidar_gated: Var,
    pub fused_channels: Var,
    pub joint_se: Var,
    /// Final `n × 2c × hw` fused feature.
    pub fused: Var,
}

fn check_pair(g: &Graph, a: Var, b: Var, op: &'static str) -> Result<()> {
    if g.shape(a).len() != 3 || g.shape(a) != g.shape(b) {
        return Err(Error::dim(op, g.shape(a), g.shape(b)));
    }
    Ok(())
}

/// Per-modality channel transforms, plus the transform of the channel-axis
/// concatenation of the raw features.
pub fn pre_transform(g: &mut Graph, w: &PreTransform, x_h: Var, x_l: Var) -> Result<(Var, Var, Var)> {
    check_pair(g, x_h, x_l, "pre_transform")?;
    let hsi_hat = w.hsi.forward_channels(g, x_h)?;
    let lidar_hat = w.lidar.forward_channels(g, x_l)?;
    let cat = g.concat(&[x_h, x_l], 1)?;
    let joint = w.joint.forward_channels(g, cat)?;
    Ok((hsi_hat, lidar_hat, joint))
}

/// `gate = σ(FC_out(FC_h(X̂_hᵀ) + FC_l(X̂_lᵀ)))`; returns
/// `(gate ⊙ X̂_hᵀ, gate ⊙ X̂_lᵀ, gate)`, each `n × hw × c`.
pub fn channel_attention(g: &mut Graph, w: &ChannelAttention, hsi_hat: Var, lidar_hat: Var) -> Result<(Var, Var, Var)> {
    check_pair(g, hsi_hat, lidar_hat, "channel_attention")?;
    let th = g.transpose(hsi_hat, &[0, 2, 1])?;
    let tl = g.transpose(lidar_hat, &[0, 2, 1])?;
    let ih = w.inner_hsi.forward(g, th)?;
    let il = w.inner_lidar.forward(g, tl)?;
    let mixed = g.add(ih, il)?;
    let pre_gate = w.outer.forward(g, mixed)?;
    let gate = g.sigmoid(pre_gate);
    let hsi_gated = g.mul(gate, th)?;
    let lidar_gated = g.mul(gate, tl)?;
    Ok((hsi_gated, lidar_gated, gate))
}

/// Concatenates two `n × hw × c` maps on the channel axis and transposes to `n × 2c × hw`.
pub fn concat_transpose(g: &mut Graph, hsi_gated: Var, lidar_gated: Var) -> Result<Var> {
    check_pair(g, hsi_gated, lidar_gated, "concat_transpose")?;
    let cat = g.concat(&[hsi_gated, lidar_gated], 2)?;
    g.transpose(cat, &[0, 2, 1])
}

/// Squeeze (mean over positions), excite `σ(FC₂(ReLU(FC₁(·))))`, rescale channels.
pub fn se_block(g: &mut Graph, w: &SeBlock, joint: Var) -> Result<Var> {
    let shape = g.shape(joint).to_vec();
    let &[n, c2, _] = shape.as_slice() else {
        return Err(Error::dim("se_block", &shape, &[0, 0, 0]));
    };
    let squeezed = g.mean(joint, 2)?;
    let hidden = w.squeeze.forward(g, squeezed)?;
    let hidden = g.relu(hidden);
    let excite = w.excite.forward(g, hidden)?;
    let excite = g.sigmoid(excite);
    let excite = g.reshape(excite, &[n, c2, 1])?;
    g.mul(joint, excite)
}

/// `X'_hl ⊙ softmax(X'_fus)` with the softmax over positions of each channel.
pub fn spatial_attention(g: &mut Graph, joint_se: Var, fused_channels: Var) -> Result<Var> {
    check_pair(g, joint_se, fused_channels, "spatial_attention")?;
    let weights = g.softmax(fused_channels, 2)?;
    g.mul(joint_se, weights)
}

/// The full module from extractor features to the fused feature.
pub fn list_forward(g: &mut Graph, w: &ListWeights, x_h: Var, x_l: Var) -> Result<ListOutput> {
    let (hsi_hat, lidar_hat, joint) = pre_transform(g, &w.pre, x_h, x_l)?;
    let (hsi_gated, lidar_gated, gate) = channel_attention(g, &w.channel, hsi_hat, lidar_hat)?;
    let fused_channels = concat_transpose(g, hsi_gated, lidar_gated)?;
    let joint_se = se_block(g, &w.se, joint)?;
    let fused = spatial_attention(g, joint_se, fused_channels)?;
    Ok(ListOutput {
        hsi_hat,
        lidar_hat,
        joint,
        gate,
        hsi_gated,
        lidar_gated,
        fused_channels,
        joint_se,
        fused,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Scalar, Tensor};

    fn fc(g: &mut Graph, out: usize, inp: usize, f: impl Fn(usize) -> Scalar) -> Fc {
        Fc {
            weight: g.param(Tensor::from_fn(&[out, inp], &f)),
            bias: g.param(Tensor::zeros(&[out])),
        }
    }

    fn identity_fc(g: &mut Graph, c: usize) -> Fc {
        fc(g, c, c, |i| if i % (c + 1) == 0 { 1.0 } else { 0.0 })
    }

    #[test]
    fn identity_pre_transform_passes_features() {
        let mut g = Graph::new();
        let xh = g.constant(Tensor::from_fn(&[1, 2, 3], |i| i as Scalar));
        let xl = g.constant(Tensor::from_fn(&[1, 2, 3], |i| -(i as Scalar)));
        let w = PreTransform {
            hsi: identity_fc(&mut g, 2),
            lidar: identity_fc(&mut g, 2),
            joint: identity_fc(&mut g, 4),
        };
        let (h, l, j) = pre_transform(&mut g, &w, xh, xl).unwrap();
        assert_eq!(g.value(h), g.value(xh));
        assert_eq!(g.value(l), g.value(xl));
        assert_eq!(g.shape(j), &[1, 4, 3]);
    }

    #[test]
    fn zero_weights_give_half_gate() {
        let mut g = Graph::new();
        let xh = g.constant(Tensor::from_fn(&[1, 3, 4], |i| i as Scalar * 0.3 - 1.0));
        let xl = g.constant(Tensor::from_fn(&[1, 3, 4], |i| (i as Scalar).cos()));
        let w = ChannelAttention {
            inner_hsi: fc(&mut g, 3, 3, |_| 0.0),
            inner_lidar: fc(&mut g, 3, 3, |_| 0.0),
            outer: fc(&mut g, 3, 3, |_| 0.0),
        };
        let (h, _, gate) = channel_attention(&mut g, &w, xh, xl).unwrap();
        assert!(g.value(gate).data().iter().all(|&v| v == 0.5));
        let expect = g.value(xh).transpose(&[0, 2, 1]).unwrap().map(|v| 0.5 * v);
        assert_eq!(g.value(h), &expect);
    }

    #[test]
    fn symmetric_inputs_give_equal_outputs() {
        let mut g = Graph::new();
        let x = Tensor::from_fn(&[2, 3, 4], |i| (i as Scalar * 0.7).sin());
        let xh = g.constant(x.clone());
        let xl = g.constant(x);
        let inner = fc(&mut g, 3, 3, |i| i as Scalar * 0.1 - 0.4);
        let w = ChannelAttention {
            inner_hsi: inner,
            inner_lidar: inner,
            outer: fc(&mut g, 3, 3, |i| 0.2 - i as Scalar * 0.05),
        };
        let (h, l, _) = channel_attention(&mut g, &w, xh, xl).unwrap();
        assert_eq!(g.value(h), g.value(l));
    }

    #[test]
    fn concat_transpose_slices_recover_inputs() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_fn(&[1, 5, 2], |i| i as Scalar));
        let b = g.constant(Tensor::from_fn(&[1, 5, 2], |i| 100.0 + i as Scalar));
        let f = concat_transpose(&mut g, a, b).unwrap();
        assert_eq!(g.shape(f), &[1, 4, 5]);
        let top = g.value(f).narrow(1, 0, 2).unwrap();
        assert_eq!(top, g.value(a).transpose(&[0, 2, 1]).unwrap());
    }

    #[test]
    fn concat_transpose_c1_hw2() {
        // X'_h = [[1],[2]], X'_l = [[3],[4]] (hw×c) → [[1,2],[3,4]]
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(vec![1, 2, 1], vec![1.0, 2.0]).unwrap());
        let b = g.constant(Tensor::new(vec![1, 2, 1], vec![3.0, 4.0]).unwrap());
        let f = concat_transpose(&mut g, a, b).unwrap();
        assert_eq!(g.value(f).data(), &[1.0, 2.0, 3.0, 4.0]);
        let z = g.constant(Tensor::zeros(&[1, 2, 1]));
        let f = concat_transpose(&mut g, z, z).unwrap();
        assert!(g.value(f).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_se_weights_halve_input() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[1, 4, 3], |i| i as Scalar - 5.0));
        let w = SeBlock {
            squeeze: fc(&mut g, 1, 4, |_| 0.0),
            excite: fc(&mut g, 4, 1, |_| 0.0),
        };
        let y = se_block(&mut g, &w, x).unwrap();
        assert_eq!(g.value(y), &g.value(x).map(|v| 0.5 * v));
    }

    #[test]
    fn constant_channels_give_uniform_spatial_weights() {
        let mut g = Graph::new();
        let joint = g.constant(Tensor::from_fn(&[1, 2, 4], |i| i as Scalar + 1.0));
        let fused = g.constant(Tensor::new(vec![1, 2, 4], vec![3.0; 4].into_iter().chain(vec![-1.0; 4]).collect()).unwrap());
        let y = spatial_attention(&mut g, joint, fused).unwrap();
        let expect = g.value(joint).map(|v| v / 4.0);
        assert!(g.value(y).max_abs_diff(&expect) < 1e-15);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[1, 2, 3]));
        let b = g.constant(Tensor::zeros(&[1, 3, 3]));
        assert!(concat_transpose(&mut g, a, b).is_err());
        assert!(spatial_attention(&mut g, a, b).is_err());
    }
}
