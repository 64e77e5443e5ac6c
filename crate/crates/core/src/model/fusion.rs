//! Self-adaptive decision fusion: three classifier heads combined as
//! `Y = λ₁·Y_h + λ₂·Y_l + Y_fus` with learned scalars λ₁, λ₂.

use super::list::Fc;
use crate::error::Result;
use crate::tensor::{Graph, Var};

/// flatten → FC → ReLU → FC → K logits.
#[derive(Clone, Copy, Debug)]
pub struct LinearBlock {
    pub hidden: Fc,
    pub out: Fc,
}

impl LinearBlock {
    pub fn forward(&self, g: &mut Graph, features: Var) -> Result<Var> {
        let n = g.shape(features)[0];
        let flat = g.value(features).numel() / n;
        let x = g.reshape(features, &[n, flat])?;
        let h = self.hidden.forward(g, x)?;
        let h = g.relu(h);
        self.out.forward(g, h)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FusionHead {
    pub hsi: LinearBlock,
    pub lidar: LinearBlock,
    pub fused: LinearBlock,
    /// `[1]` weight on the HSI logits.
    pub lambda1: Var,
    /// `[1]` weight on the LiDAR logits.
    pub lambda2: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct FusionOutput {
    pub logits: Var,
    pub y_h: Var,
    pub y_l: Var,
    pub y_fus: Var,
}

/// Weighted sum of the three branch logits.
pub fn combine(g: &mut Graph, lambda1: Var, lambda2: Var, y_h: Var, y_l: Var, y_fus: Var) -> Result<Var> {
    let a = g.mul(y_h, lambda1)?;
    let b = g.mul(y_l, lambda2)?;
    let ab = g.add(a, b)?;
    g.add(ab, y_fus)
}

pub fn decision_fusion(g: &mut Graph, head: &FusionHead, x_h: Var, x_l: Var, x_fus: Var) -> Result<FusionOutput> {
    let y_h = head.hsi.forward(g, x_h)?;
    let y_l = head.lidar.forward(g, x_l)?;
    let y_fus = head.fused.forward(g, x_fus)?;
    let logits = combine(g, head.lambda1, head.lambda2, y_h, y_l, y_fus)?;
    Ok(FusionOutput {
        logits,
        y_h,
        y_l,
        y_fus,
    })
}
