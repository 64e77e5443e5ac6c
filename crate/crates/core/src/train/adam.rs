use crate::error::{Error, Result};
use crate::model::{Checkpoint, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: Scalar,
    pub beta1: Scalar,
    pub beta2: Scalar,
    pub eps: Scalar,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.tensors().map(|t| Tensor::zeros(t.shape())).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// One bias-corrected Adam update. `grads[i]` belongs to the i-th
    /// parameter of `params`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<&Tensor>], cfg: &AdamConfig) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Contract(format!(
                "{} gradients and {} moment slots for {} parameters",
                grads.len(),
                self.m.len(),
                params.len()
            )));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            match g {
                None => return Err(Error::Contract(format!("missing gradient for `{name}`"))),
                Some(g) if g.shape() != p.shape() => {
                    return Err(Error::dim("adam_step", g.shape(), p.shape()));
                }
                Some(_) => {}
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (((_, p), g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let g = g.expect("checked above").data();
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    /// Moments as `m.<name>` / `v.<name>` plus `step`.
    pub fn to_checkpoint(&self, params: &ParamStore) -> Checkpoint {
        let mut ck = Checkpoint::new();
        for ((name, _), (m, v)) in params.iter().zip(self.m.iter().zip(&self.v)) {
            ck.insert(format!("m.{name}"), m.clone());
            ck.insert(format!("v.{name}"), v.clone());
        }
        ck.insert("step", Tensor::scalar(self.step as Scalar));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, params: &ParamStore) -> Result<Self> {
        let mut state = AdamState::new(params);
        for (i, (name, p)) in params.iter().enumerate() {
            for (slot, key) in [(&mut state.m[i], format!("m.{name}")), (&mut state.v[i], format!("v.{name}"))] {
                let t = ck.require(&key)?;
                if t.shape() != p.shape() {
                    return Err(Error::Format(format!(
                        "optimizer tensor `{key}` has shape {:?}, parameter has {:?}",
                        t.shape(),
                        p.shape()
                    )));
                }
                *slot = t.clone();
            }
        }
        let step = ck.require("step")?.data()[0];
        if !(step >= 0.0 && step.fract() == 0.0) {
            return Err(Error::Format(format!("optimizer step {step} is not a count")));
        }
        state.step = step as u64;
        Ok(state)
    }
}
