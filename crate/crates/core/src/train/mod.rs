//! Mini-batch Adam training with softmax cross-entropy, and evaluation.

mod adam;
mod metrics;
pub mod report;

pub use adam::{AdamConfig, AdamState};
pub use metrics::MetricsReport;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::PatchSet;
use crate::error::{Error, Result};
use crate::model::{Checkpoint, Lsaf, ParamStore};
use crate::tensor::{Graph, Mode, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: Scalar,
    pub epochs: usize,
    pub batch: usize,
    pub beta1: Scalar,
    pub beta2: Scalar,
    pub eps: Scalar,
    pub seed: u64,
    /// Calls [`Observer::on_checkpoint`] every this many epochs; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            lr: adam.lr,
            epochs: 110,
            batch: 128,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // lr = 0 freezes the parameters and is allowed.
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be a finite non-negative number, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config(format!("betas must lie in [0, 1), got ({}, {})", self.beta1, self.beta2)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// Mean training loss and train-mode accuracy (percent) of one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub loss: Scalar,
    pub accuracy: f64,
}

/// Optimizer state and the epochs completed so far; enough to resume.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub adam: AdamState,
    pub trace: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(model: &Lsaf) -> Self {
        TrainState {
            adam: AdamState::new(&model.params),
            trace: Vec::new(),
        }
    }

    pub fn epochs_done(&self) -> usize {
        self.trace.len()
    }

    /// Adam moments under `adam.`, and the trace as an `epochs × 3` tensor
    /// `trace` (absent before the first epoch).
    pub fn to_checkpoint(&self, params: &ParamStore) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.extend_prefixed("adam.", &self.adam.to_checkpoint(params));
        if !self.trace.is_empty() {
            let data = self
                .trace
                .iter()
                .flat_map(|r| [r.epoch as Scalar, r.loss, r.accuracy as Scalar])
                .collect();
            ck.insert("trace", Tensor::new(vec![self.trace.len(), 3], data).expect("non-empty"));
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint, params: &ParamStore) -> Result<Self> {
        let adam = AdamState::from_checkpoint(&ck.with_prefix("adam."), params)?;
        let mut trace = Vec::new();
        if let Some(t) = ck.get("trace") {
            if t.rank() != 2 || t.shape()[1] != 3 {
                return Err(Error::Format(format!("`trace` has shape {:?}, expected [epochs, 3]", t.shape())));
            }
            for (i, row) in t.data().chunks_exact(3).enumerate() {
                if row[0] != (i + 1) as Scalar {
                    return Err(Error::Format(format!("`trace` row {i} records epoch {}", row[0])));
                }
                trace.push(EpochRecord {
                    epoch: i + 1,
                    loss: row[1],
                    accuracy: row[2] as f64,
                });
            }
        }
        Ok(TrainState { adam, trace })
    }
}

/// Training callbacks. Returning an error aborts training with it.
pub trait Observer {
    fn on_epoch(&mut self, _record: &EpochRecord, _model: &Lsaf) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _model: &Lsaf, _state: &TrainState) -> Result<()> {
        Ok(())
    }
}

impl Observer for () {}

/// Index of the largest entry; the first one on ties.
pub fn argmax(row: &[Scalar]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn row_argmax(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits.data().chunks(k).map(argmax).collect()
}

/// Sample order of epoch `epoch` (0-based): stream `epoch` of a ChaCha8
/// generator seeded with `seed`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Trains from fresh optimizer state; returns the per-epoch trace.
pub fn train(model: &mut Lsaf, set: &PatchSet, cfg: &TrainConfig, observer: &mut dyn Observer) -> Result<Vec<EpochRecord>> {
    let mut state = TrainState::new(model);
    train_from(model, set, cfg, &mut state, observer)?;
    Ok(state.trace)
}

/// Continues training until `cfg.epochs` epochs are recorded in `state`.
pub fn train_from(
    model: &mut Lsaf,
    set: &PatchSet,
    cfg: &TrainConfig,
    state: &mut TrainState,
    observer: &mut dyn Observer,
) -> Result<()> {
    cfg.validate()?;
    if set.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    let adam = cfg.adam();
    for epoch in state.epochs_done()..cfg.epochs {
        let order = epoch_order(set.len(), cfg.seed, epoch);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (b, idx) in order.chunks(cfg.batch).enumerate() {
            let (hsi, lidar, targets) = set.batch(idx);
            let mut g = Graph::new();
            let vars = model.params.bind(&mut g);
            let h = g.constant(hsi);
            let l = g.constant(lidar);
            let out = model.forward(&mut g, &vars, h, l, Mode::Train)?;
            let loss = g.cross_entropy(out.logits, &targets)?;
            let value = g.value(loss).item();
            g.backward(loss)?;

            let grads: Vec<Option<&Tensor>> = vars.iter().map(|&v| g.grad(v)).collect();
            let bad_grad = grads.iter().position(|t| t.is_some_and(|t| !t.is_finite()));
            if !value.is_finite() || bad_grad.is_some() {
                let culprit = model
                    .params
                    .iter()
                    .position(|(_, t)| !t.is_finite())
                    .or(bad_grad)
                    .and_then(|i| model.params.names().nth(i))
                    .map_or_else(|| "logits".to_string(), |n| Lsaf::group_of(n).to_string());
                return Err(Error::Numeric {
                    epoch: epoch + 1,
                    batch: b + 1,
                    group: culprit,
                });
            }

            loss_sum += value * idx.len() as Scalar;
            let pred = row_argmax(g.value(out.logits));
            correct += pred.iter().zip(&targets).filter(|(p, t)| p == t).count();
            state.adam.step(&mut model.params, &grads, &adam)?;
            model.update_running_stats(&out.bn_stats);
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            loss: loss_sum / set.len() as Scalar,
            accuracy: 100.0 * correct as f64 / set.len() as f64,
        };
        log::debug!("epoch {} loss {:.6} train-mode accuracy {:.2}%", record.epoch, record.loss, record.accuracy);
        state.trace.push(record);
        observer.on_epoch(&record, model)?;
        if cfg.checkpoint_every > 0 && record.epoch % cfg.checkpoint_every == 0 {
            observer.on_checkpoint(model, state)?;
        }
    }
    Ok(())
}

/// Eval-mode predictions (zero-based classes), `batch` samples at a time.
pub fn predict(model: &Lsaf, set: &PatchSet, batch: usize) -> Result<Vec<usize>> {
    let batch = batch.max(1);
    let mut out = Vec::with_capacity(set.len());
    let all: Vec<usize> = (0..set.len()).collect();
    for idx in all.chunks(batch) {
        let (hsi, lidar, _) = set.batch(idx);
        out.extend(row_argmax(&model.predict(&hsi, &lidar)?));
    }
    Ok(out)
}

/// Eval-mode metrics over a labelled patch set.
pub fn evaluate(model: &Lsaf, set: &PatchSet, batch: usize) -> Result<MetricsReport> {
    if set.is_empty() {
        return Err(Error::Contract("evaluation set is empty".into()));
    }
    let k = model.config().classes;
    let truth: Vec<usize> = set.labels.iter().map(|&l| l as usize - 1).collect();
    if truth.iter().any(|&t| t >= k) {
        return Err(Error::Contract(format!("evaluation labels exceed {k} classes")));
    }
    let pred = predict(model, set, batch)?;
    MetricsReport::from_predictions(&truth, &pred, k)
}
