//! Adam optimization with plateau-based learning-rate reduction and early
//! stopping, plus the per-epoch training loop over the synthetic task.
//!
//! The loop is deterministic given the seeds: the train/validation split is
//! stratified and seeded, batch order is reshuffled per epoch from a seeded
//! generator, loss reductions run in a fixed order, and parameter updates
//! happen serially. Two runs with the same configuration produce identical
//! history tables.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{batch_tensors, stratified_split, AugmentOp, SyntheticPairSet};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_subset, ViewMode};
use crate::model::{forward_pair_vars, forward_single_vars, Model};
use crate::tensor::tape::{RecordingSink, Tape};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub batch: usize,
    pub early_stop_patience: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub threshold: f64,
    /// Random flips/rotations applied per sample per epoch.
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            weight_decay: 1e-3,
            max_epochs: 100,
            batch: 32,
            early_stop_patience: 15,
            plateau_factor: 0.5,
            plateau_patience: 5,
            threshold: 0.5,
            augment: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        if self.lr.is_nan() || self.lr <= 0.0 {
            v.push(format!("lr: must be positive, got {}", self.lr));
        }
        if self.weight_decay < 0.0 {
            v.push(format!(
                "weight_decay: must be nonnegative, got {}",
                self.weight_decay
            ));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            v.push(format!(
                "threshold: must be in [0, 1], got {}",
                self.threshold
            ));
        }
        if self.batch == 0 {
            v.push("batch: must be positive".into());
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor <= 1.0) {
            v.push(format!(
                "plateau_factor: must be in (0, 1], got {}",
                self.plateau_factor
            ));
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v.join("; ")))
        }
    }
}

/// Adam with decoupled weight decay (the decay term is added to the update
/// and scaled by the learning rate, not fed through the moments).
pub struct Adam<E: Element> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Tensor<E>>,
    v: Vec<Tensor<E>>,
}

impl<E: Element> Adam<E> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every model parameter. `grads` must be in the
    /// model's canonical traversal order (as returned after a backward pass
    /// over vars registered by `Model::register`).
    pub fn apply(&mut self, model: &mut Model<E>, grads: &[Tensor<E>]) -> Result<()> {
        self.step += 1;
        let b1 = E::from_f64(self.beta1);
        let b2 = E::from_f64(self.beta2);
        let one = E::one();
        let bc1 = E::from_f64(1.0 - self.beta1.powi(self.step as i32));
        let bc2 = E::from_f64(1.0 - self.beta2.powi(self.step as i32));
        let lr = E::from_f64(self.lr);
        let wd = E::from_f64(self.weight_decay);
        let eps = E::from_f64(self.eps);
        let mut idx = 0usize;
        let mut status: Result<()> = Ok(());
        let m_state = &mut self.m;
        let v_state = &mut self.v;
        model.for_each_named_mut(&mut |name, theta| {
            if status.is_err() {
                return;
            }
            if idx >= grads.len() {
                status = Err(Error::Contract(format!(
                    "missing gradient for parameter {name}"
                )));
                return;
            }
            let g = &grads[idx];
            if g.shape() != theta.shape() {
                status = Err(Error::Contract(format!(
                    "gradient shape {:?} does not match parameter {name} {:?}",
                    g.shape(),
                    theta.shape()
                )));
                return;
            }
            if m_state.len() == idx {
                m_state.push(Tensor::zeros(theta.shape().to_vec()));
                v_state.push(Tensor::zeros(theta.shape().to_vec()));
            }
            let m = &mut m_state[idx];
            let v = &mut v_state[idx];
            for (((t, &gv), mv), vv) in theta
                .data_mut()
                .iter_mut()
                .zip(g.data().iter())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *t = *t - lr * (mhat / (vhat.sqrt() + eps) + wd * *t);
            }
            idx += 1;
        });
        status?;
        if idx != grads.len() {
            return Err(Error::Contract(format!(
                "{} gradients supplied for {} parameters",
                grads.len(),
                idx
            )));
        }
        Ok(())
    }
}

/// Multiplies the learning rate by `factor` whenever the monitored loss has
/// not improved for `patience` consecutive steps.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: usize,
    best: Option<f64>,
    bad: usize,
}

impl PlateauScheduler {
    pub fn new(factor: f64, patience: usize) -> Self {
        PlateauScheduler {
            factor,
            patience,
            best: None,
            bad: 0,
        }
    }

    /// Feeds one loss observation; returns true when the rate was decayed.
    pub fn step(&mut self, loss: f64, lr: &mut f64) -> bool {
        match self.best {
            Some(best) if loss >= best => {
                self.bad += 1;
                if self.bad >= self.patience {
                    *lr *= self.factor;
                    self.bad = 0;
                    return true;
                }
            }
            _ => {
                self.best = Some(loss);
                self.bad = 0;
            }
        }
        false
    }
}

/// Signals a stop when the monitored loss has not improved for `patience`
/// consecutive steps.
#[derive(Debug, Clone)]
pub struct EarlyStop {
    pub patience: usize,
    best: Option<f64>,
    bad: usize,
}

impl EarlyStop {
    pub fn new(patience: usize) -> Self {
        EarlyStop {
            patience,
            best: None,
            bad: 0,
        }
    }

    pub fn step(&mut self, loss: f64) -> bool {
        match self.best {
            Some(best) if loss >= best => {
                self.bad += 1;
                self.bad >= self.patience
            }
            _ => {
                self.best = Some(loss);
                self.bad = 0;
                false
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_auc: f64,
    pub val_acc: f64,
    pub lr: f64,
}

/// One optimization step over a batch; returns the batch loss.
pub fn train_step<E: Element>(
    model: &mut Model<E>,
    opt: &mut Adam<E>,
    cc: &Tensor<E>,
    mlo: &Tensor<E>,
    labels: &Tensor<E>,
    mode: ViewMode,
) -> Result<f64> {
    let mut tape = Tape::new();
    let (vars, order) = {
        let mut sink = RecordingSink::new(&mut tape);
        let vars = model.register(&mut sink);
        (vars, sink.order)
    };
    let cc_var = tape.leaf(cc.clone())?;
    let logits = match mode {
        ViewMode::Pair => {
            let mlo_var = tape.leaf(mlo.clone())?;
            forward_pair_vars(model, &mut tape, &vars, cc_var, mlo_var)?
        }
        ViewMode::Single => forward_single_vars(model, &mut tape, &vars, cc_var)?,
    };
    let loss = tape.bce_with_logits(logits, labels)?;
    let loss_val = tape.value(loss).item()?.as_f64();
    tape.backward(loss)?;
    let grads: Vec<Tensor<E>> = order.iter().map(|&v| tape.grad_or_zeros(v)).collect();
    opt.apply(model, &grads)?;
    Ok(loss_val)
}

/// Trains on a stratified 80/20 split of `data`, returning the per-epoch
/// history. The model is left at the best-validation-loss state.
pub fn train<E: Element>(
    model: &mut Model<E>,
    data: &SyntheticPairSet<E>,
    tc: &TrainConfig,
    mode: ViewMode,
) -> Result<Vec<EpochRow>> {
    tc.validate()?;
    let (train_idx, val_idx) = stratified_split(data, 0.2, tc.seed);
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::Validation(format!(
            "split left train={} val={} examples",
            train_idx.len(),
            val_idx.len()
        )));
    }
    let mut opt = Adam::new(tc.lr, tc.weight_decay);
    let mut plateau = PlateauScheduler::new(tc.plateau_factor, tc.plateau_patience);
    let mut early = EarlyStop::new(tc.early_stop_patience);
    let mut history = Vec::new();
    // best validation loss plus the parameter snapshot that achieved it
    type Snapshot<E> = Vec<(String, Tensor<E>)>;
    let mut best: Option<(f64, Snapshot<E>)> = None;

    for epoch in 1..=tc.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ (epoch as u64).wrapping_mul(0x9e37));
        let mut order = train_idx.clone();
        order.shuffle(&mut rng);
        let mut train_loss = 0.0f64;
        for chunk in order.chunks(tc.batch) {
            let augments: Option<Vec<AugmentOp>> = tc.augment.then(|| {
                chunk
                    .iter()
                    .map(|_| match rng.random_range(0..4u8) {
                        0 => AugmentOp::HFlip,
                        1 => AugmentOp::VFlip,
                        2 => AugmentOp::Rot90(rng.random_range(1..4u8)),
                        _ => AugmentOp::Rot90(0),
                    })
                    .collect()
            });
            let (cc, mlo, labels) = batch_tensors(data, chunk, augments.as_deref());
            let loss = train_step(model, &mut opt, &cc, &mlo, &labels, mode)
                .map_err(|e| annotate_epoch(e, epoch))?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite training loss at epoch {epoch}"
                )));
            }
            train_loss += loss * chunk.len() as f64;
        }
        train_loss /= train_idx.len() as f64;

        let metrics = evaluate_subset(model, data, &val_idx, tc.threshold, mode)
            .map_err(|e| annotate_epoch(e, epoch))?;
        if !metrics.loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite validation loss at epoch {epoch}"
            )));
        }
        history.push(EpochRow {
            epoch,
            train_loss,
            val_loss: metrics.loss,
            val_auc: metrics.auc,
            val_acc: metrics.accuracy,
            lr: opt.lr,
        });
        if best.as_ref().is_none_or(|(b, _)| metrics.loss < *b) {
            best = Some((metrics.loss, model.param_tensors()));
        }
        plateau.step(metrics.loss, &mut opt.lr);
        if early.step(metrics.loss) {
            break;
        }
    }

    if let Some((_, snapshot)) = best {
        let mut it = snapshot.into_iter();
        let mut status: Result<()> = Ok(());
        model.for_each_named_mut(&mut |name, t| {
            if status.is_err() {
                return;
            }
            match it.next() {
                Some((snap_name, snap)) if snap_name == name => *t = snap,
                _ => status = Err(Error::Contract(format!("snapshot misaligned at {name}"))),
            }
        });
        status?;
    }
    Ok(history)
}

fn annotate_epoch(e: Error, epoch: usize) -> Error {
    match e {
        Error::Numeric(msg) => Error::Numeric(format!("epoch {epoch}: {msg}")),
        other => other,
    }
}

/// History CSV: `epoch,train_loss,val_loss,val_auc,val_acc,lr`, floats with
/// six decimal places.
pub fn history_csv(history: &[EpochRow]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss,val_auc,val_acc,lr\n");
    for row in history {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            row.epoch, row.train_loss, row.val_loss, row.val_auc, row.val_acc, row.lr
        );
    }
    out
}

pub fn write_history_csv(path: &Path, history: &[EpochRow]) -> Result<()> {
    std::fs::write(path, history_csv(history))
        .map_err(|e| Error::Io(format!("write {}: {e}", path.display())))
}
