//! SGD with momentum, the warmup/decay learning-rate schedule, and
//! evaluation helpers.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BnMode, Tape};
use crate::data::{Dataset, EpochMetrics};
use crate::error::{Error, Result};
use crate::fusion::{argmax, ScoreMatrix};
use crate::layers::ParamKind;
use crate::network::Model;
use crate::tensor::Tensor;

fn default_epochs() -> usize {
    65
}
fn default_base_lr() -> f64 {
    0.1
}
fn default_warmup() -> usize {
    5
}
fn default_decays() -> Vec<usize> {
    vec![35, 55]
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    4e-4
}
fn default_batch_size() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_base_lr")]
    pub base_lr: f64,
    /// Linear ramp: epoch e of w warmup epochs runs at base·e/w.
    #[serde(default = "default_warmup")]
    pub warmup_epochs: usize,
    /// Each listed epoch multiplies the rate by 0.1 from that epoch on.
    #[serde(default = "default_decays")]
    pub decay_epochs: Vec<usize>,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            epochs: default_epochs(),
            base_lr: default_base_lr(),
            warmup_epochs: default_warmup(),
            decay_epochs: default_decays(),
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            batch_size: default_batch_size(),
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::validation("batch size must be at least 1"));
        }
        if !self.base_lr.is_finite() || self.base_lr < 0.0 {
            return Err(Error::validation(format!("bad base learning rate {}", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::validation(format!("momentum {} must be in [0, 1)", self.momentum)));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::validation(format!("bad weight decay {}", self.weight_decay)));
        }
        Ok(())
    }

    /// Learning rate for a 1-based epoch: the warmup ramp while it lasts,
    /// then the base rate decayed ×0.1 at each decay epoch (inclusive).
    pub fn lr(&self, epoch: usize) -> f64 {
        if self.warmup_epochs > 0 && epoch <= self.warmup_epochs {
            return self.base_lr * epoch as f64 / self.warmup_epochs as f64;
        }
        let decays = self.decay_epochs.iter().filter(|&&d| epoch >= d).count();
        self.base_lr * 0.1f64.powi(decays as i32)
    }
}

/// Momentum buffers, one per trainable tensor in visit order.
pub struct Sgd {
    velocity: Vec<(String, Tensor)>,
    momentum: f64,
    weight_decay: f64,
}

impl Sgd {
    pub fn new(model: &mut Model, schedule: &Schedule) -> Self {
        let mut velocity = Vec::new();
        model.visit_params(&mut |name, kind, t| {
            if kind == ParamKind::Trainable {
                velocity.push((name, Tensor::zeros(t.shape())));
            }
        });
        Sgd { velocity, momentum: schedule.momentum, weight_decay: schedule.weight_decay }
    }

    /// v ← μ·v + (g + λ·p); p ← p − lr·v. `grads` must line up with the
    /// trainable parameters in visit order, which is how `BoundModel::reg`
    /// hands them out.
    pub fn step(&mut self, model: &mut Model, grads: &[(String, Tensor)], lr: f64) {
        let mut i = 0;
        model.visit_params(&mut |name, kind, p| {
            if kind != ParamKind::Trainable {
                return;
            }
            let (gname, grad) = &grads[i];
            let (vname, vel) = &mut self.velocity[i];
            assert_eq!(&name, gname, "gradient order diverged from parameter order");
            assert_eq!(&name, vname, "velocity order diverged from parameter order");
            let (mu, wd) = (self.momentum, self.weight_decay);
            for ((v, &g), p) in
                vel.data_mut().iter_mut().zip(grad.data()).zip(p.data_mut().iter_mut())
            {
                *v = mu * *v + (g + wd * *p);
                *p -= lr * *v;
            }
            i += 1;
        });
        assert_eq!(i, grads.len(), "gradient list longer than parameter list");
    }
}

/// One optimization step on a batch; returns the batch loss.
fn train_batch(
    model: &mut Model,
    sgd: &mut Sgd,
    x: &Tensor,
    labels: &[usize],
    lr: f64,
) -> Result<(f64, usize)> {
    let (loss_value, grads, right) = {
        let tape = Tape::new();
        let bound = model.bind(&tape);
        let logits = bound.forward(x, BnMode::Train)?;
        let loss = crate::autodiff::ops::cross_entropy(logits, labels)?;
        let loss_value = loss.value().data()[0];
        if !loss_value.is_finite() {
            return Err(Error::numerical(format!("loss is {loss_value} on this batch")));
        }
        tape.backward(loss)?;
        let lv = logits.value();
        let right = labels
            .iter()
            .enumerate()
            .filter(|&(i, &l)| argmax(&lv.data()[i * lv.shape()[1]..(i + 1) * lv.shape()[1]]) == l)
            .count();
        let grads: Vec<(String, Tensor)> = bound
            .reg
            .iter()
            .map(|(name, var)| {
                let g = tape.grad(*var).unwrap_or_else(|| Tensor::zeros(&var.shape()));
                (name.clone(), g)
            })
            .collect();
        (loss_value, grads, right)
    };
    sgd.step(model, &grads, lr);
    Ok((loss_value, right))
}

/// Full training run. `keep_going` sees each epoch's metrics and may stop
/// early by returning false; the metrics of every epoch that ran come back
/// either way. Deterministic for a fixed seed.
pub fn train(
    model: &mut Model,
    dataset: &Dataset,
    schedule: &Schedule,
    seed: u64,
    eval_set: Option<&Dataset>,
    mut keep_going: impl FnMut(&EpochMetrics) -> bool,
) -> Result<Vec<EpochMetrics>> {
    schedule.validate()?;
    let mut sgd = Sgd::new(model, schedule);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::new();
    for epoch in 1..=schedule.epochs {
        let lr = schedule.lr(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut right = 0;
        for batch_idx in order.chunks(schedule.batch_size) {
            let (x, labels) = dataset.batch(batch_idx);
            let (loss, batch_right) =
                train_batch(model, &mut sgd, &x, &labels, lr).map_err(|e| match e {
                    Error::Numerical(msg) => {
                        Error::numerical(format!("epoch {epoch}: {msg}; stopping"))
                    }
                    other => other,
                })?;
            loss_sum += loss * batch_idx.len() as f64;
            right += batch_right;
        }
        let eval_acc = match eval_set {
            Some(es) => Some(evaluate(model, es, schedule.batch_size)?.0),
            None => None,
        };
        let metrics = EpochMetrics {
            epoch,
            lr,
            loss: loss_sum / dataset.len() as f64,
            train_acc: right as f64 / dataset.len() as f64,
            eval_acc,
        };
        let go = keep_going(&metrics);
        history.push(metrics);
        if !go {
            break;
        }
    }
    Ok(history)
}

/// Eval-mode logits for every sample, in dataset order.
pub fn predict_scores(
    model: &Model,
    dataset: &Dataset,
    stream_id: &str,
    batch_size: usize,
) -> Result<ScoreMatrix> {
    if batch_size == 0 {
        return Err(Error::validation("batch size must be at least 1"));
    }
    let tape = Tape::new();
    let bound = model.bind(&tape);
    let indices: Vec<usize> = (0..dataset.len()).collect();
    let mut scores = Vec::with_capacity(dataset.len() * model.cfg.num_classes);
    for batch_idx in indices.chunks(batch_size) {
        let (x, _) = dataset.batch(batch_idx);
        let logits = bound.forward(&x, BnMode::Eval)?;
        let values = logits.value();
        // Non-finite logits are divergence, not bad input: deep stacks can
        // overflow in eval even when every training loss stayed finite,
        // since eval normalizes with running statistics that lag the
        // weights when the learning rate never decays.
        if let Some(pos) = values.data().iter().position(|v| !v.is_finite()) {
            let sample = &dataset.samples[batch_idx[pos / model.cfg.num_classes]];
            return Err(Error::numerical(format!(
                "stream {stream_id}: model scored sample {} non-finite; it \
                 likely diverged or its batch statistics never settled (try \
                 a schedule that decays the learning rate before the end)",
                sample.id
            )));
        }
        scores.extend_from_slice(values.data());
    }
    ScoreMatrix::new(
        stream_id,
        dataset.samples.iter().map(|s| s.id.clone()).collect(),
        dataset.samples.iter().map(|s| s.label).collect(),
        scores,
        model.cfg.num_classes,
    )
}

/// (accuracy, correct count) of eval-mode argmax predictions.
pub fn evaluate(model: &Model, dataset: &Dataset, batch_size: usize) -> Result<(f64, usize)> {
    let scores = predict_scores(model, dataset, "eval", batch_size)?;
    let right = (0..scores.num_samples())
        .filter(|&i| argmax(scores.row(i)) == scores.labels[i])
        .count();
    Ok((right as f64 / scores.num_samples() as f64, right))
}
