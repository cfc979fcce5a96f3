//! Fine-tuning protocol: per-label binary cross entropy, AdamW with linear
//! warmup and decay, early stopping on validation macro-F1, and evaluation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::model::MultimodalEncoder;
use crate::numerics::{Graph, NamedParam, NodeId, Tensor};
use crate::seed;

fn default_max_lr() -> f64 {
    5e-3
}
fn default_weight_decay() -> f64 {
    2e-2
}
fn default_batch_size() -> usize {
    4
}
fn default_max_epochs() -> usize {
    40
}
fn default_patience() -> usize {
    5
}
fn default_warmup_fraction() -> f64 {
    0.02
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_max_lr")]
    pub max_lr: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_warmup_fraction")]
    pub warmup_fraction: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_lr: default_max_lr(),
            weight_decay: default_weight_decay(),
            batch_size: default_batch_size(),
            max_epochs: default_max_epochs(),
            patience: default_patience(),
            warmup_fraction: default_warmup_fraction(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_lr <= 0.0 || self.weight_decay < 0.0 || self.eps <= 0.0 {
            return Err(Error::Config("max_lr and eps must be > 0, weight_decay >= 0".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config(
                "batch_size, max_epochs, and patience must be >= 1".into(),
            ));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::Config(format!(
                "warmup_fraction must lie in (0, 1), got {}",
                self.warmup_fraction
            )));
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return Err(Error::Config("betas must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Warmup length in steps for a given schedule horizon.
    pub fn warmup_steps(&self, total_steps: usize) -> usize {
        (self.warmup_fraction * total_steps as f64).ceil() as usize
    }
}

/// Piecewise-linear schedule: 0 -> max_lr over the warmup steps, then
/// max_lr -> 0 at `total_steps`. `lr_at(w) == max_lr` and
/// `lr_at(total_steps) == 0` hold exactly.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > total_steps {
        return Err(Error::Contract(format!(
            "schedule step {step} is past the horizon {total_steps}"
        )));
    }
    let warmup = cfg.warmup_steps(total_steps);
    if warmup >= total_steps {
        return Err(Error::Config(format!(
            "warmup of {warmup} steps swallows the whole schedule of {total_steps}"
        )));
    }
    if step <= warmup {
        Ok(cfg.max_lr * step as f64 / warmup as f64)
    } else {
        Ok(cfg.max_lr * (total_steps - step) as f64 / (total_steps - warmup) as f64)
    }
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// First/second-moment accumulators per trainable tensor plus the global
/// step counter.
#[derive(Default)]
pub struct OptimizerState {
    moments: BTreeMap<String, Moments>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new() -> Self {
        OptimizerState::default()
    }
}

/// One AdamW update with bias correction. Decoupled weight decay is applied
/// only to parameters flagged `decay` (weight matrices, not biases or norm
/// gains). A missing or non-finite gradient aborts the step untouched.
pub fn adamw_step(
    params: &[NamedParam],
    state: &mut OptimizerState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    for p in params {
        let t = p.param.borrow();
        let grad = t.grad().ok_or_else(|| {
            Error::Contract(format!("parameter `{}` has no gradient for this step", p.name))
        })?;
        if !grad.iter().all(|g| g.is_finite()) {
            return Err(Error::NonFinite {
                op: format!("gradient of `{}`", p.name),
            });
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - cfg.beta1.powi(t);
    let bias2 = 1.0 - cfg.beta2.powi(t);

    for p in params {
        let mut tensor = p.param.borrow_mut();
        let grad = tensor.grad().expect("validated above").to_vec();
        let entry = state.moments.entry(p.name.clone()).or_insert_with(|| Moments {
            m: vec![0.0; grad.len()],
            v: vec![0.0; grad.len()],
        });
        let mut data = tensor.data().to_vec();
        for i in 0..grad.len() {
            entry.m[i] = cfg.beta1 * entry.m[i] + (1.0 - cfg.beta1) * grad[i];
            entry.v[i] = cfg.beta2 * entry.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            let m_hat = entry.m[i] / bias1;
            let v_hat = entry.v[i] / bias2;
            data[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
            if p.decay {
                data[i] -= lr * cfg.weight_decay * data[i];
            }
        }
        tensor.set_data(data)?;
    }
    Ok(())
}

/// Clears and (re)allocates gradient buffers for every parameter, so a
/// backward pass that structurally skips a tensor still leaves a zero
/// gradient rather than none.
pub fn zero_grads(params: &[NamedParam]) {
    for p in params {
        let mut t = p.param.borrow_mut();
        t.zero_grad();
        if t.grad().is_none() {
            let n = t.numel();
            let _ = t.accumulate_grad(&vec![0.0; n]);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Per-label precision/recall/F1 with the 0/0 -> 0 convention.
pub fn label_metrics(preds: &[Vec<u8>], truth: &[Vec<u8>]) -> Result<Vec<LabelMetrics>> {
    if preds.len() != truth.len() || preds.is_empty() {
        return Err(Error::Contract(format!(
            "prediction and truth row counts differ or are empty: {} vs {}",
            preds.len(),
            truth.len()
        )));
    }
    let labels = truth[0].len();
    if preds.iter().chain(truth).any(|row| row.len() != labels) {
        return Err(Error::Contract("ragged prediction or truth matrix".into()));
    }
    let mut out = Vec::with_capacity(labels);
    for l in 0..labels {
        let (mut tp, mut fp, mut fneg) = (0.0_f64, 0.0_f64, 0.0_f64);
        for (p, t) in preds.iter().zip(truth) {
            match (p[l], t[l]) {
                (1, 1) => tp += 1.0,
                (1, 0) => fp += 1.0,
                (0, 1) => fneg += 1.0,
                _ => {}
            }
        }
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fneg > 0.0 { tp / (tp + fneg) } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        out.push(LabelMetrics {
            precision,
            recall,
            f1,
        });
    }
    Ok(out)
}

/// Unweighted mean over labels of per-label F1.
pub fn f1_macro(preds: &[Vec<u8>], truth: &[Vec<u8>]) -> Result<f64> {
    let metrics = label_metrics(preds, truth)?;
    Ok(metrics.iter().map(|m| m.f1).sum::<f64>() / metrics.len() as f64)
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_label: Vec<LabelMetrics>,
    pub macro_f1: f64,
    /// Mean training loss per epoch.
    pub train_loss: Vec<f64>,
    /// Training loss per optimizer step.
    pub step_loss: Vec<f64>,
    /// Validation macro-F1 per epoch.
    pub val_macro_f1: Vec<f64>,
    /// 1-based epoch whose validation score was kept.
    pub best_epoch: usize,
}

/// Strict-improvement early stopping on a scalar score. With a constant
/// score and patience `p`, exactly `p + 1` epochs are observed.
pub struct EarlyStopping {
    patience: usize,
    best: Option<f64>,
    since_improvement: usize,
}

pub struct Observation {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: None,
            since_improvement: 0,
        }
    }

    pub fn observe(&mut self, score: f64) -> Observation {
        let improved = self.best.map_or(true, |b| score > b);
        if improved {
            self.best = Some(score);
            self.since_improvement = 0;
        } else {
            self.since_improvement += 1;
        }
        Observation {
            improved,
            stop: self.since_improvement >= self.patience,
        }
    }
}

/// Builds the mean-BCE loss over a batch: every sample runs forward with its
/// own missing pattern, the logits stack into `[b, L]`, and the loss is the
/// mean over batch and labels.
pub fn batch_loss(
    enc: &MultimodalEncoder,
    samples: &[&Sample],
) -> Result<(Graph, NodeId)> {
    if samples.is_empty() {
        return Err(Error::Contract("cannot build a loss over an empty batch".into()));
    }
    let labels = samples[0].labels.len();
    let mut g = Graph::new();
    let logit_nodes: Vec<NodeId> = samples
        .iter()
        .map(|s| enc.forward_nodes(&mut g, s))
        .collect::<Result<_>>()?;
    let stacked = g.concat_rows(&logit_nodes)?;
    let targets = Tensor::new(
        samples
            .iter()
            .flat_map(|s| s.labels.iter().map(|&l| l as f64))
            .collect(),
        vec![samples.len(), labels],
    )?;
    let loss = g.bce_with_logits(stacked, &targets)?;
    Ok((g, loss))
}

/// Sigmoid probabilities thresholded into binary predictions, then full
/// per-label and macro metrics.
pub fn evaluate(enc: &MultimodalEncoder, ds: &Dataset, threshold: f64) -> Result<MetricsReport> {
    if ds.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty dataset".into()));
    }
    let mut preds = Vec::with_capacity(ds.len());
    let mut truth = Vec::with_capacity(ds.len());
    for s in &ds.samples {
        let logits = enc.forward(s)?;
        let row: Vec<u8> = logits
            .data()
            .iter()
            .map(|&z| {
                let p = if z >= 0.0 {
                    1.0 / (1.0 + (-z).exp())
                } else {
                    let e = z.exp();
                    e / (1.0 + e)
                };
                (p >= threshold) as u8
            })
            .collect();
        preds.push(row);
        truth.push(s.labels.clone());
    }
    let per_label = label_metrics(&preds, &truth)?;
    let macro_f1 = per_label.iter().map(|m| m.f1).sum::<f64>() / per_label.len() as f64;
    Ok(MetricsReport {
        per_label,
        macro_f1,
        ..MetricsReport::default()
    })
}

/// The fine-tuning loop: shuffled mini-batches, per-step warmup+decay AdamW,
/// epoch-end validation, and strict-improvement early stopping. Returns the
/// best checkpoint (also restored into the model) and the training record.
pub fn train(
    enc: &mut MultimodalEncoder,
    train_ds: &Dataset,
    val_ds: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, MetricsReport)> {
    cfg.validate()?;
    if train_ds.is_empty() || val_ds.is_empty() {
        return Err(Error::Config("training and validation sets must be non-empty".into()));
    }

    let params = enc.trainable_params();
    let n = train_ds.len();
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    // Warmup is defined against the full horizon, not the early-stopped one.
    let total_steps = cfg.max_epochs * batches_per_epoch;

    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, "shuffle"));
    let mut state = OptimizerState::new();
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut report = MetricsReport::default();
    let mut best: Option<Checkpoint> = None;
    let mut global_step = 0usize;

    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            zero_grads(&params);
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_ds.samples[i]).collect();
            let (mut graph, loss) = batch_loss(enc, &batch)?;
            let loss_value = graph.scalar(loss)?;
            graph.backward(loss)?;

            global_step += 1;
            let lr = lr_at(global_step, total_steps, cfg)?;
            adamw_step(&params, &mut state, lr, cfg)?;

            report.step_loss.push(loss_value);
            epoch_loss += loss_value * batch.len() as f64;
        }
        report.train_loss.push(epoch_loss / n as f64);

        let val = evaluate(enc, val_ds, 0.5)?;
        report.val_macro_f1.push(val.macro_f1);
        let obs = stopper.observe(val.macro_f1);
        if obs.improved {
            best = Some(enc.checkpoint());
            report.best_epoch = epoch;
            report.per_label = val.per_label;
            report.macro_f1 = val.macro_f1;
        }
        if obs.stop {
            break;
        }
    }

    let best = best.expect("at least one epoch ran");
    enc.restore(&best)?;
    Ok((best, report))
}
