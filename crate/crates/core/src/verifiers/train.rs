//! Self-distillation training for [`NoiseAwareVerifier`].
//!
//! All procedures are single-threaded and consume only the `rng` passed in,
//! so identical seeds reproduce identical loss logs bit for bit.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{DistillDataset, DistillRecord};
use super::network::Cache;
use super::verifier::NoiseAwareVerifier;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    /// Learning rate at the last batch as a fraction of `lr`.
    pub final_lr_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.02,
            batch_size: 16,
            momentum: 0.9,
            final_lr_fraction: 0.5,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "learning rate must be positive and batch size nonzero".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument("momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Linear decay from `lr` to `final_lr_fraction * lr` over `total` batches.
    fn lr_at(&self, batch: usize, total: usize) -> f64 {
        if total <= 1 {
            return self.lr;
        }
        let frac = batch as f64 / (total - 1) as f64;
        self.lr * (1.0 - (1.0 - self.final_lr_fraction) * frac)
    }
}

/// Bradley–Terry loss form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BtVariant {
    /// `-exp(l r+) / (exp(l r+) + exp(l r-))`, without a logarithm.
    Printed,
    /// Standard negative log-likelihood `-log sigmoid(l (r+ - r-))`.
    NegLog,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "loss", rename_all = "snake_case")]
pub enum Objective {
    Mse,
    BradleyTerry { lambda: f64, variant: BtVariant },
}

impl Objective {
    pub fn name(&self) -> &'static str {
        match self {
            Objective::Mse => "mse",
            Objective::BradleyTerry {
                variant: BtVariant::Printed,
                ..
            } => "bt",
            Objective::BradleyTerry {
                variant: BtVariant::NegLog,
                ..
            } => "bt_log",
        }
    }
}

/// Per-batch losses, tagged with the step each batch trained.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub losses: Vec<f64>,
    pub steps: Vec<usize>,
}

impl TrainLog {
    fn extend(&mut self, other: TrainLog) {
        self.losses.extend(other.losses);
        self.steps.extend(other.steps);
    }
}

struct Momentum {
    velocity: Vec<f64>,
    beta: f64,
}

impl Momentum {
    fn new(n: usize, beta: f64) -> Self {
        Self {
            velocity: vec![0.0; n],
            beta,
        }
    }

    fn apply(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        for ((p, v), g) in params.iter_mut().zip(&mut self.velocity).zip(grad) {
            *v = self.beta * *v + g;
            *p -= lr * *v;
        }
    }
}

/// Mean squared error of `params` on `batch` and its gradient.
pub fn mse_loss_grad(
    verifier: &NoiseAwareVerifier,
    params: &[f64],
    batch: &[&DistillRecord],
) -> Result<(f64, Vec<f64>)> {
    let net = verifier.network();
    let mut cache = Cache::default();
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    let scale = 1.0 / batch.len() as f64;
    for r in batch {
        let input = verifier.input_for(&r.estimate, r.step)?;
        let pred = net.forward(params, &input, &mut cache);
        let err = pred - r.target;
        loss += err * err * scale;
        net.backward(params, &cache, 2.0 * err * scale, &mut grad);
    }
    Ok((loss, grad))
}

/// Per-pair loss and its derivative with respect to `r+ - r-`.
pub fn bt_pair_loss(margin: f64, lambda: f64, variant: BtVariant) -> (f64, f64) {
    let z = lambda * margin;
    // p = exp(l r+) / (exp(l r+) + exp(l r-)) = sigmoid(z)
    let p = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    match variant {
        BtVariant::Printed => (-p, -p * (1.0 - p) * lambda),
        BtVariant::NegLog => {
            // -log sigmoid(z) = softplus(-z)
            let loss = if z > 0.0 {
                (-z).exp().ln_1p()
            } else {
                -z + z.exp().ln_1p()
            };
            (loss, -(1.0 - p) * lambda)
        }
    }
}

/// Mean Bradley–Terry loss over `(better, worse)` pairs and its gradient.
pub fn bt_loss_grad(
    verifier: &NoiseAwareVerifier,
    params: &[f64],
    pairs: &[(&DistillRecord, &DistillRecord)],
    lambda: f64,
    variant: BtVariant,
) -> Result<(f64, Vec<f64>)> {
    let net = verifier.network();
    let mut cache_hi = Cache::default();
    let mut cache_lo = Cache::default();
    let mut grad = vec![0.0; params.len()];
    let mut loss = 0.0;
    let scale = 1.0 / pairs.len() as f64;
    for (hi, lo) in pairs {
        let r_hi = net.forward(params, &verifier.input_for(&hi.estimate, hi.step)?, &mut cache_hi);
        let r_lo = net.forward(params, &verifier.input_for(&lo.estimate, lo.step)?, &mut cache_lo);
        let (l, dl) = bt_pair_loss(r_hi - r_lo, lambda, variant);
        loss += l * scale;
        if dl != 0.0 {
            net.backward(params, &cache_hi, dl * scale, &mut grad);
            net.backward(params, &cache_lo, -dl * scale, &mut grad);
        }
    }
    Ok((loss, grad))
}

fn check_loss(loss: f64, step: usize, batch: usize, log: &TrainLog) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            step,
            batch,
            last_finite_loss: log.losses.iter().rev().copied().find(|l| l.is_finite()),
        })
    }
}

/// Runs `epochs` passes of mini-batch MSE over the records of `step`,
/// updating `verifier.weights` in place.
pub fn train_mse<R: Rng + ?Sized>(
    verifier: &mut NoiseAwareVerifier,
    data: &DistillDataset,
    step: usize,
    epochs: usize,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<TrainLog> {
    cfg.validate()?;
    let slice = data.step_slice(step);
    if slice.is_empty() {
        return Err(Error::InvalidArgument(format!("no training records for step {step}")));
    }
    verifier.fit_missing_stats(data)?;
    let per_epoch = slice.len().div_ceil(cfg.batch_size);
    let total = per_epoch * epochs;
    let mut params = std::mem::take(&mut verifier.weights);
    let mut opt = Momentum::new(params.len(), cfg.momentum);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..slice.len()).collect();
    let mut batch_idx = 0;
    let outcome = (|| {
        for _ in 0..epochs {
            order.shuffle(rng);
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<&DistillRecord> = chunk.iter().map(|&i| slice[i]).collect();
                let (loss, grad) = mse_loss_grad(verifier, &params, &batch)?;
                check_loss(loss, step, batch_idx, &log)?;
                opt.apply(&mut params, &grad, cfg.lr_at(batch_idx, total));
                log.losses.push(loss);
                log.steps.push(step);
                batch_idx += 1;
            }
        }
        Ok(())
    })();
    verifier.weights = params;
    outcome.map(|_| log)
}

/// Draws `count` (better, worse) pairs within instances of `slice`.
fn sample_pairs<'a, R: Rng + ?Sized>(
    slice: &[&'a DistillRecord],
    count: usize,
    rng: &mut R,
) -> Vec<(&'a DistillRecord, &'a DistillRecord)> {
    let mut by_instance: BTreeMap<usize, Vec<&DistillRecord>> = BTreeMap::new();
    for r in slice {
        by_instance.entry(r.instance).or_default().push(r);
    }
    let groups: Vec<Vec<&DistillRecord>> = by_instance
        .into_values()
        .filter(|g| g.iter().any(|r| r.target != g[0].target))
        .collect();
    if groups.is_empty() {
        return Vec::new();
    }
    let weights: Vec<usize> = groups.iter().map(Vec::len).collect();
    let total: usize = weights.iter().sum();
    let mut pairs = Vec::with_capacity(count);
    while pairs.len() < count {
        let mut pick = rng.random_range(0..total);
        let mut g = 0;
        while pick >= weights[g] {
            pick -= weights[g];
            g += 1;
        }
        let group = &groups[g];
        let a = group[pick];
        let b = group[rng.random_range(0..group.len())];
        if a.target == b.target {
            continue;
        }
        pairs.push(if a.target > b.target { (a, b) } else { (b, a) });
    }
    pairs
}

/// Pairwise ranking training on one step; pairs come from the same instance
/// and the higher-target member is treated as preferred.
#[allow(clippy::too_many_arguments)]
pub fn train_bradley_terry<R: Rng + ?Sized>(
    verifier: &mut NoiseAwareVerifier,
    data: &DistillDataset,
    step: usize,
    lambda: f64,
    variant: BtVariant,
    epochs: usize,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<TrainLog> {
    cfg.validate()?;
    let slice = data.step_slice(step);
    let per_epoch = (slice.len() / 2).max(1);
    if sample_pairs(&slice, 1, rng).is_empty() {
        return Err(Error::NoPairs(format!(
            "step {step} has no instance with two distinct targets"
        )));
    }
    verifier.fit_missing_stats(data)?;
    let batches_per_epoch = per_epoch.div_ceil(cfg.batch_size);
    let total = batches_per_epoch * epochs;
    let mut params = std::mem::take(&mut verifier.weights);
    let mut opt = Momentum::new(params.len(), cfg.momentum);
    let mut log = TrainLog::default();
    let mut batch_idx = 0;
    let outcome = (|| {
        for _ in 0..epochs {
            let pairs = sample_pairs(&slice, per_epoch, rng);
            for chunk in pairs.chunks(cfg.batch_size) {
                let (loss, grad) = bt_loss_grad(verifier, &params, chunk, lambda, variant)?;
                check_loss(loss, step, batch_idx, &log)?;
                opt.apply(&mut params, &grad, cfg.lr_at(batch_idx, total));
                log.losses.push(loss);
                log.steps.push(step);
                batch_idx += 1;
            }
        }
        Ok(())
    })();
    verifier.weights = params;
    outcome.map(|_| log)
}

fn train_one_epoch<R: Rng + ?Sized>(
    verifier: &mut NoiseAwareVerifier,
    data: &DistillDataset,
    step: usize,
    objective: Objective,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<TrainLog> {
    match objective {
        Objective::Mse => train_mse(verifier, data, step, 1, cfg, rng),
        Objective::BradleyTerry { lambda, variant } => {
            train_bradley_terry(verifier, data, step, lambda, variant, 1, cfg, rng)
        }
    }
}

fn check_coverage(data: &DistillDataset, start_step: usize) -> Result<()> {
    let present = data.step_indices();
    for step in 0..=start_step {
        if present.binary_search(&step).is_err() {
            return Err(Error::InvalidArgument(format!(
                "dataset has no records for step {step}"
            )));
        }
    }
    Ok(())
}

/// Easy-to-hard curriculum: one epoch per step from `start_step` down to the
/// noisiest step 0, each initialized from the previous step's result.
pub fn train_curriculum<R: Rng + ?Sized>(
    verifier: &mut NoiseAwareVerifier,
    data: &DistillDataset,
    start_step: usize,
    objective: Objective,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<TrainLog> {
    if verifier.time_conditioned() {
        return Err(Error::InvalidArgument(
            "curriculum training stores per-step checkpoints; use a per-step verifier".into(),
        ));
    }
    check_coverage(data, start_step)?;
    let mut log = TrainLog::default();
    for step in (0..=start_step).rev() {
        log.extend(train_one_epoch(verifier, data, step, objective, cfg, rng)?);
        verifier.store_checkpoint(step, verifier.weights.clone())?;
    }
    Ok(log)
}

/// Every step fine-tuned for one epoch from the same initial weights.
pub fn train_separate<R: Rng + ?Sized>(
    verifier: &mut NoiseAwareVerifier,
    data: &DistillDataset,
    start_step: usize,
    objective: Objective,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<TrainLog> {
    if verifier.time_conditioned() {
        return Err(Error::InvalidArgument(
            "separate training stores per-step checkpoints; use a per-step verifier".into(),
        ));
    }
    check_coverage(data, start_step)?;
    let init = verifier.weights.clone();
    let mut log = TrainLog::default();
    for step in (0..=start_step).rev() {
        verifier.weights = init.clone();
        log.extend(train_one_epoch(verifier, data, step, objective, cfg, rng)?);
        verifier.store_checkpoint(step, verifier.weights.clone())?;
    }
    verifier.weights = init;
    Ok(log)
}

/// Single time-conditioned model trained on mini-batches drawn uniformly
/// over all steps. One epoch here is one step-slice worth of samples, so
/// `epochs = steps covered` matches the curriculum's total budget.
pub fn train_uniform_timecond<R: Rng + ?Sized>(
    verifier: &mut NoiseAwareVerifier,
    data: &DistillDataset,
    epochs: usize,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<TrainLog> {
    if !verifier.time_conditioned() {
        return Err(Error::InvalidArgument(
            "uniform training requires a time-conditioned verifier".into(),
        ));
    }
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    verifier.fit_missing_stats(data)?;
    let steps = data.step_indices().len();
    let slice_len = data.len().div_ceil(steps);
    let samples = slice_len * epochs;
    let total = samples.div_ceil(cfg.batch_size);
    let mut params = std::mem::take(&mut verifier.weights);
    let mut opt = Momentum::new(params.len(), cfg.momentum);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let outcome = (|| {
        for batch_idx in 0..total {
            let want = cfg.batch_size.min(samples - batch_idx * cfg.batch_size);
            let mut batch = Vec::with_capacity(want);
            while batch.len() < want {
                if cursor == order.len() {
                    order = (0..data.len()).collect();
                    order.shuffle(rng);
                    cursor = 0;
                }
                batch.push(&data.records[order[cursor]]);
                cursor += 1;
            }
            let (loss, grad) = mse_loss_grad(verifier, &params, &batch)?;
            check_loss(loss, batch[0].step, batch_idx, &log)?;
            opt.apply(&mut params, &grad, cfg.lr_at(batch_idx, total));
            log.losses.push(loss);
            log.steps.push(batch[0].step);
        }
        Ok(())
    })();
    verifier.weights = params;
    outcome.map(|_| log)
}
