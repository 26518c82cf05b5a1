//! SGD training: sparse training with an L1 penalty on prunable batch-norm
//! scales, and plain fine-tuning.

use std::collections::HashSet;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{batches, DataSlice};
use crate::engine::{self, apply_bn_updates, argmax_rows, Mode};
use crate::error::{Error, Result};
use crate::importance::{block_mean_abs_gamma, global_mean_abs_gamma};
use crate::ir::{param_name, LayerKind, ModelSnapshot, ParamRole};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Step { initial: f64, drop_every: usize, factor: f64 },
    Cosine { initial: f64 },
}

impl LrSchedule {
    pub fn at(&self, epoch: usize, epochs: usize) -> f64 {
        match *self {
            LrSchedule::Step { initial, drop_every, factor } => {
                initial * factor.powi((epoch / drop_every.max(1)) as i32)
            }
            LrSchedule::Cosine { initial } => {
                0.5 * initial * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs.max(1) as f64).cos())
            }
        }
    }

    fn initial(&self) -> f64 {
        match *self {
            LrSchedule::Step { initial, .. } | LrSchedule::Cosine { initial } => initial,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Sparse,
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    /// L1 coefficient on prunable gammas; ignored when fine-tuning.
    pub sparsity: f64,
    pub seed: u64,
    pub mode: TrainMode,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            batch_size: 256,
            lr: LrSchedule::Step {
                initial: 0.01,
                drop_every: 50,
                factor: 0.1,
            },
            momentum: 0.9,
            weight_decay: 5e-3,
            sparsity: 1e-4,
            seed: 0,
            mode: TrainMode::Sparse,
            augment: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfigFile(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lr.initial() > 0.0) {
            return bad("learning rate must be > 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) || !(self.sparsity >= 0.0) {
            return bad("weight_decay and sparsity must be >= 0");
        }
        Ok(())
    }

    fn effective_sparsity(&self) -> f64 {
        match self.mode {
            TrainMode::Sparse => self.sparsity,
            TrainMode::Finetune => 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    /// Mean per-batch loss including the sparsity term.
    pub loss: f64,
    /// Train-mode top-1 accuracy over the epoch.
    pub accuracy: f64,
    pub mean_abs_gamma: IndexMap<String, f64>,
    pub global_mean_abs_gamma: f64,
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy(logits: &[f32], labels: &[usize], classes: usize) -> (f64, Vec<f32>) {
    let n = labels.len();
    let mut grad = vec![0.0f32; logits.len()];
    let mut total = 0.0f64;
    for (i, (row, &y)) in logits.chunks(classes).zip(labels).enumerate() {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
        let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        total += z.ln() + max - row[y] as f64;
        for (k, e) in exps.iter().enumerate() {
            let p = e / z - if k == y { 1.0 } else { 0.0 };
            grad[i * classes + k] = (p / n as f64) as f32;
        }
    }
    (total / n as f64, grad)
}

/// Cross-entropy averaged over the batch plus `lambda * sum |gamma|`.
pub fn loss(logits: &[f32], labels: &[usize], classes: usize, gammas: &[&[f32]], lambda: f64) -> f64 {
    let penalty: f64 = gammas.iter().flat_map(|g| g.iter()).map(|v| v.abs() as f64).sum();
    cross_entropy(logits, labels, classes).0 + lambda * penalty
}

/// Gamma tensors of every block's prunable batch-norms.
pub fn sparsity_targets(s: &ModelSnapshot) -> Vec<String> {
    let mut seen = HashSet::new();
    s.blocks
        .iter()
        .flat_map(|b| b.prunable_bn_ids.iter())
        .filter(|id| seen.insert(id.as_str()))
        .map(|id| param_name(id, ParamRole::Gamma))
        .collect()
}

fn block_gamma_means(s: &ModelSnapshot) -> IndexMap<String, f64> {
    s.blocks
        .iter()
        .map(|b| (b.id.clone(), block_mean_abs_gamma(s, &b.id).unwrap_or(0.0)))
        .collect()
}

/// Tensors excluded from weight decay: all batch-norm parameters.
fn decays(s: &ModelSnapshot, name: &str) -> bool {
    let layer = name.rsplit_once('.').map_or(name, |(l, _)| l);
    s.layers.get(layer).is_some_and(|l| l.kind != LayerKind::BatchNorm)
}

/// Runs `cfg.epochs` epochs of momentum SGD, returning the trained snapshot
/// and per-epoch metrics. Deterministic for a given seed.
pub fn train(s: &ModelSnapshot, data: &DataSlice, cfg: &TrainConfig) -> Result<(ModelSnapshot, Vec<EpochMetrics>)> {
    train_observed(s, data, cfg, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_observed(
    s: &ModelSnapshot,
    data: &DataSlice,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(ModelSnapshot, Vec<EpochMetrics>)> {
    cfg.validate()?;
    let mut model = s.clone();
    if cfg.epochs == 0 {
        return Ok((model, Vec::new()));
    }
    data.require_non_empty()?;
    let lambda = cfg.effective_sparsity();
    let penalized: HashSet<String> = sparsity_targets(&model).into_iter().collect();
    let trainable = model.trainable_params();
    let mut velocity: IndexMap<String, Vec<f32>> = trainable
        .iter()
        .map(|n| (n.clone(), vec![0.0; model.tensors[n].data.len()]))
        .collect();
    let decay: HashSet<String> = trainable.iter().filter(|n| decays(&model, n)).cloned().collect();
    let mut seeds = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr.at(epoch, cfg.epochs) as f32;
        let (shuffle, aug) = (seeds.random::<u64>(), seeds.random::<u64>());
        let mut it = batches(data, cfg.batch_size, Some(shuffle));
        if cfg.augment {
            it = it.with_augmentation(aug);
        }
        let (mut loss_sum, mut n_batches, mut correct) = (0.0f64, 0usize, 0usize);
        for (x, y) in it {
            let (grads, ce, hits, updates) = {
                let cache = engine::forward(&model, &x, Mode::Train).map_err(|e| match e {
                    Error::NonFinite(_) => Error::Diverged { epoch, loss: f64::NAN },
                    other => other,
                })?;
                let (ce, g) = cross_entropy(cache.logits(), &y, model.num_classes);
                let hits = argmax_rows(cache.logits(), model.num_classes)
                    .iter()
                    .zip(&y)
                    .filter(|(p, l)| p == l)
                    .count();
                (engine::backward(&cache, &g)?, ce, hits, cache.bn_updates.clone())
            };
            let penalty: f64 = penalized
                .iter()
                .flat_map(|n| model.tensors[n].data.iter())
                .map(|v| v.abs() as f64)
                .sum();
            let batch_loss = ce + lambda * penalty;
            if !batch_loss.is_finite() {
                return Err(Error::Diverged { epoch, loss: batch_loss });
            }
            loss_sum += batch_loss;
            n_batches += 1;
            correct += hits;

            for (name, mut g) in grads {
                let w = &mut model.tensors.get_mut(&name).expect("gradient for known tensor").data;
                if lambda > 0.0 && penalized.contains(&name) {
                    for (gi, wi) in g.iter_mut().zip(w.iter()) {
                        // Subgradient of |x| is 0 at 0.
                        *gi += lambda as f32 * if *wi > 0.0 { 1.0 } else if *wi < 0.0 { -1.0 } else { 0.0 };
                    }
                }
                if cfg.weight_decay > 0.0 && decay.contains(&name) {
                    for (gi, wi) in g.iter_mut().zip(w.iter()) {
                        *gi += cfg.weight_decay as f32 * *wi;
                    }
                }
                let v = velocity.get_mut(&name).expect("velocity for trainable tensor");
                for ((vi, gi), wi) in v.iter_mut().zip(&g).zip(w.iter_mut()) {
                    *vi = cfg.momentum as f32 * *vi + *gi;
                    *wi -= lr * *vi;
                }
            }
            apply_bn_updates(&mut model, &updates);
        }
        let m = EpochMetrics {
            epoch,
            lr: lr as f64,
            loss: loss_sum / n_batches as f64,
            accuracy: correct as f64 / data.len() as f64,
            mean_abs_gamma: block_gamma_means(&model),
            global_mean_abs_gamma: global_mean_abs_gamma(&model),
        };
        on_epoch(&m);
        history.push(m);
    }
    Ok((model, history))
}
