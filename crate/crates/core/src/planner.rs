//! Keep ratios `R_i = alpha * I_i` and a bisection search over `alpha`.
//!
//! FLOPs are nondecreasing in `alpha` because each block's channel count
//! `clamp(round_half_up(c * min(alpha * I_i, 1)), 1, c)` is, so the budget
//! residual `f(alpha) = cost(alpha) - target` can be bracketed and halved.
//! Channel rounding makes `f` a step function; when no step lands inside the
//! tolerance band the search returns the largest step at or below the target.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::cost::{baseline_cost, evaluate_cost, ChannelConfig, CostReport};
use crate::error::{Error, Result};
use crate::importance::ImportanceVector;
use crate::ir::{LayerKind, ModelSnapshot};

pub const DEFAULT_TOLERANCE: f64 = 0.01;
pub const DEFAULT_INTERVAL: (f64, f64) = (0.01, 100.0);
pub const DEFAULT_MAX_ITERS: usize = 200;
const MAX_WIDENINGS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetTarget {
    /// Absolute FLOPs.
    Flops(u64),
    /// Fraction of the unpruned model's FLOPs.
    Ratio(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub target: BudgetTarget,
    /// Relative tolerance on FLOPs, as a fraction of the target.
    pub tolerance: f64,
    pub interval: (f64, f64),
    pub max_iters: usize,
}

impl Budget {
    pub fn ratio(r: f64) -> Self {
        Self {
            target: BudgetTarget::Ratio(r),
            tolerance: DEFAULT_TOLERANCE,
            interval: DEFAULT_INTERVAL,
            max_iters: DEFAULT_MAX_ITERS,
        }
    }

    pub fn flops(f: u64) -> Self {
        Self {
            target: BudgetTarget::Flops(f),
            ..Self::ratio(1.0)
        }
    }

    fn target_flops(&self, baseline: u64) -> Result<f64> {
        let t = match self.target {
            BudgetTarget::Ratio(r) => {
                if !(r > 0.0 && r <= 1.0) {
                    return Err(Error::InvalidBudget(format!("target ratio {r} is outside (0, 1]")));
                }
                r * baseline as f64
            }
            BudgetTarget::Flops(f) => {
                if f == 0 {
                    return Err(Error::InvalidBudget("target FLOPs must be positive".into()));
                }
                f as f64
            }
        };
        if !(self.tolerance > 0.0) {
            return Err(Error::InvalidBudget(format!("tolerance {} must be positive", self.tolerance)));
        }
        let (a, b) = self.interval;
        if !(a > 0.0 && a < b && b.is_finite()) {
            return Err(Error::InvalidBudget(format!("interval ({a}, {b}) must satisfy 0 < a < b")));
        }
        Ok(t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruningPlan {
    pub alpha: f64,
    /// `min(alpha * I_i, 1)` per block.
    pub keep_ratios: IndexMap<String, f64>,
    pub config: ChannelConfig,
    pub achieved: CostReport,
    pub baseline_flops: u64,
    pub target_flops: f64,
    pub iterations: usize,
    /// Rounding put no configuration within tolerance; `achieved` is the
    /// largest cost at or below the target.
    pub nearest_achievable: bool,
    /// Cost at the upper end of the final bracket (next step above the target).
    pub upper_flops: Option<u64>,
}

impl PruningPlan {
    pub fn achieved_ratio(&self) -> f64 {
        if self.baseline_flops == 0 {
            1.0
        } else {
            self.achieved.flops as f64 / self.baseline_flops as f64
        }
    }
}

fn quantize(c: usize, ratio: f64) -> usize {
    let r = if ratio.is_nan() { 0.0 } else { ratio.min(1.0) };
    let scaled = (c as f64 * r + 0.5).floor();
    (scaled.max(1.0) as usize).min(c)
}

/// Channel configuration for per-block keep ratios. Blocks absent from
/// `keep_ratios` are left at full width.
pub fn ratios_to_config(s: &ModelSnapshot, keep_ratios: &IndexMap<String, f64>) -> ChannelConfig {
    let mut cfg = ChannelConfig::new();
    for block in &s.blocks {
        let r = keep_ratios.get(&block.id).copied().unwrap_or(1.0);
        for lid in &block.internal_prunable_layer_ids {
            cfg.set(lid.clone(), quantize(s.layers[lid].out_channels, r));
        }
    }
    // Depthwise layers carry the channel count of whatever feeds them.
    if let Ok(topo) = s.propagate(|spec| cfg.channels_or(&spec.id, spec.out_channels)) {
        for block in &s.blocks {
            for lid in &block.layer_ids {
                if let Some(i) = s.layers.get_index_of(lid) {
                    if s.layers[i].kind == LayerKind::DepthwiseConv && topo.out_dims[i].c != s.layers[i].out_channels {
                        cfg.set(lid.clone(), topo.out_dims[i].c);
                    }
                }
            }
        }
    }
    cfg
}

fn keep_ratios_for(imp: &ImportanceVector, alpha: f64) -> IndexMap<String, f64> {
    imp.blocks
        .iter()
        .map(|b| (b.block_id.clone(), (alpha * b.importance).min(1.0)))
        .collect()
}

fn cost_at(s: &ModelSnapshot, imp: &ImportanceVector, alpha: f64) -> Result<(ChannelConfig, CostReport)> {
    let cfg = ratios_to_config(s, &keep_ratios_for(imp, alpha));
    let report = evaluate_cost(s, &cfg)?;
    Ok((cfg, report))
}

/// Total FLOPs of the configuration induced by `alpha`.
pub fn monotone_cost(s: &ModelSnapshot, imp: &ImportanceVector, alpha: f64) -> Result<u64> {
    Ok(cost_at(s, imp, alpha)?.1.flops)
}

fn identity_plan(s: &ModelSnapshot, imp: &ImportanceVector, baseline: CostReport, target: f64) -> PruningPlan {
    let min_positive = imp
        .blocks
        .iter()
        .map(|b| b.importance)
        .filter(|&i| i > 0.0)
        .fold(f64::INFINITY, f64::min);
    let alpha = if min_positive.is_finite() { 1.0 / min_positive } else { 1.0 };
    let keep_ratios: IndexMap<String, f64> = imp.blocks.iter().map(|b| (b.block_id.clone(), 1.0)).collect();
    PruningPlan {
        alpha,
        config: ratios_to_config(s, &keep_ratios),
        keep_ratios,
        baseline_flops: baseline.flops,
        achieved: baseline,
        target_flops: target,
        iterations: 0,
        nearest_achievable: false,
        upper_flops: None,
    }
}

/// Finds `alpha` whose configuration meets the budget.
pub fn bisect_alpha(s: &ModelSnapshot, imp: &ImportanceVector, budget: &Budget) -> Result<PruningPlan> {
    let baseline = baseline_cost(s)?;
    let target = budget.target_flops(baseline.flops)?;
    if target >= baseline.flops as f64 {
        return Ok(identity_plan(s, imp, baseline, target));
    }
    let tol = budget.tolerance * target;
    let residual = |alpha: f64| -> Result<f64> { Ok(monotone_cost(s, imp, alpha)? as f64 - target) };

    let (mut a, mut b) = budget.interval;
    let mut fa = residual(a)?;
    for _ in 0..MAX_WIDENINGS {
        if fa <= 0.0 {
            break;
        }
        a /= 2.0;
        fa = residual(a)?;
    }
    if fa > 0.0 {
        return Err(Error::CannotBracket {
            target: target as u64,
            detail: format!("cost at alpha={a:e} is still {} above target", fa),
        });
    }
    let mut fb = residual(b)?;
    for _ in 0..MAX_WIDENINGS {
        if fb >= 0.0 {
            break;
        }
        b *= 2.0;
        fb = residual(b)?;
    }
    if fb < 0.0 {
        return Err(Error::CannotBracket {
            target: target as u64,
            detail: format!("cost at alpha={b:e} is still {} below target", -fb),
        });
    }

    let finish = |alpha: f64, iterations: usize, nearest: bool, upper: Option<u64>| -> Result<PruningPlan> {
        let (config, achieved) = cost_at(s, imp, alpha)?;
        Ok(PruningPlan {
            alpha,
            keep_ratios: keep_ratios_for(imp, alpha),
            config,
            achieved,
            baseline_flops: baseline.flops,
            target_flops: target,
            iterations,
            nearest_achievable: nearest,
            upper_flops: upper,
        })
    };

    if fa.abs() <= tol {
        return finish(a, 0, false, None);
    }
    let mut iterations = 0;
    while iterations < budget.max_iters {
        let mid = 0.5 * (a + b);
        if mid <= a || mid >= b {
            break;
        }
        iterations += 1;
        let fm = residual(mid)?;
        if fm.abs() <= tol {
            return finish(mid, iterations, false, None);
        }
        if fm > 0.0 {
            b = mid;
            fb = fm;
        } else {
            a = mid;
        }
    }
    finish(a, iterations, true, Some((fb + target).round() as u64))
}
