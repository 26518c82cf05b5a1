//! Block importance from batch-norm scaling factors.
//!
//! `M_i` is the mean |gamma| over a block's prunable batch-norms and the
//! importance is `I_i = M_i / sum_j M_j`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ir::{ModelSnapshot, ParamRole};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockImportance {
    pub block_id: String,
    pub mean_abs_gamma: f64,
    pub importance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceVector {
    pub blocks: Vec<BlockImportance>,
}

impl ImportanceVector {
    pub fn get(&self, block_id: &str) -> Option<f64> {
        self.blocks.iter().find(|b| b.block_id == block_id).map(|b| b.importance)
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }
}

/// Mean |gamma| of one block's prunable batch-norms.
pub fn block_mean_abs_gamma(s: &ModelSnapshot, block_id: &str) -> Result<f64> {
    let block = s
        .block(block_id)
        .ok_or_else(|| Error::InvalidBlock {
            id: block_id.to_string(),
            detail: "no such block".into(),
        })?;
    if block.prunable_bn_ids.is_empty() {
        return Err(Error::BlockMissingBn(block.id.clone()));
    }
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for bn in &block.prunable_bn_ids {
        let gamma = s
            .param(bn, ParamRole::Gamma)
            .ok_or_else(|| Error::BlockMissingBn(block.id.clone()))?;
        sum += gamma.data.iter().map(|g| g.abs() as f64).sum::<f64>();
        count += gamma.data.len();
    }
    if count == 0 {
        return Err(Error::BlockMissingBn(block.id.clone()));
    }
    Ok(sum / count as f64)
}

pub fn block_importance(s: &ModelSnapshot) -> Result<ImportanceVector> {
    let means = s
        .blocks
        .iter()
        .map(|b| block_mean_abs_gamma(s, &b.id))
        .collect::<Result<Vec<_>>>()?;
    let total: f64 = means.iter().sum();
    if !s.blocks.is_empty() && !(total > 0.0) {
        return Err(Error::AllZeroGamma);
    }
    let blocks = s
        .blocks
        .iter()
        .zip(means)
        .map(|(b, m)| BlockImportance {
            block_id: b.id.clone(),
            mean_abs_gamma: m,
            importance: m / total,
        })
        .collect();
    Ok(ImportanceVector { blocks })
}

/// `max I - min I`; zero for fewer than two blocks.
pub fn importance_spread(v: &ImportanceVector) -> f64 {
    let mut it = v.blocks.iter().map(|b| b.importance);
    let Some(first) = it.next() else { return 0.0 };
    let (lo, hi) = it.fold((first, first), |(lo, hi), x| (lo.min(x), hi.max(x)));
    hi - lo
}

/// Mean |gamma| over every prunable batch-norm in the model.
pub fn global_mean_abs_gamma(s: &ModelSnapshot) -> f64 {
    let mut sum = 0.0f64;
    let mut n = 0usize;
    for b in &s.blocks {
        for bn in &b.prunable_bn_ids {
            if let Some(g) = s.param(bn, ParamRole::Gamma) {
                sum += g.data.iter().map(|x| x.abs() as f64).sum::<f64>();
                n += g.data.len();
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}
