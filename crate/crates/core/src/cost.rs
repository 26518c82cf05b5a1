//! FLOPs and parameter counts under a channel configuration.
//!
//! FLOPs are multiply-accumulates: conv `c_in * c_out * kH * kW * H_out * W_out`,
//! depthwise `c * kH * kW * H_out * W_out`, fully connected `in * out`.
//! Batch-norm, activations, pooling and residual adds cost nothing.

use std::collections::BTreeMap;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ir::{LayerKind, ModelSnapshot, Topology};

/// Output channel count per layer. Layers not listed keep their original count.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ChannelConfig {
    pub channels: BTreeMap<String, usize>,
}

impl ChannelConfig {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: &str) -> Option<usize> {
        self.channels.get(id).copied()
    }

    pub fn set(&mut self, id: impl Into<String>, c: usize) {
        self.channels.insert(id.into(), c);
    }

    /// Channel count of `id` under this config, falling back to `original`.
    pub fn channels_or(&self, id: &str, original: usize) -> usize {
        self.get(id).unwrap_or(original)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub flops: u64,
    pub params: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub flops: u64,
    pub params: u64,
    pub per_layer: IndexMap<String, LayerCost>,
    /// Output (H, W) per layer.
    pub spatial: IndexMap<String, (usize, usize)>,
}

/// Checks `cfg` against `s` and propagates activation sizes under it.
pub fn resolve(s: &ModelSnapshot, cfg: &ChannelConfig) -> Result<Topology> {
    for (id, &c) in &cfg.channels {
        let spec = s.layer(id).ok_or_else(|| Error::UnknownConfigLayer(id.clone()))?;
        if c == 0 {
            return Err(Error::ZeroChannels(id.clone()));
        }
        if spec.kind.defines_channels() {
            if spec.prunable && c > spec.out_channels {
                return Err(Error::InvalidConfig {
                    id: id.clone(),
                    detail: format!("{c} channels exceeds the original {}", spec.out_channels),
                });
            }
            if !spec.prunable && c != spec.out_channels {
                return Err(Error::InvalidConfig {
                    id: id.clone(),
                    detail: format!("layer is not prunable; must keep {} channels", spec.out_channels),
                });
            }
        }
    }
    let topo = s.propagate(|spec| cfg.channels_or(&spec.id, spec.out_channels))?;
    for (i, spec) in s.layers.values().enumerate() {
        if let Some(c) = cfg.get(&spec.id) {
            if c != topo.out_dims[i].c {
                return Err(Error::InvalidConfig {
                    id: spec.id.clone(),
                    detail: format!("{c} channels but its input fixes {}", topo.out_dims[i].c),
                });
            }
        }
    }
    Ok(topo)
}

pub fn evaluate_cost(s: &ModelSnapshot, cfg: &ChannelConfig) -> Result<CostReport> {
    let topo = resolve(s, cfg)?;
    let mut report = CostReport::default();
    for (i, spec) in s.layers.values().enumerate() {
        let din = topo.in_dims[i];
        let dout = topo.out_dims[i];
        let (kh, kw) = (spec.kernel.0 as u64, spec.kernel.1 as u64);
        let (cin, cout) = (din.c as u64, dout.c as u64);
        let hw = (dout.h * dout.w) as u64;
        let bias = |n: u64| if spec.has_bias { n } else { 0 };
        let lc = match spec.kind {
            LayerKind::Conv => LayerCost {
                flops: cin * cout * kh * kw * hw,
                params: cin * cout * kh * kw + bias(cout),
            },
            LayerKind::DepthwiseConv => LayerCost {
                flops: cout * kh * kw * hw,
                params: cout * kh * kw + bias(cout),
            },
            LayerKind::FullyConnected => LayerCost {
                flops: cin * cout,
                params: cin * cout + bias(cout),
            },
            LayerKind::BatchNorm => LayerCost {
                flops: 0,
                params: 2 * cout,
            },
            _ => LayerCost::default(),
        };
        report.flops += lc.flops;
        report.params += lc.params;
        report.per_layer.insert(spec.id.clone(), lc);
        report.spatial.insert(spec.id.clone(), (dout.h, dout.w));
    }
    Ok(report)
}

pub fn baseline_cost(s: &ModelSnapshot) -> Result<CostReport> {
    evaluate_cost(s, &ChannelConfig::new())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{builtin_arch, SnapshotBuilder};

    fn single_conv(cin: usize, cout: usize, k: usize, hw: usize) -> ModelSnapshot {
        let mut b = SnapshotBuilder::new("one", [cin, hw, hw], 2, 0);
        b.conv("c", cout, k, 1, k / 2, false).bn("bn");
        b.plain_block("c", "bn", &[]);
        b.finish().unwrap()
    }

    #[test]
    fn single_mac_conv() {
        let r = baseline_cost(&single_conv(1, 1, 1, 1)).unwrap();
        assert_eq!(r.flops, 1);
    }

    #[test]
    fn rgb_conv_at_32x32() {
        let r = baseline_cost(&single_conv(3, 16, 3, 32)).unwrap();
        assert_eq!(r.flops, 442_368);
        assert_eq!(r.spatial["c"], (32, 32));
    }

    #[test]
    fn empty_model_costs_nothing() {
        let s = ModelSnapshot::empty("e", [3, 8, 8], 2);
        let r = baseline_cost(&s).unwrap();
        assert_eq!((r.flops, r.params), (0, 0));
    }

    #[test]
    fn config_errors() {
        let s = single_conv(3, 8, 3, 8);
        let mut cfg = ChannelConfig::new();
        cfg.set("nope", 2);
        assert!(matches!(evaluate_cost(&s, &cfg), Err(Error::UnknownConfigLayer(_))));
        let mut cfg = ChannelConfig::new();
        cfg.set("c", 0);
        assert!(matches!(evaluate_cost(&s, &cfg), Err(Error::ZeroChannels(_))));
        let mut cfg = ChannelConfig::new();
        cfg.set("c", 9);
        assert!(matches!(evaluate_cost(&s, &cfg), Err(Error::InvalidConfig { .. })));
        let mut cfg = ChannelConfig::new();
        cfg.set("bn", 4);
        assert!(matches!(evaluate_cost(&s, &cfg), Err(Error::InvalidConfig { .. })));
    }

    #[test]
    fn non_prunable_layer_cannot_shrink() {
        let s = builtin_arch("tiny_vgg", 4, [3, 16, 16], 0).unwrap();
        let mut cfg = ChannelConfig::new();
        cfg.set("fc", 2);
        assert!(matches!(evaluate_cost(&s, &cfg), Err(Error::InvalidConfig { .. })));
    }

    #[test]
    fn halving_a_conv_chain_quarters_internal_cost() {
        let s = builtin_arch("tiny_vgg", 4, [3, 16, 16], 0).unwrap();
        let base = baseline_cost(&s).unwrap();
        let mut cfg = ChannelConfig::new();
        for b in &s.blocks {
            for l in &b.internal_prunable_layer_ids {
                cfg.set(l.clone(), s.layers[l].out_channels / 2);
            }
        }
        let half = evaluate_cost(&s, &cfg).unwrap();
        for id in ["conv1_2.conv", "conv1_3.conv", "conv1_4.conv"] {
            let ratio = half.per_layer[id].flops as f64 / base.per_layer[id].flops as f64;
            assert_eq!(ratio, 0.25, "{id}");
        }
        assert_eq!(
            half.per_layer["conv1_1.conv"].flops * 2,
            base.per_layer["conv1_1.conv"].flops
        );
    }

    #[test]
    fn totals_are_sums_of_layers() {
        let s = builtin_arch("tiny_ir", 4, [3, 16, 16], 0).unwrap();
        let r = baseline_cost(&s).unwrap();
        assert_eq!(r.flops, r.per_layer.values().map(|c| c.flops).sum::<u64>());
        assert_eq!(r.params, r.per_layer.values().map(|c| c.params).sum::<u64>());
    }
}
