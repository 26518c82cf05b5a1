#![allow(dead_code)]

use std::collections::HashMap;

use chanprune::cost::ChannelConfig;
use chanprune::ir::{BlockKind, BlockSpec, LayerKind, ModelSnapshot, ParamRole, SnapshotBuilder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random small chain of plain, residual and inverted-residual blocks with
/// optional pooling, ending in either global pooling or a flatten head.
pub fn random_arch(seed: u64) -> ModelSnapshot {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hw = rng.random_range(6..=12);
    let cin = rng.random_range(1..=3);
    let classes = rng.random_range(2..=5);
    let mut b = SnapshotBuilder::new("random", [cin, hw, hw], classes, seed);
    let (mut c, mut h) = (cin, hw);
    // Residual operands must not depend on a prunable channel count.
    let mut prunable_tail = false;
    let n = rng.random_range(1..=5);
    for i in 0..n {
        let kind = if i == 0 { 0 } else { rng.random_range(0..4) };
        let p = format!("b{i}");
        let id = |s: &str| format!("{p}.{s}");
        if (kind == 1 || kind == 2) && prunable_tail {
            b.conv(&id("stem.conv"), c, 1, 1, 0, false)
                .bn(&id("stem.bn"))
                .relu(&id("stem.act"));
        }
        match kind {
            0 => {
                let out = rng.random_range(2..=12);
                let k = if rng.random_bool(0.5) { 3 } else { 1 };
                let stride = if h >= 4 && rng.random_bool(0.3) { 2 } else { 1 };
                b.conv(&id("conv"), out, k, stride, k / 2, rng.random_bool(0.3))
                    .bn(&id("bn"))
                    .relu(&id("act"));
                b.plain_block(&id("conv"), &id("bn"), &[&id("act")]);
                c = out;
                h = (h + 2 * (k / 2) - k) / stride + 1;
                prunable_tail = true;
            }
            1 => {
                let block_in = b.last().unwrap().to_string();
                let mid = rng.random_range(2..=12);
                b.conv(&id("conv1"), mid, 3, 1, 1, false)
                    .bn(&id("bn1"))
                    .relu(&id("relu1"))
                    .conv(&id("conv2"), c, 3, 1, 1, false)
                    .bn(&id("bn2"))
                    .add(&id("add"), &block_in)
                    .relu(&id("relu2"));
                b.block(BlockSpec {
                    id: p.clone(),
                    kind: BlockKind::Residual,
                    layer_ids: ["conv1", "bn1", "relu1", "conv2", "bn2", "add", "relu2"].map(id).to_vec(),
                    prunable_bn_ids: vec![id("bn1")],
                    internal_prunable_layer_ids: vec![id("conv1")],
                });
                prunable_tail = false;
            }
            2 => {
                let block_in = b.last().unwrap().to_string();
                let t = rng.random_range(2..=4);
                b.conv(&id("expand.conv"), c * t, 1, 1, 0, false)
                    .bn(&id("expand.bn"))
                    .relu6(&id("expand.act"))
                    .depthwise(&id("dw.conv"), 3, 1, 1)
                    .bn(&id("dw.bn"))
                    .relu6(&id("dw.act"))
                    .conv(&id("project.conv"), c, 1, 1, 0, false)
                    .bn(&id("project.bn"))
                    .add(&id("add"), &block_in);
                b.block(BlockSpec {
                    id: p.clone(),
                    kind: BlockKind::InvertedResidual,
                    layer_ids: [
                        "expand.conv", "expand.bn", "expand.act", "dw.conv", "dw.bn", "dw.act",
                        "project.conv", "project.bn", "add",
                    ]
                    .map(id)
                    .to_vec(),
                    prunable_bn_ids: vec![id("expand.bn"), id("dw.bn")],
                    internal_prunable_layer_ids: vec![id("expand.conv")],
                });
                prunable_tail = false;
            }
            _ if h >= 4 => {
                if rng.random_bool(0.5) {
                    b.max_pool(&p, 2, 2);
                } else {
                    b.avg_pool(&p, 2, 2);
                }
                h /= 2;
            }
            _ => {}
        }
    }
    if rng.random_bool(0.5) {
        b.global_avg_pool("gap");
    }
    b.flatten("flatten").fc("fc", classes, true);
    b.finish().expect("random arch is valid")
}

/// Random keep counts for every prunable layer.
pub fn random_config(s: &ModelSnapshot, seed: u64) -> ChannelConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = ChannelConfig::new();
    for b in &s.blocks {
        for l in &b.internal_prunable_layer_ids {
            cfg.set(l.clone(), rng.random_range(1..=s.layers[l].out_channels));
        }
    }
    cfg
}

/// Overwrites every prunable gamma with seeded values in `[-1, 1]`.
pub fn randomize_gammas(s: &mut ModelSnapshot, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bns: Vec<String> = s.blocks.iter().flat_map(|b| b.prunable_bn_ids.clone()).collect();
    for bn in bns {
        let g = s.tensors.get_mut(&format!("{bn}.gamma")).unwrap();
        for v in &mut g.data {
            *v = rng.random_range(-1.0..1.0);
        }
    }
}

fn input_of(s: &ModelSnapshot, idx: usize) -> Option<String> {
    let spec = &s.layers[idx];
    spec.input.clone().or_else(|| (idx > 0).then(|| s.layers[idx - 1].id.clone()))
}

/// Counts multiply-accumulates by walking every output element and kernel tap.
pub fn mac_oracle(s: &ModelSnapshot, cfg: &ChannelConfig) -> u64 {
    let mut dims: HashMap<String, (usize, usize, usize)> = HashMap::new();
    let [ic, ih, iw] = s.input_shape;
    let mut macs = 0u64;
    for (i, spec) in s.layers.values().enumerate() {
        let (c, h, w) = match input_of(s, i) {
            Some(id) => dims[&id],
            None => (ic, ih, iw),
        };
        let win = |k: usize, st: usize, p: usize, len: usize| (len + 2 * p - k) / st + 1;
        let out = match spec.kind {
            LayerKind::Conv => {
                let co = cfg.get(&spec.id).unwrap_or(spec.out_channels);
                let (oh, ow) = (
                    win(spec.kernel.0, spec.stride.0, spec.padding.0, h),
                    win(spec.kernel.1, spec.stride.1, spec.padding.1, w),
                );
                for _ in 0..co {
                    for _ in 0..oh * ow {
                        for _ in 0..c {
                            for _ in 0..spec.kernel.0 * spec.kernel.1 {
                                macs += 1;
                            }
                        }
                    }
                }
                (co, oh, ow)
            }
            LayerKind::DepthwiseConv => {
                let (oh, ow) = (
                    win(spec.kernel.0, spec.stride.0, spec.padding.0, h),
                    win(spec.kernel.1, spec.stride.1, spec.padding.1, w),
                );
                for _ in 0..c * oh * ow {
                    for _ in 0..spec.kernel.0 * spec.kernel.1 {
                        macs += 1;
                    }
                }
                (c, oh, ow)
            }
            LayerKind::MaxPool | LayerKind::AvgPool => (
                c,
                win(spec.kernel.0, spec.stride.0, 0, h),
                win(spec.kernel.1, spec.stride.1, 0, w),
            ),
            LayerKind::GlobalAvgPool => (c, 1, 1),
            LayerKind::Flatten => (c * h * w, 1, 1),
            LayerKind::FullyConnected => {
                for _ in 0..spec.out_channels {
                    for _ in 0..c {
                        macs += 1;
                    }
                }
                (spec.out_channels, 1, 1)
            }
            _ => (c, h, w),
        };
        dims.insert(spec.id.clone(), out);
    }
    macs
}

/// `i` is kept iff fewer than `k` indices beat it (higher score, or equal
/// score at a lower index).
pub fn rank_count_top_k(scores: &[f64], k: usize) -> Vec<usize> {
    (0..scores.len())
        .filter(|&i| {
            let beaten = (0..scores.len())
                .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
                .count();
            beaten < k
        })
        .collect()
}

pub fn objective(points: &[Vec<f64>], x: &[f64]) -> f64 {
    points
        .iter()
        .map(|p| p.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
        .sum()
}

/// Minimizes the summed distance by repeatedly zooming a 21-point-per-axis
/// grid onto the best cell.
pub fn grid_geometric_median(points: &[Vec<f64>]) -> Vec<f64> {
    let d = points[0].len();
    let mut lo: Vec<f64> = (0..d).map(|j| points.iter().map(|p| p[j]).fold(f64::INFINITY, f64::min)).collect();
    let mut hi: Vec<f64> = (0..d).map(|j| points.iter().map(|p| p[j]).fold(f64::NEG_INFINITY, f64::max)).collect();
    const N: usize = 21;
    let mut best = lo.clone();
    for _ in 0..80 {
        let step: Vec<f64> = (0..d).map(|j| (hi[j] - lo[j]) / (N - 1) as f64).collect();
        let mut best_val = f64::INFINITY;
        for flat in 0..N.pow(d as u32) {
            let mut x = vec![0.0; d];
            let mut r = flat;
            for j in 0..d {
                x[j] = lo[j] + step[j] * (r % N) as f64;
                r /= N;
            }
            let v = objective(points, &x);
            if v < best_val {
                best_val = v;
                best = x;
            }
        }
        for j in 0..d {
            lo[j] = best[j] - 2.0 * step[j];
            hi[j] = best[j] + 2.0 * step[j];
        }
    }
    best
}

/// Layers reading `id` directly.
pub fn consumers(s: &ModelSnapshot, id: &str) -> Vec<usize> {
    (0..s.layers.len())
        .filter(|&i| input_of(s, i).as_deref() == Some(id) || s.layers[i].skip.as_deref() == Some(id))
        .collect()
}

/// Batch-norm reading `id` directly, if any.
pub fn bn_reading(s: &ModelSnapshot, id: &str) -> Option<String> {
    consumers(s, id)
        .into_iter()
        .map(|i| &s.layers[i])
        .find(|l| l.kind == LayerKind::BatchNorm)
        .map(|l| l.id.clone())
}

/// Copy of `s` where every weight reading a dropped channel is zeroed, so
/// dropped channels cannot influence the output.
pub fn mask_dropped_channels(s: &ModelSnapshot, kept: &HashMap<String, Vec<usize>>) -> ModelSnapshot {
    let mut out = s.clone();
    let mut mask: HashMap<String, Vec<bool>> = HashMap::new();
    let mut spatial: HashMap<String, usize> = HashMap::new();
    let [ic, ih, iw] = s.input_shape;
    let input_mask = vec![true; ic];
    for (i, spec) in s.layers.values().enumerate() {
        let src = input_of(s, i);
        let (m_in, hw_in) = match &src {
            Some(id) => (mask[id].clone(), spatial[id]),
            None => (input_mask.clone(), ih * iw),
        };
        let win = |len: usize, k: usize, st: usize, p: usize| (len + 2 * p - k) / st + 1;
        let side = (hw_in as f64).sqrt() as usize;
        let (m_out, hw_out) = match spec.kind {
            LayerKind::Conv | LayerKind::FullyConnected => {
                let w = out.tensors.get_mut(&format!("{}.weight", spec.id)).unwrap();
                let row = w.data.len() / spec.out_channels;
                let per_in = row / spec.in_channels;
                for o in 0..spec.out_channels {
                    for (ci, &alive) in m_in.iter().enumerate() {
                        if !alive {
                            w.data[o * row + ci * per_in..o * row + (ci + 1) * per_in].fill(0.0);
                        }
                    }
                }
                let m = match kept.get(&spec.id) {
                    Some(k) => (0..spec.out_channels).map(|c| k.contains(&c)).collect(),
                    None => vec![true; spec.out_channels],
                };
                let hw = if spec.kind == LayerKind::Conv {
                    let o = win(side, spec.kernel.0, spec.stride.0, spec.padding.0);
                    o * o
                } else {
                    1
                };
                (m, hw)
            }
            LayerKind::DepthwiseConv => {
                let o = win(side, spec.kernel.0, spec.stride.0, spec.padding.0);
                (m_in, o * o)
            }
            LayerKind::MaxPool | LayerKind::AvgPool => {
                let o = win(side, spec.kernel.0, spec.stride.0, 0);
                (m_in, o * o)
            }
            LayerKind::GlobalAvgPool => (m_in, 1),
            LayerKind::Flatten => (m_in.iter().flat_map(|&a| std::iter::repeat_n(a, hw_in)).collect(), 1),
            LayerKind::AddResidual => (vec![true; m_in.len()], hw_in),
            _ => (m_in, hw_in),
        };
        mask.insert(spec.id.clone(), m_out);
        spatial.insert(spec.id.clone(), hw_out);
    }
    assert!(s.input_shape[1] == s.input_shape[2], "square inputs only");
    out
}

pub fn gamma(s: &ModelSnapshot, bn: &str) -> Vec<f32> {
    s.param(bn, ParamRole::Gamma).unwrap().data.clone()
}

/// Short recipe on the 4-class synthetic fixture.
pub fn tiny_pipeline(out_dir: &std::path::Path) -> chanprune::pipeline::PipelineConfig {
    use chanprune::trainer::{LrSchedule, TrainConfig};
    let quick = |epochs| TrainConfig {
        epochs,
        batch_size: 32,
        lr: LrSchedule::Cosine { initial: 0.05 },
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let mut cfg = chanprune::pipeline::PipelineConfig::default();
    cfg.out_dir = out_dir.to_path_buf();
    cfg.data.calib_size = 256;
    cfg.sparse = quick(4);
    cfg.finetune = TrainConfig { sparsity: 0.0, ..quick(2) };
    cfg
}
