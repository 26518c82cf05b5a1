//! Channel selection and weight inheritance for a pruned configuration.

use std::cmp::Ordering;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::{resolve, ChannelConfig};
use crate::data::DataSlice;
use crate::engine::{evaluate_accuracy, recalibrate_bn};
use crate::error::{Error, Result};
use crate::ir::{fresh_layer_tensors, param_name, LayerKind, ModelSnapshot, ParamRole, Source};
use crate::tensor::Tensor;

pub const GM_TOL: f64 = 1e-8;
pub const GM_MAX_ITERS: usize = 1000;

/// Weight-inheritance criteria, in tie-break order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    L1Norm,
    BnWeights,
    GeometricMedian,
    RandomInit,
}

impl Criterion {
    pub const ALL: [Criterion; 4] = [
        Criterion::L1Norm,
        Criterion::BnWeights,
        Criterion::GeometricMedian,
        Criterion::RandomInit,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Criterion::L1Norm => "l1_norm",
            Criterion::BnWeights => "bn_weights",
            Criterion::GeometricMedian => "geometric_median",
            Criterion::RandomInit => "random_init",
        }
    }

    /// Accepts the long names and the short forms `l1`, `bn`, `gm`, `random`.
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "l1" => Some(Criterion::L1Norm),
            "bn" => Some(Criterion::BnWeights),
            "gm" => Some(Criterion::GeometricMedian),
            "random" => Some(Criterion::RandomInit),
            _ => Self::ALL.into_iter().find(|c| c.as_str() == s),
        }
    }
}

/// Kept original output-channel indices per prunable layer, sorted ascending.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ChannelSelection {
    pub kept: IndexMap<String, Vec<usize>>,
}

fn cmp_f64(a: f64, b: f64) -> Ordering {
    a.partial_cmp(&b).unwrap_or(Ordering::Equal)
}

/// Indices of the `k` largest scores; ties keep the lower index. Sorted ascending.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| cmp_f64(scores[b], scores[a]).then(a.cmp(&b)));
    let mut kept = idx[..k.min(idx.len())].to_vec();
    kept.sort_unstable();
    kept
}

/// Keeps all but the `c - k` rows closest to the rows' geometric median.
/// Among equal distances the lower index is pruned first.
pub fn gm_keep(rows: &[Vec<f64>], k: usize) -> Vec<usize> {
    let gm = geometric_median(rows, GM_TOL, GM_MAX_ITERS);
    let dist: Vec<f64> = rows.iter().map(|r| euclid(r, &gm)).collect();
    let mut idx: Vec<usize> = (0..rows.len()).collect();
    idx.sort_by(|&a, &b| cmp_f64(dist[a], dist[b]).then(a.cmp(&b)));
    let prune = rows.len().saturating_sub(k);
    let mut kept = idx[prune..].to_vec();
    kept.sort_unstable();
    kept
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Sum of distances from `x` to every point.
pub fn gm_objective(points: &[Vec<f64>], x: &[f64]) -> f64 {
    points.iter().map(|p| euclid(p, x)).sum()
}

/// Weiszfeld iteration for the point minimizing the summed Euclidean
/// distance to `points`.
///
/// One point returns itself and two return their midpoint. When an iterate
/// lands on a data point the search restarts once from the coordinate-wise
/// median shifted by 1e-6; a second landing returns that data point.
pub fn geometric_median(points: &[Vec<f64>], tol: f64, max_iters: usize) -> Vec<f64> {
    assert!(!points.is_empty(), "geometric median of an empty set");
    let dim = points[0].len();
    if points.len() == 1 {
        return points[0].clone();
    }
    if points.len() == 2 {
        return points[0].iter().zip(&points[1]).map(|(a, b)| 0.5 * (a + b)).collect();
    }
    let mut x: Vec<f64> = (0..dim)
        .map(|d| points.iter().map(|p| p[d]).sum::<f64>() / points.len() as f64)
        .collect();
    let mut restarted = false;
    let mut iters = 0;
    while iters < max_iters {
        iters += 1;
        if let Some(hit) = points.iter().find(|p| euclid(p, &x) < tol) {
            if restarted {
                x = hit.clone();
                break;
            }
            restarted = true;
            x = coordinate_median(points).into_iter().map(|v| v + 1e-6).collect();
            continue;
        }
        let mut num = vec![0.0; dim];
        let mut den = 0.0;
        for p in points {
            let w = 1.0 / euclid(p, &x);
            den += w;
            num.iter_mut().zip(p).for_each(|(n, v)| *n += w * v);
        }
        let next: Vec<f64> = num.into_iter().map(|n| n / den).collect();
        let step = euclid(&next, &x);
        x = next;
        if step < tol {
            break;
        }
    }
    // A data point can beat a slowly converging iterate.
    let mut best = gm_objective(points, &x);
    for p in points {
        let f = gm_objective(points, p);
        if f < best {
            best = f;
            x = p.clone();
        }
    }
    x
}

fn coordinate_median(points: &[Vec<f64>]) -> Vec<f64> {
    (0..points[0].len())
        .map(|d| {
            let mut col: Vec<f64> = points.iter().map(|p| p[d]).collect();
            col.sort_by(|a, b| cmp_f64(*a, *b));
            let m = col.len() / 2;
            if col.len() % 2 == 1 {
                col[m]
            } else {
                0.5 * (col[m - 1] + col[m])
            }
        })
        .collect()
}

fn filter_rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.data.chunks(t.row_len().max(1)).map(|r| r.iter().map(|&v| v as f64).collect()).collect()
}

/// Picks the kept output channels of every prunable layer under `cfg`.
///
/// `bn_weights` ranks by the |gamma| of the batch-norm reading the layer and
/// falls back to l1 norms for a layer with none. `random_init` keeps the
/// leading channels; its weights are redrawn anyway.
pub fn select_channels(s: &ModelSnapshot, cfg: &ChannelConfig, crit: Criterion) -> Result<ChannelSelection> {
    let topo = resolve(s, cfg)?;
    let mut sel = ChannelSelection::default();
    for (i, spec) in s.layers.values().enumerate() {
        if !spec.prunable {
            continue;
        }
        let c = spec.out_channels;
        let k = topo.out_dims[i].c;
        let w = s.param(&spec.id, ParamRole::Weight).expect("validated layer has weights");
        let l1 = || -> Vec<f64> {
            w.data.chunks(w.row_len().max(1)).map(|r| r.iter().map(|v| v.abs() as f64).sum()).collect()
        };
        let kept = match crit {
            Criterion::L1Norm => top_k(&l1(), k),
            Criterion::BnWeights => match s.bn_after(&topo, i) {
                Some(j) => {
                    let g = s.param(&s.layers[j].id, ParamRole::Gamma).expect("bn gamma");
                    top_k(&g.data.iter().map(|v| v.abs() as f64).collect::<Vec<_>>(), k)
                }
                None => top_k(&l1(), k),
            },
            Criterion::GeometricMedian => {
                if k == c {
                    (0..c).collect()
                } else {
                    gm_keep(&filter_rows(w), k)
                }
            }
            Criterion::RandomInit => (0..k).collect(),
        };
        sel.kept.insert(spec.id.clone(), kept);
    }
    Ok(sel)
}

fn slice_axis(t: &Tensor, axis: usize, keep: &[usize]) -> Tensor {
    let outer: usize = t.shape[..axis].iter().product();
    let inner: usize = t.shape[axis + 1..].iter().product();
    let dim = t.shape[axis];
    let mut data = Vec::with_capacity(outer * keep.len() * inner);
    for o in 0..outer {
        for &k in keep {
            let start = (o * dim + k) * inner;
            data.extend_from_slice(&t.data[start..start + inner]);
        }
    }
    let mut shape = t.shape.clone();
    shape[axis] = keep.len();
    Tensor { shape, data }
}

/// Builds the pruned snapshot: weights are sliced by the selection (or, for
/// `random_init`, freshly drawn from `seed`).
pub fn build_pruned_snapshot(
    s: &ModelSnapshot,
    cfg: &ChannelConfig,
    sel: &ChannelSelection,
    crit: Criterion,
    seed: u64,
) -> Result<ModelSnapshot> {
    let topo = resolve(s, cfg)?;
    let bad = |id: &str, detail: String| Error::InconsistentSelection { id: id.to_string(), detail };
    for id in sel.kept.keys() {
        match s.layer(id) {
            Some(l) if l.prunable => {}
            _ => return Err(bad(id, "not a prunable layer".into())),
        }
    }
    let input = s.input_dims();
    // Kept output indices per layer; `None` keeps everything.
    let mut keep: Vec<Option<Vec<usize>>> = Vec::with_capacity(s.layers.len());
    let mut out = ModelSnapshot {
        layers: IndexMap::with_capacity(s.layers.len()),
        tensors: IndexMap::with_capacity(s.tensors.len()),
        ..s.clone()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (i, spec) in s.layers.values().enumerate() {
        let src_keep: Option<Vec<usize>> = match topo.sources[i] {
            Source::Input => None,
            Source::Layer(j) => keep[j].clone(),
        };
        let src_dims = topo.source_dims(topo.sources[i], input);
        let mine: Option<Vec<usize>> = match spec.kind {
            LayerKind::Conv | LayerKind::FullyConnected if spec.prunable => {
                let want = topo.out_dims[i].c;
                match sel.kept.get(&spec.id) {
                    None if want == spec.out_channels => None,
                    None => return Err(bad(&spec.id, format!("config keeps {want} channels but no selection given"))),
                    Some(k) => {
                        if k.len() != want {
                            return Err(bad(&spec.id, format!("{} indices for {want} channels", k.len())));
                        }
                        if k.windows(2).any(|w| w[0] >= w[1]) || k.last().is_some_and(|&l| l >= spec.out_channels) {
                            return Err(bad(&spec.id, "indices must be unique, ascending and in range".into()));
                        }
                        (k.len() != spec.out_channels).then(|| k.clone())
                    }
                }
            }
            LayerKind::Conv | LayerKind::FullyConnected => None,
            LayerKind::Flatten => src_keep.as_ref().map(|k| {
                let plane = src_dims.h * src_dims.w;
                k.iter().flat_map(|&c| c * plane..(c + 1) * plane).collect()
            }),
            LayerKind::AddResidual => {
                let skip_keep = topo.skips[i].and_then(|j| keep[j].clone());
                if src_keep.is_some() || skip_keep.is_some() {
                    return Err(bad(&spec.id, "residual operand would be pruned".into()));
                }
                None
            }
            _ => src_keep.clone(),
        };

        let mut new_spec = spec.clone();
        new_spec.in_channels = topo.in_dims[i].c;
        new_spec.out_channels = topo.out_dims[i].c;

        if crit == Criterion::RandomInit {
            for (name, t) in fresh_layer_tensors(&new_spec, &mut rng) {
                out.tensors.insert(name, t);
            }
        } else {
            for (role, _) in crate::ir::expected_params(spec) {
                let name = param_name(&spec.id, role);
                let mut t = s.tensors[&name].clone();
                if let Some(k) = mine.as_deref() {
                    t = slice_axis(&t, 0, k);
                }
                if role == ParamRole::Weight && spec.kind.defines_channels() {
                    if let Some(k) = src_keep.as_deref() {
                        t = slice_axis(&t, 1, k);
                    }
                }
                out.tensors.insert(name, t);
            }
        }
        out.layers.insert(spec.id.clone(), new_spec);
        keep.push(mine);
    }
    out.validate()?;
    Ok(out)
}

/// Builds the pruned snapshot for one criterion.
pub fn inherit(s: &ModelSnapshot, cfg: &ChannelConfig, crit: Criterion, seed: u64) -> Result<ModelSnapshot> {
    let sel = select_channels(s, cfg, crit)?;
    build_pruned_snapshot(s, cfg, &sel, crit, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriterionScore {
    pub criterion: Criterion,
    /// Validation top-1 after batch-norm recalibration.
    pub recalibrated_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct AdaptiveOutcome {
    pub chosen: Criterion,
    pub snapshot: ModelSnapshot,
    pub table: Vec<CriterionScore>,
}

/// Builds and recalibrates one candidate per criterion, scores each on
/// `val`, and returns the best (ties go to the earlier criterion).
pub fn adaptive_inherit(
    s: &ModelSnapshot,
    cfg: &ChannelConfig,
    calib: &DataSlice,
    val: &DataSlice,
    seed: u64,
) -> Result<AdaptiveOutcome> {
    adaptive_inherit_among(s, cfg, calib, val, seed, &Criterion::ALL)
}

pub fn adaptive_inherit_among(
    s: &ModelSnapshot,
    cfg: &ChannelConfig,
    calib: &DataSlice,
    val: &DataSlice,
    seed: u64,
    criteria: &[Criterion],
) -> Result<AdaptiveOutcome> {
    calib.require_non_empty()?;
    val.require_non_empty()?;
    let mut results: Vec<(Criterion, ModelSnapshot, f64)> = criteria
        .par_iter()
        .map(|&crit| {
            let pruned = inherit(s, cfg, crit, seed)?;
            let recal = recalibrate_bn(&pruned, calib)?;
            let acc = evaluate_accuracy(&recal, val)?;
            Ok((crit, recal, acc))
        })
        .collect::<Result<_>>()?;
    results.sort_by_key(|r| r.0);
    let table = results
        .iter()
        .map(|(c, _, a)| CriterionScore {
            criterion: *c,
            recalibrated_accuracy: *a,
        })
        .collect();
    let best = results
        .iter()
        .enumerate()
        .fold(0, |b, (i, r)| if r.2 > results[b].2 { i } else { b });
    let (chosen, snapshot, _) = results.swap_remove(best);
    Ok(AdaptiveOutcome { chosen, snapshot, table })
}
