//! Forward, backward, batch-norm recalibration and evaluation for
//! [`ModelSnapshot`] graphs.

mod kernels;
mod real;

use std::borrow::Cow;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::data::DataSlice;
use crate::error::{Error, Result};
use crate::ir::{param_name, Dims, LayerKind, LayerSpec, ModelSnapshot, ParamRole, Source, Topology};
use crate::tensor::Tensor;
use kernels::Window;
pub use real::Real;

/// Samples per forward call in evaluation and recalibration.
pub const EVAL_CHUNK: usize = 256;
/// Default calibration-slice size for batch-norm recalibration.
pub const DEFAULT_CALIB_SIZE: usize = 2048;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EngineOptions {
    pub bn_eps: f64,
    pub bn_momentum: f64,
    /// Fail on non-finite activations.
    pub checked: bool,
}

impl Default for EngineOptions {
    fn default() -> Self {
        Self {
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            checked: true,
        }
    }
}

/// Updated running statistics produced by a train-mode forward.
#[derive(Clone, Debug, PartialEq)]
pub struct BnUpdate {
    pub layer_id: String,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
}

enum Aux<T> {
    None,
    Bn { xhat: Vec<T>, inv_std: Vec<T> },
    MaxArg(Vec<u32>),
}

/// Gradients keyed by tensor name.
pub type Gradients<T = f32> = IndexMap<String, Vec<T>>;

/// Intermediates of one forward pass.
pub struct ForwardCache<'a, T: Real = f32> {
    snap: &'a ModelSnapshot,
    topo: Topology,
    params: IndexMap<String, Cow<'a, [T]>>,
    mode: Mode,
    batch: usize,
    input: Vec<T>,
    outputs: Vec<Option<Vec<T>>>,
    aux: Vec<Aux<T>>,
    pub bn_updates: Vec<BnUpdate>,
}

impl<'a, T: Real> ForwardCache<'a, T> {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Logits, batch x num_classes.
    pub fn logits(&self) -> &[T] {
        self.outputs
            .last()
            .and_then(|o| o.as_deref())
            .expect("forward always keeps the final output")
    }

    pub fn logits_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.batch, self.snap.num_classes],
            self.logits().iter().map(|v| v.as_f64() as f32).collect(),
        )
    }

    fn param(&self, id: &str, role: ParamRole) -> &[T] {
        &self.params[&param_name(id, role)]
    }
}

fn window(spec: &LayerSpec) -> Window {
    Window {
        kh: spec.kernel.0,
        kw: spec.kernel.1,
        sh: spec.stride.0,
        sw: spec.stride.1,
        ph: spec.padding.0,
        pw: spec.padding.1,
    }
}

fn check_batch(s: &ModelSnapshot, batch: &Tensor) -> Result<usize> {
    let [c, h, w] = s.input_shape;
    if batch.rank() != 4 || batch.shape[1..] != [c, h, w] || batch.shape[0] == 0 {
        return Err(Error::ShapeMismatch {
            id: "<input>".into(),
            detail: format!("batch shape {:?}, model expects [N, {c}, {h}, {w}] with N >= 1", batch.shape),
        });
    }
    let out_ok = s
        .topology()?
        .out_dims
        .last()
        .is_some_and(|d| *d == Dims { c: s.num_classes, h: 1, w: 1 });
    if !out_ok {
        return Err(Error::ShapeMismatch {
            id: "<output>".into(),
            detail: format!("model does not end in {} logits", s.num_classes),
        });
    }
    Ok(batch.shape[0])
}

fn load_params<T: Real>(s: &ModelSnapshot) -> IndexMap<String, Cow<'_, [T]>> {
    s.tensors.iter().map(|(k, t)| (k.clone(), T::from_f32_slice(&t.data))).collect()
}

/// Forward in f32 with default options.
pub fn forward<'a>(s: &'a ModelSnapshot, batch: &Tensor, mode: Mode) -> Result<ForwardCache<'a, f32>> {
    forward_with(s, batch, mode, &EngineOptions::default())
}

/// Forward in any engine scalar.
pub fn forward_with<'a, T: Real>(
    s: &'a ModelSnapshot,
    batch: &Tensor,
    mode: Mode,
    opts: &EngineOptions,
) -> Result<ForwardCache<'a, T>> {
    let n = check_batch(s, batch)?;
    let mut cache = ForwardCache {
        snap: s,
        topo: s.topology()?,
        params: load_params(s),
        mode,
        batch: n,
        input: T::from_f32_slice(&batch.data).into_owned(),
        outputs: Vec::new(),
        aux: Vec::new(),
        bn_updates: Vec::new(),
    };
    run_layers(&mut cache, s.layers.len(), opts)?;
    Ok(cache)
}

/// Index after which each activation is no longer read.
fn last_uses(topo: &Topology, n_layers: usize) -> Vec<usize> {
    let mut last = vec![0usize; n_layers];
    for i in 0..n_layers {
        last[i] = last[i].max(i);
        if let Source::Layer(j) = topo.sources[i] {
            last[j] = last[j].max(i);
        }
        if let Some(j) = topo.skips[i] {
            last[j] = last[j].max(i);
        }
    }
    if let Some(l) = last.last_mut() {
        *l = usize::MAX;
    }
    last
}

/// Executes layers `0..end`. Eval mode frees activations after their last read.
fn run_layers<T: Real>(cache: &mut ForwardCache<'_, T>, end: usize, opts: &EngineOptions) -> Result<()> {
    let s = cache.snap;
    let n = cache.batch;
    let last = last_uses(&cache.topo, s.layers.len());
    let input_dims = s.input_dims();
    for (i, spec) in s.layers.values().enumerate().take(end) {
        let src = cache.topo.sources[i];
        let din = cache.topo.in_dims[i];
        let dout = cache.topo.out_dims[i];
        let x: &[T] = match src {
            Source::Input => &cache.input,
            Source::Layer(j) => cache.outputs[j].as_deref().expect("activation freed before last use"),
        };
        debug_assert_eq!(x.len(), n * cache.topo.source_dims(src, input_dims).numel());
        let bias = spec.has_bias.then(|| cache.param(&spec.id, ParamRole::Bias));
        let mut aux = Aux::None;
        let mut update = None;
        let y = match spec.kind {
            LayerKind::Conv => kernels::conv_forward(
                x, n, din, dout, window(spec), cache.param(&spec.id, ParamRole::Weight), bias,
            ),
            LayerKind::DepthwiseConv => kernels::depthwise_forward(
                x, n, din, dout, window(spec), cache.param(&spec.id, ParamRole::Weight), bias,
            ),
            LayerKind::FullyConnected => kernels::fc_forward(
                x, n, din.c, dout.c, cache.param(&spec.id, ParamRole::Weight), bias,
            ),
            LayerKind::BatchNorm => {
                let gamma = cache.param(&spec.id, ParamRole::Gamma);
                let beta = cache.param(&spec.id, ParamRole::Beta);
                let hw = din.h * din.w;
                match cache.mode {
                    Mode::Eval => kernels::bn_eval_forward(
                        x, n, din.c, hw, gamma, beta,
                        cache.param(&spec.id, ParamRole::RunningMean),
                        cache.param(&spec.id, ParamRole::RunningVar),
                        opts.bn_eps,
                    ),
                    Mode::Train => {
                        let out = kernels::bn_train_forward(x, n, din.c, hw, gamma, beta, opts.bn_eps);
                        update = Some(running_update(s, spec, &out.mean, &out.var, n * hw, opts.bn_momentum));
                        aux = Aux::Bn { xhat: out.xhat, inv_std: out.inv_std };
                        out.y
                    }
                }
            }
            LayerKind::Relu => x.iter().map(|&v| v.max(T::zero())).collect(),
            LayerKind::Relu6 => x.iter().map(|&v| v.max(T::zero()).min(T::of(6.0))).collect(),
            LayerKind::MaxPool => {
                let (y, arg) = kernels::maxpool_forward(x, n, din, dout, window(spec));
                aux = Aux::MaxArg(arg);
                y
            }
            LayerKind::AvgPool => kernels::avgpool_forward(x, n, din, dout, window(spec)),
            LayerKind::GlobalAvgPool => kernels::gap_forward(x, n, din),
            LayerKind::Flatten => x.to_vec(),
            LayerKind::AddResidual => {
                let j = cache.topo.skips[i].expect("validated add_residual has a skip");
                let other = cache.outputs[j].as_deref().expect("activation freed before last use");
                x.iter().zip(other).map(|(a, b)| *a + *b).collect()
            }
        };
        if opts.checked && y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(spec.id.clone()));
        }
        cache.bn_updates.extend(update);
        cache.outputs.push(Some(y));
        cache.aux.push(aux);
        if cache.mode == Mode::Eval {
            for (j, out) in cache.outputs.iter_mut().enumerate() {
                if last[j] == i {
                    *out = None;
                }
            }
        }
    }
    Ok(())
}

fn running_update(s: &ModelSnapshot, spec: &LayerSpec, mean: &[f64], var: &[f64], count: usize, m: f64) -> BnUpdate {
    let rm = &s.tensors[&param_name(&spec.id, ParamRole::RunningMean)].data;
    let rv = &s.tensors[&param_name(&spec.id, ParamRole::RunningVar)].data;
    let bessel = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
    BnUpdate {
        layer_id: spec.id.clone(),
        running_mean: rm.iter().zip(mean).map(|(&r, &b)| ((1.0 - m) * r as f64 + m * b) as f32).collect(),
        running_var: rv
            .iter()
            .zip(var)
            .map(|(&r, &b)| (((1.0 - m) * r as f64 + m * b * bessel) as f32).max(f32::MIN_POSITIVE))
            .collect(),
    }
}

pub fn apply_bn_updates(s: &mut ModelSnapshot, updates: &[BnUpdate]) {
    for u in updates {
        s.tensors.get_mut(&param_name(&u.layer_id, ParamRole::RunningMean)).expect("bn tensor").data =
            u.running_mean.clone();
        s.tensors.get_mut(&param_name(&u.layer_id, ParamRole::RunningVar)).expect("bn tensor").data =
            u.running_var.clone();
    }
}

fn add_into<T: Real>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        None => *slot = Some(g),
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a = *a + *b),
    }
}

/// Reverse-mode gradients of `sum(grad_logits * logits)` for every trainable tensor.
pub fn backward<T: Real>(cache: &ForwardCache<'_, T>, grad_logits: &[T]) -> Result<Gradients<T>> {
    if cache.mode != Mode::Train || cache.outputs.len() != cache.snap.layers.len() {
        return Err(Error::StaleCache);
    }
    let s = cache.snap;
    let n = cache.batch;
    if grad_logits.len() != n * s.num_classes {
        return Err(Error::ShapeMismatch {
            id: "<output>".into(),
            detail: format!("upstream gradient has {} entries, logits have {}", grad_logits.len(), n * s.num_classes),
        });
    }
    let n_layers = s.layers.len();
    let mut grads: Vec<Option<Vec<T>>> = (0..n_layers).map(|_| None).collect();
    grads[n_layers - 1] = Some(grad_logits.to_vec());
    let mut out: IndexMap<String, Vec<T>> = IndexMap::new();
    for name in s.trainable_params() {
        let len = s.tensors[&name].data.len();
        out.insert(name, vec![T::zero(); len]);
    }

    for (i, spec) in s.layers.values().enumerate().rev() {
        let Some(g) = grads[i].take() else { continue };
        let src = cache.topo.sources[i];
        let din = cache.topo.in_dims[i];
        let dout = cache.topo.out_dims[i];
        let need_dx = src != Source::Input;
        let x: &[T] = match src {
            Source::Input => &cache.input,
            Source::Layer(j) => cache.outputs[j].as_deref().ok_or(Error::StaleCache)?,
        };
        let y = cache.outputs[i].as_deref().ok_or(Error::StaleCache)?;
        let mut set = |role: ParamRole, v: Vec<T>| {
            out.insert(param_name(&spec.id, role), v);
        };
        let dx: Vec<T> = match spec.kind {
            LayerKind::Conv | LayerKind::DepthwiseConv | LayerKind::FullyConnected => {
                let w = cache.param(&spec.id, ParamRole::Weight);
                let (dx, dw, db) = match spec.kind {
                    LayerKind::Conv => kernels::conv_backward(x, &g, n, din, dout, window(spec), w, need_dx),
                    LayerKind::DepthwiseConv => {
                        kernels::depthwise_backward(x, &g, n, din, dout, window(spec), w, need_dx)
                    }
                    _ => kernels::fc_backward(x, &g, n, din.c, dout.c, w, need_dx),
                };
                set(ParamRole::Weight, dw);
                if spec.has_bias {
                    set(ParamRole::Bias, db);
                }
                dx
            }
            LayerKind::BatchNorm => {
                let Aux::Bn { xhat, inv_std } = &cache.aux[i] else { return Err(Error::StaleCache) };
                let gamma = cache.param(&spec.id, ParamRole::Gamma);
                let (dx, dg, db) = kernels::bn_backward(&g, xhat, inv_std, gamma, n, din.c, din.h * din.w);
                set(ParamRole::Gamma, dg);
                set(ParamRole::Beta, db);
                dx
            }
            LayerKind::Relu => g.iter().zip(y).map(|(&gv, &yv)| if yv > T::zero() { gv } else { T::zero() }).collect(),
            LayerKind::Relu6 => g
                .iter()
                .zip(y)
                .map(|(&gv, &yv)| if yv > T::zero() && yv < T::of(6.0) { gv } else { T::zero() })
                .collect(),
            LayerKind::MaxPool => {
                let Aux::MaxArg(arg) = &cache.aux[i] else { return Err(Error::StaleCache) };
                kernels::maxpool_backward(&g, arg, n, din, dout)
            }
            LayerKind::AvgPool => kernels::avgpool_backward(&g, n, din, dout, window(spec)),
            LayerKind::GlobalAvgPool => kernels::gap_backward(&g, n, din),
            LayerKind::Flatten => g,
            LayerKind::AddResidual => {
                let j = cache.topo.skips[i].expect("validated add_residual has a skip");
                add_into(&mut grads[j], g.clone());
                g
            }
        };
        if let Source::Layer(j) = src {
            add_into(&mut grads[j], dx);
        }
    }
    Ok(out)
}

/// Eval-mode logits for a batch, as f32.
pub fn predict_logits(s: &ModelSnapshot, images: &Tensor) -> Result<Tensor> {
    Ok(forward(s, images, Mode::Eval)?.logits_tensor())
}

/// Index of the largest logit per row; ties go to the lower class.
pub fn argmax_rows(logits: &[f32], classes: usize) -> Vec<usize> {
    logits
        .chunks(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best })
                .0
        })
        .collect()
}

/// Top-1 accuracy in eval mode.
pub fn evaluate_accuracy(s: &ModelSnapshot, data: &DataSlice) -> Result<f64> {
    data.require_non_empty()?;
    let mut correct = 0usize;
    for start in (0..data.len()).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(data.len())).collect();
        let (x, y) = data.gather(&idx);
        let logits = predict_logits(s, &x)?;
        correct += argmax_rows(&logits.data, s.num_classes)
            .iter()
            .zip(&y)
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Per-channel running moments merged across chunks (Chan et al.).
#[derive(Clone, Debug)]
struct Moments {
    count: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    fn new(c: usize) -> Self {
        Self {
            count: 0.0,
            mean: vec![0.0; c],
            m2: vec![0.0; c],
        }
    }

    fn merge(&mut self, count: f64, mean: &[f64], var: &[f64]) {
        let total = self.count + count;
        for c in 0..self.mean.len() {
            let delta = mean[c] - self.mean[c];
            self.mean[c] += delta * count / total;
            self.m2[c] += var[c] * count + delta * delta * self.count * count / total;
        }
        self.count = total;
    }

    fn unbiased_var(&self) -> Vec<f64> {
        let d = if self.count > 1.0 { self.count - 1.0 } else { 1.0 };
        self.m2.iter().map(|m| m / d).collect()
    }
}

/// Replaces every batch-norm's running statistics with the exact mean and
/// (unbiased) variance of its input over `calib`.
///
/// Layers are processed in order; each pass normalizes earlier batch-norms
/// with their freshly computed statistics. Trainable tensors are untouched.
pub fn recalibrate_bn(s: &ModelSnapshot, calib: &DataSlice) -> Result<ModelSnapshot> {
    recalibrate_bn_with(s, calib, &EngineOptions::default())
}

pub fn recalibrate_bn_with(s: &ModelSnapshot, calib: &DataSlice, opts: &EngineOptions) -> Result<ModelSnapshot> {
    calib.require_non_empty()?;
    let mut out = s.clone();
    let topo = s.topology()?;
    let bn_idx: Vec<usize> = s
        .layers
        .values()
        .enumerate()
        .filter(|(_, l)| l.kind == LayerKind::BatchNorm)
        .map(|(i, _)| i)
        .collect();
    for &k in &bn_idx {
        let spec = &s.layers[k];
        let din = topo.in_dims[k];
        let hw = din.h * din.w;
        let mut acc = Moments::new(din.c);
        for start in (0..calib.len()).step_by(EVAL_CHUNK) {
            let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(calib.len())).collect();
            let (x, _) = calib.gather(&idx);
            let n = check_batch(&out, &x)?;
            let mut cache: ForwardCache<'_, f32> = ForwardCache {
                snap: &out,
                topo: topo.clone(),
                params: load_params(&out),
                mode: Mode::Eval,
                batch: n,
                input: x.data,
                outputs: Vec::new(),
                aux: Vec::new(),
                bn_updates: Vec::new(),
            };
            run_layers(&mut cache, k, opts)?;
            let a: &[f32] = match topo.sources[k] {
                Source::Input => &cache.input,
                Source::Layer(j) => cache.outputs[j].as_deref().expect("bn input kept until its read"),
            };
            let (mean, var) = kernels::channel_moments(a, n, din.c, hw);
            acc.merge((n * hw) as f64, &mean, &var);
        }
        let mean: Vec<f32> = acc.mean.iter().map(|&m| m as f32).collect();
        let var: Vec<f32> = acc.unbiased_var().iter().map(|&v| (v as f32).max(f32::MIN_POSITIVE)).collect();
        apply_bn_updates(
            &mut out,
            &[BnUpdate {
                layer_id: spec.id.clone(),
                running_mean: mean,
                running_var: var,
            }],
        );
    }
    Ok(out)
}
