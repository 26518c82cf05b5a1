use rand::Rng;

use super::{expected_params, param_name, LayerKind, LayerSpec, ParamRole};
use crate::tensor::Tensor;

pub const DEFAULT_INIT_SEED: u64 = 0;

fn fan_in(spec: &LayerSpec) -> usize {
    let (kh, kw) = spec.kernel;
    match spec.kind {
        LayerKind::Conv => spec.in_channels * kh * kw,
        LayerKind::DepthwiseConv => kh * kw,
        _ => spec.in_channels,
    }
}

/// Freshly initialized tensors for one layer.
///
/// Weights are fan-in scaled uniform draws in `±sqrt(6 / fan_in)`, biases in
/// `±1 / sqrt(fan_in)`; batch-norms start at gamma 1, beta 0, mean 0, var 1.
pub fn fresh_layer_tensors<R: Rng + ?Sized>(spec: &LayerSpec, rng: &mut R) -> Vec<(String, Tensor)> {
    let fan = fan_in(spec).max(1) as f32;
    expected_params(spec)
        .into_iter()
        .map(|(role, shape)| {
            let n: usize = shape.iter().product();
            let data = match role {
                ParamRole::Weight => {
                    let bound = (6.0 / fan).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                }
                ParamRole::Bias => {
                    let bound = 1.0 / fan.sqrt();
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                }
                ParamRole::Gamma | ParamRole::RunningVar => vec![1.0; n],
                ParamRole::Beta | ParamRole::RunningMean => vec![0.0; n],
            };
            (param_name(&spec.id, role), Tensor::new(shape, data))
        })
        .collect()
}
