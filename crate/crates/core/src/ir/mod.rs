//! Framework-neutral model representation.
//!
//! A model is an ordered chain of layers. Each layer reads the output of the
//! previous layer unless it names another producer in `input`; `add_residual`
//! layers additionally read a `skip` operand. Both references must point at
//! earlier layers, so layer order is always a valid execution order.

mod builtin;
mod init;
mod io;

use std::collections::{HashMap, HashSet};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use builtin::{builtin_arch, SnapshotBuilder, BUILTIN_ARCHS};
pub use init::{fresh_layer_tensors, DEFAULT_INIT_SEED};
pub use io::{decode_snapshot, encode_snapshot, load_snapshot, save_snapshot, TensorRecord};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    DepthwiseConv,
    BatchNorm,
    Relu,
    Relu6,
    MaxPool,
    AvgPool,
    GlobalAvgPool,
    FullyConnected,
    AddResidual,
    Flatten,
}

impl LayerKind {
    pub const ALL: [LayerKind; 11] = [
        LayerKind::Conv,
        LayerKind::DepthwiseConv,
        LayerKind::BatchNorm,
        LayerKind::Relu,
        LayerKind::Relu6,
        LayerKind::MaxPool,
        LayerKind::AvgPool,
        LayerKind::GlobalAvgPool,
        LayerKind::FullyConnected,
        LayerKind::AddResidual,
        LayerKind::Flatten,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::DepthwiseConv => "depthwise_conv",
            LayerKind::BatchNorm => "batch_norm",
            LayerKind::Relu => "relu",
            LayerKind::Relu6 => "relu6",
            LayerKind::MaxPool => "max_pool",
            LayerKind::AvgPool => "avg_pool",
            LayerKind::GlobalAvgPool => "global_avg_pool",
            LayerKind::FullyConnected => "fully_connected",
            LayerKind::AddResidual => "add_residual",
            LayerKind::Flatten => "flatten",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s)
    }

    /// Layers whose output channel count is a free parameter (conv filters, FC units).
    pub fn defines_channels(self) -> bool {
        matches!(self, LayerKind::Conv | LayerKind::FullyConnected)
    }

    pub fn has_weights(self) -> bool {
        matches!(
            self,
            LayerKind::Conv
                | LayerKind::DepthwiseConv
                | LayerKind::FullyConnected
                | LayerKind::BatchNorm
        )
    }

    fn is_windowed(self) -> bool {
        matches!(
            self,
            LayerKind::Conv | LayerKind::DepthwiseConv | LayerKind::MaxPool | LayerKind::AvgPool
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: String,
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub has_bias: bool,
    pub prunable: bool,
    /// Producer of this layer's input; `None` means the preceding layer
    /// (or the model input for the first layer).
    pub input: Option<String>,
    /// Second operand of `add_residual`.
    pub skip: Option<String>,
}

impl LayerSpec {
    /// A layer with unit kernel/stride, no padding, no bias.
    pub fn new(id: impl Into<String>, kind: LayerKind, in_channels: usize, out_channels: usize) -> Self {
        Self {
            id: id.into(),
            kind,
            in_channels,
            out_channels,
            kernel: (1, 1),
            stride: (1, 1),
            padding: (0, 0),
            has_bias: false,
            prunable: false,
            input: None,
            skip: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Plain,
    Residual,
    InvertedResidual,
}

impl BlockKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BlockKind::Plain => "plain",
            BlockKind::Residual => "residual",
            BlockKind::InvertedResidual => "inverted_residual",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [BlockKind::Plain, BlockKind::Residual, BlockKind::InvertedResidual]
            .into_iter()
            .find(|k| k.as_str() == s)
    }
}

/// Pruning unit: one VGG layer, one residual block, or one inverted residual block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub id: String,
    pub kind: BlockKind,
    pub layer_ids: Vec<String>,
    /// Batch-norms whose gammas define the block importance.
    pub prunable_bn_ids: Vec<String>,
    /// Layers whose output channels scale with the block keep-ratio.
    pub internal_prunable_layer_ids: Vec<String>,
}

/// Role of a tensor within its layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamRole {
    Weight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamRole {
    pub fn suffix(self) -> &'static str {
        match self {
            ParamRole::Weight => "weight",
            ParamRole::Bias => "bias",
            ParamRole::Gamma => "gamma",
            ParamRole::Beta => "beta",
            ParamRole::RunningMean => "running_mean",
            ParamRole::RunningVar => "running_var",
        }
    }

    pub fn is_trainable(self) -> bool {
        !matches!(self, ParamRole::RunningMean | ParamRole::RunningVar)
    }
}

pub fn param_name(layer_id: &str, role: ParamRole) -> String {
    format!("{layer_id}.{}", role.suffix())
}

/// Tensor roles and shapes a layer must carry.
pub fn expected_params(spec: &LayerSpec) -> Vec<(ParamRole, Vec<usize>)> {
    let (kh, kw) = spec.kernel;
    let mut out = Vec::new();
    match spec.kind {
        LayerKind::Conv => {
            out.push((ParamRole::Weight, vec![spec.out_channels, spec.in_channels, kh, kw]));
        }
        LayerKind::DepthwiseConv => {
            out.push((ParamRole::Weight, vec![spec.out_channels, 1, kh, kw]));
        }
        LayerKind::FullyConnected => {
            out.push((ParamRole::Weight, vec![spec.out_channels, spec.in_channels]));
        }
        LayerKind::BatchNorm => {
            for role in [
                ParamRole::Gamma,
                ParamRole::Beta,
                ParamRole::RunningMean,
                ParamRole::RunningVar,
            ] {
                out.push((role, vec![spec.out_channels]));
            }
        }
        _ => {}
    }
    if spec.has_bias && spec.kind.has_weights() && spec.kind != LayerKind::BatchNorm {
        out.push((ParamRole::Bias, vec![spec.out_channels]));
    }
    out
}

/// Channel count and spatial size of an activation (batch dimension omitted).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub fn numel(self) -> usize {
        self.c.saturating_mul(self.h).saturating_mul(self.w)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Input,
    Layer(usize),
}

/// Resolved edges and activation sizes of every layer.
#[derive(Clone, Debug)]
pub struct Topology {
    pub sources: Vec<Source>,
    pub skips: Vec<Option<usize>>,
    pub in_dims: Vec<Dims>,
    pub out_dims: Vec<Dims>,
}

impl Topology {
    pub fn source_dims(&self, src: Source, input: Dims) -> Dims {
        match src {
            Source::Input => input,
            Source::Layer(i) => self.out_dims[i],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSnapshot {
    pub format_version: u32,
    pub arch_name: String,
    /// (C, H, W)
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub blocks: Vec<BlockSpec>,
    pub layers: IndexMap<String, LayerSpec>,
    pub tensors: IndexMap<String, Tensor>,
}

fn window_out(len: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    let padded = len.checked_add(p.checked_mul(2)?)?;
    if padded < k || s == 0 {
        return None;
    }
    Some((padded - k) / s + 1)
}

impl ModelSnapshot {
    pub fn empty(arch_name: impl Into<String>, input_shape: [usize; 3], num_classes: usize) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            arch_name: arch_name.into(),
            input_shape,
            num_classes,
            blocks: Vec::new(),
            layers: IndexMap::new(),
            tensors: IndexMap::new(),
        }
    }

    pub fn input_dims(&self) -> Dims {
        let [c, h, w] = self.input_shape;
        Dims { c, h, w }
    }

    pub fn layer(&self, id: &str) -> Option<&LayerSpec> {
        self.layers.get(id)
    }

    pub fn param(&self, layer_id: &str, role: ParamRole) -> Option<&Tensor> {
        self.tensors.get(&param_name(layer_id, role))
    }

    pub fn block(&self, id: &str) -> Option<&BlockSpec> {
        self.blocks.iter().find(|b| b.id == id)
    }

    fn resolve_ref(&self, name: &str, from: &str, before: usize) -> Result<usize> {
        match self.layers.get_index_of(name) {
            None => Err(Error::DanglingLayer {
                id: name.to_string(),
                from: from.to_string(),
            }),
            Some(j) if j >= before => Err(Error::InvalidLayer {
                id: from.to_string(),
                detail: format!("references `{name}`, which does not precede it"),
            }),
            Some(j) => Ok(j),
        }
    }

    /// Resolves edges and propagates activation sizes, taking each
    /// channel-defining layer's output count from `channels`.
    ///
    /// Checks spatial arithmetic and residual shape agreement; does not
    /// compare against the declared `in_channels`/`out_channels`.
    pub fn propagate<F>(&self, mut channels: F) -> Result<Topology>
    where
        F: FnMut(&LayerSpec) -> usize,
    {
        let n = self.layers.len();
        let input = self.input_dims();
        let mut topo = Topology {
            sources: Vec::with_capacity(n),
            skips: Vec::with_capacity(n),
            in_dims: Vec::with_capacity(n),
            out_dims: Vec::with_capacity(n),
        };
        for (i, spec) in self.layers.values().enumerate() {
            let src = match &spec.input {
                Some(name) => Source::Layer(self.resolve_ref(name, &spec.id, i)?),
                None if i == 0 => Source::Input,
                None => Source::Layer(i - 1),
            };
            let skip = match &spec.skip {
                Some(name) => Some(self.resolve_ref(name, &spec.id, i)?),
                None => None,
            };
            let d = topo.source_dims(src, input);
            let bad = |detail: String| Error::ShapeMismatch {
                id: spec.id.clone(),
                detail,
            };
            let windowed = |c: usize| -> Result<Dims> {
                let h = window_out(d.h, spec.kernel.0, spec.stride.0, spec.padding.0);
                let w = window_out(d.w, spec.kernel.1, spec.stride.1, spec.padding.1);
                match (h, w) {
                    (Some(h), Some(w)) => Ok(Dims { c, h, w }),
                    _ => Err(bad(format!(
                        "window {:?}/{:?}/{:?} does not fit input {}x{}",
                        spec.kernel, spec.stride, spec.padding, d.h, d.w
                    ))),
                }
            };
            let out = match spec.kind {
                LayerKind::Conv => windowed(channels(spec))?,
                LayerKind::DepthwiseConv | LayerKind::MaxPool | LayerKind::AvgPool => windowed(d.c)?,
                LayerKind::BatchNorm | LayerKind::Relu | LayerKind::Relu6 => d,
                LayerKind::GlobalAvgPool => Dims { c: d.c, h: 1, w: 1 },
                LayerKind::Flatten => Dims {
                    c: d.numel(),
                    h: 1,
                    w: 1,
                },
                LayerKind::FullyConnected => {
                    if d.h != 1 || d.w != 1 {
                        return Err(bad(format!(
                            "fully_connected needs a flat input, got {}x{}x{}",
                            d.c, d.h, d.w
                        )));
                    }
                    Dims {
                        c: channels(spec),
                        h: 1,
                        w: 1,
                    }
                }
                LayerKind::AddResidual => {
                    let s = match skip {
                        Some(j) => topo.out_dims[j],
                        None => return Err(bad("add_residual without skip operand".into())),
                    };
                    if s != d {
                        return Err(bad(format!(
                            "residual operands differ: {}x{}x{} vs {}x{}x{}",
                            d.c, d.h, d.w, s.c, s.h, s.w
                        )));
                    }
                    d
                }
            };
            topo.sources.push(src);
            topo.skips.push(skip);
            topo.in_dims.push(d);
            topo.out_dims.push(out);
        }
        Ok(topo)
    }

    /// Topology with the declared channel counts.
    pub fn topology(&self) -> Result<Topology> {
        self.propagate(|spec| spec.out_channels)
    }

    /// Index of the batch-norm that directly consumes layer `layer_idx`.
    pub fn bn_after(&self, topo: &Topology, layer_idx: usize) -> Option<usize> {
        topo.sources
            .iter()
            .enumerate()
            .find(|(j, s)| **s == Source::Layer(layer_idx) && self.layers[*j].kind == LayerKind::BatchNorm)
            .map(|(j, _)| j)
    }

    /// Checks every structural and tensor invariant.
    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::MalformedManifest(format!(
                "unsupported format_version {}",
                self.format_version
            )));
        }
        if self.input_shape.contains(&0) {
            return Err(Error::MalformedManifest("input_shape has a zero dimension".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::MalformedManifest("num_classes must be at least 1".into()));
        }
        for (key, spec) in &self.layers {
            if key != &spec.id {
                return Err(Error::InvalidLayer {
                    id: spec.id.clone(),
                    detail: format!("stored under key `{key}`"),
                });
            }
            self.check_layer_fields(spec)?;
        }
        let topo = self.topology()?;
        for (i, spec) in self.layers.values().enumerate() {
            let d_in = topo.in_dims[i];
            let d_out = topo.out_dims[i];
            let expect_in = d_in.c;
            if spec.in_channels != expect_in {
                return Err(Error::InvalidLayer {
                    id: spec.id.clone(),
                    detail: format!("in_channels {} but producer yields {}", spec.in_channels, expect_in),
                });
            }
            if spec.out_channels != d_out.c {
                return Err(Error::InvalidLayer {
                    id: spec.id.clone(),
                    detail: format!("out_channels {} but layer yields {}", spec.out_channels, d_out.c),
                });
            }
        }
        self.check_blocks(&topo)?;
        self.check_tensors()?;
        Ok(())
    }

    fn check_layer_fields(&self, spec: &LayerSpec) -> Result<()> {
        let bad = |detail: &str| {
            Err(Error::InvalidLayer {
                id: spec.id.clone(),
                detail: detail.to_string(),
            })
        };
        if spec.id.is_empty() {
            return bad("empty layer id");
        }
        if spec.in_channels == 0 || spec.out_channels == 0 {
            return bad("channel counts must be at least 1");
        }
        if spec.kernel.0 == 0 || spec.kernel.1 == 0 || spec.stride.0 == 0 || spec.stride.1 == 0 {
            return bad("kernel and stride dims must be at least 1");
        }
        if spec.kind.is_windowed() && (spec.padding.0 >= spec.kernel.0 || spec.padding.1 >= spec.kernel.1) {
            return bad("padding must be smaller than the kernel");
        }
        if spec.kind == LayerKind::DepthwiseConv && spec.in_channels != spec.out_channels {
            return bad("depthwise_conv needs out_channels = in_channels");
        }
        if spec.has_bias
            && !matches!(
                spec.kind,
                LayerKind::Conv | LayerKind::DepthwiseConv | LayerKind::FullyConnected
            )
        {
            return bad("only conv and fully_connected layers carry a bias");
        }
        if spec.prunable && !spec.kind.defines_channels() {
            return bad("only conv and fully_connected layers can be prunable");
        }
        if (spec.kind == LayerKind::AddResidual) != spec.skip.is_some() {
            return bad("a skip operand is required on add_residual and forbidden elsewhere");
        }
        Ok(())
    }

    fn check_blocks(&self, topo: &Topology) -> Result<()> {
        let mut seen_blocks = HashSet::new();
        let mut owner: HashMap<&str, &str> = HashMap::new();
        let mut internal: HashSet<&str> = HashSet::new();
        for block in &self.blocks {
            let bad = |detail: String| Error::InvalidBlock {
                id: block.id.clone(),
                detail,
            };
            if !seen_blocks.insert(block.id.as_str()) {
                return Err(bad("duplicate block id".into()));
            }
            for lid in &block.layer_ids {
                if !self.layers.contains_key(lid) {
                    return Err(Error::DanglingLayer {
                        id: lid.clone(),
                        from: block.id.clone(),
                    });
                }
                if let Some(prev) = owner.insert(lid, &block.id) {
                    return Err(bad(format!("layer `{lid}` already belongs to block `{prev}`")));
                }
            }
            let in_block = |lid: &String| block.layer_ids.contains(lid);
            if block.prunable_bn_ids.is_empty() {
                return Err(Error::BlockMissingBn(block.id.clone()));
            }
            for bn in &block.prunable_bn_ids {
                if !self.layers.contains_key(bn) {
                    return Err(Error::DanglingLayer {
                        id: bn.clone(),
                        from: block.id.clone(),
                    });
                }
                if !in_block(bn) || self.layers[bn].kind != LayerKind::BatchNorm {
                    return Err(bad(format!("prunable bn `{bn}` is not a batch_norm inside the block")));
                }
            }
            for lid in &block.internal_prunable_layer_ids {
                if !self.layers.contains_key(lid) {
                    return Err(Error::DanglingLayer {
                        id: lid.clone(),
                        from: block.id.clone(),
                    });
                }
                let spec = &self.layers[lid];
                if !in_block(lid) || !spec.kind.defines_channels() || !spec.prunable {
                    return Err(bad(format!(
                        "internal prunable layer `{lid}` must be a prunable conv/fully_connected inside the block"
                    )));
                }
                internal.insert(lid);
            }
            if block.kind != BlockKind::Plain {
                let last = block
                    .layer_ids
                    .iter()
                    .rev()
                    .find(|l| self.layers[*l].kind.defines_channels());
                if let Some(last) = last {
                    if internal.contains(last.as_str()) {
                        return Err(bad(format!("block output layer `{last}` cannot be pruned")));
                    }
                }
            }
        }
        for spec in self.layers.values() {
            if spec.prunable && !internal.contains(spec.id.as_str()) {
                return Err(Error::InvalidLayer {
                    id: spec.id.clone(),
                    detail: "marked prunable but not listed by any block".into(),
                });
            }
        }
        // A pruned channel count must never reach a residual add.
        let mut tainted = vec![false; self.layers.len()];
        for (i, spec) in self.layers.values().enumerate() {
            let from_src = match topo.sources[i] {
                Source::Input => false,
                Source::Layer(j) => tainted[j],
            };
            tainted[i] = match spec.kind {
                LayerKind::Conv | LayerKind::FullyConnected => spec.prunable,
                LayerKind::AddResidual => {
                    let skip_t = topo.skips[i].map(|j| tainted[j]).unwrap_or(false);
                    if from_src || skip_t {
                        return Err(Error::InvalidLayer {
                            id: spec.id.clone(),
                            detail: "residual operand depends on a prunable channel count".into(),
                        });
                    }
                    false
                }
                _ => from_src,
            };
        }
        Ok(())
    }

    fn check_tensors(&self) -> Result<()> {
        let mut expected = HashSet::new();
        for spec in self.layers.values() {
            for (role, shape) in expected_params(spec) {
                let name = param_name(&spec.id, role);
                let t = self.tensors.get(&name).ok_or_else(|| Error::InvalidTensor {
                    name: name.clone(),
                    detail: format!("missing for layer `{}`", spec.id),
                })?;
                if t.shape != shape {
                    return Err(Error::InvalidTensor {
                        name: name.clone(),
                        detail: format!("shape {:?}, layer implies {:?}", t.shape, shape),
                    });
                }
                if Some(t.data.len()) != shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)) {
                    return Err(Error::InvalidTensor {
                        name,
                        detail: "data length does not match shape".into(),
                    });
                }
                if role == ParamRole::RunningVar && t.data.iter().any(|v| !(*v > 0.0)) {
                    return Err(Error::InvalidTensor {
                        name,
                        detail: "running_var entries must be > 0".into(),
                    });
                }
                expected.insert(param_name(&spec.id, role));
            }
        }
        if let Some(extra) = self.tensors.keys().find(|k| !expected.contains(*k)) {
            return Err(Error::InvalidTensor {
                name: extra.clone(),
                detail: "not owned by any layer".into(),
            });
        }
        Ok(())
    }

    /// Bitwise comparison of structure and weights (tensor order ignored).
    pub fn bit_eq(&self, other: &ModelSnapshot) -> bool {
        self.format_version == other.format_version
            && self.arch_name == other.arch_name
            && self.input_shape == other.input_shape
            && self.num_classes == other.num_classes
            && self.blocks == other.blocks
            && self.layers == other.layers
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .all(|(k, t)| other.tensors.get(k).is_some_and(|o| o.bit_eq(t)))
    }

    /// All trainable tensor names in layer order.
    pub fn trainable_params(&self) -> Vec<String> {
        let mut names = Vec::new();
        for spec in self.layers.values() {
            for (role, _) in expected_params(spec) {
                if role.is_trainable() {
                    names.push(param_name(&spec.id, role));
                }
            }
        }
        names
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_conv() -> ModelSnapshot {
        let mut b = SnapshotBuilder::new("t", [3, 8, 8], 2, 1);
        b.conv("c1", 4, 3, 1, 1, false).bn("b1").relu("r1");
        b.conv("c2", 4, 3, 1, 1, false).bn("b2").relu("r2");
        b.plain_block("c1", "b1", &["r1"]);
        b.plain_block("c2", "b2", &["r2"]);
        b.finish().unwrap()
    }

    #[test]
    fn builder_output_validates() {
        let s = two_conv();
        s.validate().unwrap();
        assert_eq!(s.blocks.len(), 2);
        assert_eq!(s.trainable_params().len(), 6);
    }

    #[test]
    fn rejects_depthwise_channel_change() {
        let mut s = two_conv();
        let mut dw = LayerSpec::new("dw", LayerKind::DepthwiseConv, 4, 5);
        dw.kernel = (3, 3);
        dw.padding = (1, 1);
        s.layers.insert("dw".into(), dw);
        assert!(matches!(s.validate(), Err(Error::InvalidLayer { id, .. }) if id == "dw"));
    }

    #[test]
    fn rejects_nonpositive_running_var() {
        let mut s = two_conv();
        s.tensors.get_mut("b1.running_var").unwrap().data[0] = 0.0;
        assert!(matches!(s.validate(), Err(Error::InvalidTensor { name, .. }) if name == "b1.running_var"));
    }

    #[test]
    fn rejects_dangling_input() {
        let mut s = two_conv();
        s.layers.get_mut("c2").unwrap().input = Some("nope".into());
        assert!(matches!(s.validate(), Err(Error::DanglingLayer { id, from }) if id == "nope" && from == "c2"));
    }

    #[test]
    fn rejects_forward_reference() {
        let mut s = two_conv();
        s.layers.get_mut("c1").unwrap().input = Some("r2".into());
        assert!(matches!(s.validate(), Err(Error::InvalidLayer { id, .. }) if id == "c1"));
    }

    #[test]
    fn rejects_prunable_bn_outside_block() {
        let mut s = two_conv();
        s.blocks[0].prunable_bn_ids = vec!["b2".into()];
        assert!(matches!(s.validate(), Err(Error::InvalidBlock { .. })));
    }

    #[test]
    fn rejects_pruned_channels_reaching_residual_add() {
        let mut b = SnapshotBuilder::new("t", [4, 8, 8], 2, 1);
        b.conv("c1", 4, 3, 1, 1, false).bn("b1").relu("r1");
        b.conv("c2", 4, 3, 1, 1, false).bn("b2");
        b.add("add", "r1");
        // c2 feeds the add, so it may not be pruned.
        b.block(BlockSpec {
            id: "blk".into(),
            kind: BlockKind::Plain,
            layer_ids: vec!["c2".into(), "b2".into(), "add".into()],
            prunable_bn_ids: vec!["b2".into()],
            internal_prunable_layer_ids: vec!["c2".into()],
        });
        assert!(b.finish().is_err());
    }

    #[test]
    fn empty_snapshot_is_valid() {
        let s = ModelSnapshot::empty("empty", [3, 4, 4], 2);
        s.validate().unwrap();
        let topo = s.topology().unwrap();
        assert!(topo.out_dims.is_empty());
    }

    #[test]
    fn layer_kind_names_round_trip() {
        for k in LayerKind::ALL {
            assert_eq!(LayerKind::parse(k.as_str()), Some(k));
        }
        assert_eq!(LayerKind::parse("conv3d"), None);
    }
}
