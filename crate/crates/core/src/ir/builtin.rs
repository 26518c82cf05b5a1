use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    fresh_layer_tensors, window_out, BlockKind, BlockSpec, Dims, LayerKind, LayerSpec,
    ModelSnapshot,
};
use crate::error::{Error, Result};

pub const BUILTIN_ARCHS: [&str; 7] = [
    "tiny_vgg",
    "tiny_resnet",
    "tiny_ir",
    "vgg16",
    "resnet56",
    "resnet110",
    "mobilenet_v2",
];

/// Incremental constructor for chain models with seeded weight init.
///
/// Each layer method appends a layer reading the previous one (or the layer
/// named by a preceding [`SnapshotBuilder::from`]). Errors are deferred to
/// [`SnapshotBuilder::finish`].
pub struct SnapshotBuilder {
    snap: ModelSnapshot,
    rng: ChaCha8Rng,
    cur: Option<String>,
    dims: HashMap<String, Dims>,
    pending_input: Option<String>,
    error: Option<Error>,
}

impl SnapshotBuilder {
    pub fn new(arch_name: &str, input_shape: [usize; 3], num_classes: usize, seed: u64) -> Self {
        Self {
            snap: ModelSnapshot::empty(arch_name, input_shape, num_classes),
            rng: ChaCha8Rng::seed_from_u64(seed),
            cur: None,
            dims: HashMap::new(),
            pending_input: None,
            error: None,
        }
    }

    /// Id of the most recently added layer.
    pub fn last(&self) -> Option<&str> {
        self.cur.as_deref()
    }

    /// Makes the next layer read from `id` instead of the previous layer.
    pub fn from(&mut self, id: &str) -> &mut Self {
        self.pending_input = Some(id.to_string());
        self
    }

    fn input_dims(&self) -> Dims {
        let src = self.pending_input.as_ref().or(self.cur.as_ref());
        match src {
            Some(id) => self.dims.get(id).copied().unwrap_or(Dims { c: 1, h: 1, w: 1 }),
            None => self.snap.input_dims(),
        }
    }

    fn fail(&mut self, err: Error) {
        if self.error.is_none() {
            self.error = Some(err);
        }
    }

    fn push(&mut self, mut spec: LayerSpec, out: Dims) -> &mut Self {
        let input = self.pending_input.take();
        if let Some(name) = &input {
            if !self.dims.contains_key(name) {
                self.fail(Error::DanglingLayer {
                    id: name.clone(),
                    from: spec.id.clone(),
                });
            }
        }
        // An explicit input equal to the previous layer is the default.
        if input.is_some() && input != self.cur {
            spec.input = input;
        }
        if self.snap.layers.contains_key(&spec.id) {
            self.fail(Error::InvalidLayer {
                id: spec.id.clone(),
                detail: "duplicate layer id".into(),
            });
        }
        for (name, t) in fresh_layer_tensors(&spec, &mut self.rng) {
            self.snap.tensors.insert(name, t);
        }
        self.dims.insert(spec.id.clone(), out);
        self.cur = Some(spec.id.clone());
        self.snap.layers.insert(spec.id.clone(), spec);
        self
    }

    fn windowed(&mut self, id: &str, d: Dims, c: usize, k: usize, s: usize, p: usize) -> Dims {
        match (window_out(d.h, k, s, p), window_out(d.w, k, s, p)) {
            (Some(h), Some(w)) => Dims { c, h, w },
            _ => {
                self.fail(Error::ShapeMismatch {
                    id: id.to_string(),
                    detail: format!("{k}x{k} window does not fit {}x{}", d.h, d.w),
                });
                Dims { c, h: 1, w: 1 }
            }
        }
    }

    pub fn conv(&mut self, id: &str, out: usize, k: usize, stride: usize, pad: usize, bias: bool) -> &mut Self {
        let d = self.input_dims();
        let o = self.windowed(id, d, out, k, stride, pad);
        let mut spec = LayerSpec::new(id, LayerKind::Conv, d.c, out);
        spec.kernel = (k, k);
        spec.stride = (stride, stride);
        spec.padding = (pad, pad);
        spec.has_bias = bias;
        self.push(spec, o)
    }

    pub fn depthwise(&mut self, id: &str, k: usize, stride: usize, pad: usize) -> &mut Self {
        let d = self.input_dims();
        let o = self.windowed(id, d, d.c, k, stride, pad);
        let mut spec = LayerSpec::new(id, LayerKind::DepthwiseConv, d.c, d.c);
        spec.kernel = (k, k);
        spec.stride = (stride, stride);
        spec.padding = (pad, pad);
        self.push(spec, o)
    }

    fn elementwise(&mut self, id: &str, kind: LayerKind) -> &mut Self {
        let d = self.input_dims();
        self.push(LayerSpec::new(id, kind, d.c, d.c), d)
    }

    pub fn bn(&mut self, id: &str) -> &mut Self {
        self.elementwise(id, LayerKind::BatchNorm)
    }

    pub fn relu(&mut self, id: &str) -> &mut Self {
        self.elementwise(id, LayerKind::Relu)
    }

    pub fn relu6(&mut self, id: &str) -> &mut Self {
        self.elementwise(id, LayerKind::Relu6)
    }

    fn pool(&mut self, id: &str, kind: LayerKind, k: usize, stride: usize) -> &mut Self {
        let d = self.input_dims();
        let o = self.windowed(id, d, d.c, k, stride, 0);
        let mut spec = LayerSpec::new(id, kind, d.c, d.c);
        spec.kernel = (k, k);
        spec.stride = (stride, stride);
        self.push(spec, o)
    }

    pub fn max_pool(&mut self, id: &str, k: usize, stride: usize) -> &mut Self {
        self.pool(id, LayerKind::MaxPool, k, stride)
    }

    pub fn avg_pool(&mut self, id: &str, k: usize, stride: usize) -> &mut Self {
        self.pool(id, LayerKind::AvgPool, k, stride)
    }

    pub fn global_avg_pool(&mut self, id: &str) -> &mut Self {
        let d = self.input_dims();
        self.push(
            LayerSpec::new(id, LayerKind::GlobalAvgPool, d.c, d.c),
            Dims { c: d.c, h: 1, w: 1 },
        )
    }

    pub fn flatten(&mut self, id: &str) -> &mut Self {
        let d = self.input_dims();
        let f = d.numel();
        self.push(LayerSpec::new(id, LayerKind::Flatten, d.c, f), Dims { c: f, h: 1, w: 1 })
    }

    pub fn fc(&mut self, id: &str, out: usize, bias: bool) -> &mut Self {
        let d = self.input_dims();
        let mut spec = LayerSpec::new(id, LayerKind::FullyConnected, d.c, out);
        spec.has_bias = bias;
        self.push(spec, Dims { c: out, h: 1, w: 1 })
    }

    /// Residual add of the current input and the output of `skip`.
    pub fn add(&mut self, id: &str, skip: &str) -> &mut Self {
        let d = self.input_dims();
        let mut spec = LayerSpec::new(id, LayerKind::AddResidual, d.c, d.c);
        spec.skip = Some(skip.to_string());
        self.push(spec, d)
    }

    /// Registers a block and flags its internal layers prunable.
    pub fn block(&mut self, block: BlockSpec) -> &mut Self {
        for lid in &block.internal_prunable_layer_ids {
            if let Some(spec) = self.snap.layers.get_mut(lid) {
                spec.prunable = true;
            }
        }
        self.snap.blocks.push(block);
        self
    }

    /// Single-layer block (VGG style) named after its conv.
    pub fn plain_block(&mut self, conv: &str, bn: &str, extra: &[&str]) -> &mut Self {
        let mut layer_ids = vec![conv.to_string(), bn.to_string()];
        layer_ids.extend(extra.iter().map(|s| s.to_string()));
        self.block(BlockSpec {
            id: conv.to_string(),
            kind: BlockKind::Plain,
            layer_ids,
            prunable_bn_ids: vec![bn.to_string()],
            internal_prunable_layer_ids: vec![conv.to_string()],
        })
    }

    pub fn finish(self) -> Result<ModelSnapshot> {
        if let Some(e) = self.error {
            return Err(e);
        }
        self.snap.validate()?;
        Ok(self.snap)
    }

    fn conv_bn_act(&mut self, prefix: &str, out: usize, k: usize, stride: usize, relu6: bool) -> &mut Self {
        let pad = k / 2;
        self.conv(&format!("{prefix}.conv"), out, k, stride, pad, false)
            .bn(&format!("{prefix}.bn"));
        if relu6 {
            self.relu6(&format!("{prefix}.act"))
        } else {
            self.relu(&format!("{prefix}.act"))
        }
    }

    fn vgg_layer(&mut self, name: &str, out: usize) {
        self.conv_bn_act(name, out, 3, 1, false);
        let (c, b, a) = (format!("{name}.conv"), format!("{name}.bn"), format!("{name}.act"));
        self.block(BlockSpec {
            id: name.to_string(),
            kind: BlockKind::Plain,
            layer_ids: vec![c.clone(), b.clone(), a],
            prunable_bn_ids: vec![b],
            internal_prunable_layer_ids: vec![c],
        });
    }

    /// Two 3x3 convs with an identity or 1x1-projection shortcut.
    fn basic_block(&mut self, name: &str, out: usize, stride: usize) {
        let block_in = self.last().expect("basic block needs a stem").to_string();
        let in_c = self.dims[&block_in].c;
        let mut ids = Vec::new();
        let id = |s: &str| format!("{name}.{s}");
        self.conv(&id("conv1"), out, 3, stride, 1, false)
            .bn(&id("bn1"))
            .relu(&id("relu1"))
            .conv(&id("conv2"), out, 3, 1, 1, false)
            .bn(&id("bn2"));
        ids.extend(["conv1", "bn1", "relu1", "conv2", "bn2"].map(id));
        if stride != 1 || in_c != out {
            self.from(&block_in)
                .conv(&id("down.conv"), out, 1, stride, 0, false)
                .bn(&id("down.bn"))
                .add(&id("add"), &id("bn2"));
            ids.extend(["down.conv", "down.bn", "add"].map(id));
        } else {
            self.add(&id("add"), &block_in);
            ids.push(id("add"));
        }
        self.relu(&id("relu2"));
        ids.push(id("relu2"));
        self.block(BlockSpec {
            id: name.to_string(),
            kind: BlockKind::Residual,
            layer_ids: ids,
            prunable_bn_ids: vec![id("bn1")],
            internal_prunable_layer_ids: vec![id("conv1")],
        });
    }

    /// Expand 1x1, depthwise 3x3, linear project 1x1; residual when shapes allow.
    ///
    /// With `expand == 1` there is no expansion conv, so nothing inside the
    /// block can be pruned and it is not registered as a block.
    fn inverted_residual(&mut self, name: &str, out: usize, stride: usize, expand: usize) {
        let block_in = self.last().expect("inverted residual needs a stem").to_string();
        let in_c = self.dims[&block_in].c;
        let hidden = in_c * expand;
        let id = |s: &str| format!("{name}.{s}");
        let mut ids = Vec::new();
        if expand != 1 {
            self.conv(&id("expand.conv"), hidden, 1, 1, 0, false)
                .bn(&id("expand.bn"))
                .relu6(&id("expand.act"));
            ids.extend(["expand.conv", "expand.bn", "expand.act"].map(id));
        }
        self.depthwise(&id("dw.conv"), 3, stride, 1)
            .bn(&id("dw.bn"))
            .relu6(&id("dw.act"))
            .conv(&id("project.conv"), out, 1, 1, 0, false)
            .bn(&id("project.bn"));
        ids.extend(["dw.conv", "dw.bn", "dw.act", "project.conv", "project.bn"].map(id));
        if stride == 1 && in_c == out {
            self.add(&id("add"), &block_in);
            ids.push(id("add"));
        }
        if expand != 1 {
            self.block(BlockSpec {
                id: name.to_string(),
                kind: BlockKind::InvertedResidual,
                layer_ids: ids,
                prunable_bn_ids: vec![id("expand.bn"), id("dw.bn")],
                internal_prunable_layer_ids: vec![id("expand.conv")],
            });
        }
    }

    fn classifier(&mut self, flatten_only: bool) {
        if !flatten_only {
            self.global_avg_pool("pool");
        }
        let classes = self.snap.num_classes;
        self.flatten("flatten").fc("fc", classes, true);
    }
}

fn vgg(b: &mut SnapshotBuilder, cfg: &[Option<usize>]) {
    let (mut stage, mut idx) = (1, 1);
    for item in cfg {
        match item {
            Some(c) => {
                b.vgg_layer(&format!("conv{stage}_{idx}"), *c);
                idx += 1;
            }
            None => {
                b.max_pool(&format!("pool{stage}"), 2, 2);
                stage += 1;
                idx = 1;
            }
        }
    }
}

fn resnet_cifar(b: &mut SnapshotBuilder, widths: [usize; 3], per_stage: usize) {
    b.conv_bn_act("stem", widths[0], 3, 1, false);
    for (s, &w) in widths.iter().enumerate() {
        for i in 0..per_stage {
            let stride = if s > 0 && i == 0 { 2 } else { 1 };
            b.basic_block(&format!("layer{}.{}", s + 1, i), w, stride);
        }
    }
    b.classifier(false);
}

/// Builds a named architecture with seeded random weights.
pub fn builtin_arch(name: &str, num_classes: usize, input_shape: [usize; 3], seed: u64) -> Result<ModelSnapshot> {
    let mut b = SnapshotBuilder::new(name, input_shape, num_classes, seed);
    match name {
        "tiny_vgg" => {
            vgg(&mut b, &[Some(8), Some(8), Some(16), Some(16)]);
            b.max_pool("pool", 4, 4);
            b.classifier(true);
        }
        "vgg16" => {
            let m = None;
            let c = Some;
            vgg(
                &mut b,
                &[
                    c(64), c(64), m, c(128), c(128), m, c(256), c(256), c(256), m,
                    c(512), c(512), c(512), m, c(512), c(512), c(512), m,
                ],
            );
            b.classifier(true);
        }
        "tiny_resnet" => {
            b.conv_bn_act("stem", 8, 3, 1, false);
            b.basic_block("layer1.0", 8, 1);
            b.basic_block("layer2.0", 16, 2);
            b.basic_block("layer2.1", 16, 1);
            b.classifier(false);
        }
        "resnet56" => resnet_cifar(&mut b, [16, 32, 64], 9),
        "resnet110" => resnet_cifar(&mut b, [16, 32, 64], 18),
        "tiny_ir" => {
            b.conv_bn_act("stem", 8, 3, 1, true);
            b.inverted_residual("ir1", 8, 1, 3);
            b.inverted_residual("ir2", 16, 2, 3);
            b.inverted_residual("ir3", 16, 1, 3);
            b.classifier(false);
        }
        "mobilenet_v2" => {
            b.conv_bn_act("stem", 32, 3, 1, true);
            let settings = [
                (1, 16, 1, 1),
                (6, 24, 2, 1),
                (6, 32, 3, 2),
                (6, 64, 4, 2),
                (6, 96, 3, 1),
                (6, 160, 3, 2),
                (6, 320, 1, 1),
            ];
            let mut k = 0;
            for (t, c, n, s) in settings {
                for i in 0..n {
                    b.inverted_residual(&format!("ir{k}"), c, if i == 0 { s } else { 1 }, t);
                    k += 1;
                }
            }
            b.conv_bn_act("head", 1280, 1, 1, true);
            b.classifier(false);
        }
        _ => return Err(Error::UnknownArch(name.to_string())),
    }
    b.finish()
}
