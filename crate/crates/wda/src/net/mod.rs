//! Network definitions: the multi-task segmentation network (shared
//! encoder-decoder trunk with segmentation, detection, and counting
//! heads), the source-trained counting network, and the fully
//! convolutional domain discriminator.
//!
//! A network owns a [`ParamStore`] of named tensors. Each training step
//! binds the store into a fresh [`Graph`] as leaves ([`ParamStore::bind`])
//! and builds the forward pass on top, so one set of weights can serve
//! several forward passes (two domains, adversarial branch) in a single
//! tape with shared gradients.

use std::collections::HashMap;

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::conv::ConvCfg;
use crate::autograd::{Graph, NodeId, Scalar};
use crate::error::{Result, WdaError};

pub mod checkpoint;
pub mod opt;

/// Convolution block family used throughout the trunk and heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockKind {
    /// Two lightweight branches (1x3-then-3x1 factorized, and dilated
    /// depthwise + pointwise), concatenated, fused 1x1, residual.
    HddLite,
    /// One dense 3x3 convolution with the same residual wiring.
    PlainConv,
}

/// Shape of the shared encoder-decoder trunk.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    /// Number of down/up stages; spatial size must divide 2^depth.
    pub depth: usize,
    pub base_channels: usize,
    pub block: BlockKind,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { depth: 4, base_channels: 16, block: BlockKind::HddLite }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.depth > 6 {
            return Err(WdaError::Config(format!("backbone depth {} outside 1..=6", self.depth)));
        }
        if self.base_channels < 2 || self.base_channels % 2 != 0 {
            return Err(WdaError::Config(format!(
                "base_channels must be even and at least 2, got {}",
                self.base_channels
            )));
        }
        Ok(())
    }
}

/// Discriminator shape: kernel-4 stride-2 convolutions through `channels`,
/// leaky-ReLU (slope 0.2) between layers, raw logit map out.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub channels: Vec<usize>,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig { channels: vec![64, 128, 256, 512, 1] }
    }
}

impl DiscriminatorConfig {
    /// Smaller stack for desk-scale runs.
    pub fn desk() -> Self {
        DiscriminatorConfig { channels: vec![16, 32, 64, 128, 1] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() < 2 || *self.channels.last().unwrap() != 1 {
            return Err(WdaError::Config("discriminator channels must end in 1".into()));
        }
        Ok(())
    }
}

/// Named trainable tensors of one network.
#[derive(Clone)]
pub struct ParamStore<T: Scalar> {
    names: Vec<String>,
    values: Vec<ArrayD<T>>,
    index: HashMap<String, usize>,
}

/// Handles of one [`ParamStore::bind`] call: `ids[i]` is the graph leaf
/// holding parameter `i`.
pub struct Bound {
    pub ids: Vec<NodeId>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), values: Vec::new(), index: HashMap::new() }
    }

    fn add(&mut self, name: String, value: ArrayD<T>) -> usize {
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.names.push(name.clone());
        self.values.push(value);
        self.index.insert(name, self.values.len() - 1);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn value(&self, i: usize) -> &ArrayD<T> {
        &self.values[i]
    }

    pub fn value_mut(&mut self, i: usize) -> &mut ArrayD<T> {
        &mut self.values[i]
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<T>> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    /// Total scalar parameter count.
    pub fn total_params(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Copies every tensor into `g` as a leaf; `trainable` controls
    /// whether gradients flow into them.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        Bound { ids: self.values.iter().map(|v| g.leaf(v.clone(), trainable)).collect() }
    }

    /// Tensors as `(name, values)` pairs in creation order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<T>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter())
    }

    /// Overwrites tensors whose name passes `filter` from `source`,
    /// requiring every selected tensor to exist there with an identical
    /// shape. Returns how many tensors were copied.
    pub fn load_matching(
        &mut self,
        source: &ParamStore<T>,
        filter: impl Fn(&str) -> bool,
    ) -> Result<usize> {
        let mut missing = Vec::new();
        let mut mismatched = Vec::new();
        let mut updates = Vec::new();
        for (i, name) in self.names.iter().enumerate() {
            if !filter(name) {
                continue;
            }
            match source.get(name) {
                None => missing.push(name.clone()),
                Some(v) if v.shape() != self.values[i].shape() => mismatched.push(format!(
                    "{name}: {:?} vs {:?}",
                    v.shape(),
                    self.values[i].shape()
                )),
                Some(v) => updates.push((i, v.clone())),
            }
        }
        if !missing.is_empty() || !mismatched.is_empty() {
            return Err(WdaError::Checkpoint(format!(
                "incompatible tensors; missing: [{}], shape mismatch: [{}]",
                missing.join(", "),
                mismatched.join(", ")
            )));
        }
        let n = updates.len();
        for (i, v) in updates {
            self.values[i] = v;
        }
        Ok(n)
    }
}

/// He-normal initializer via Box-Muller.
fn he_normal<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> ArrayD<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let v: Vec<T> = (0..n)
        .map(|_| {
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            T::c((-2.0 * u1.ln()).sqrt() * u2.cos() * std)
        })
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), v).unwrap()
}

/// One convolution's parameter handles.
#[derive(Clone)]
struct Conv {
    w: usize,
    b: Option<usize>,
    cfg: ConvCfg,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kh: usize,
        kw: usize,
        cfg: ConvCfg,
        bias: bool,
    ) -> Self {
        let w = store.add(format!("{name}.w"), he_normal(rng, &[cout, cin, kh, kw], cin * kh * kw));
        let b = bias.then(|| store.add(format!("{name}.b"), ArrayD::zeros(IxDyn(&[cout]))));
        Conv { w, b, cfg }
    }

    fn fwd<T: Scalar>(&self, g: &mut Graph<T>, bound: &Bound, x: NodeId) -> NodeId {
        let y = g.conv2d(x, bound.ids[self.w], self.cfg);
        match self.b {
            Some(b) => g.add_bias(y, bound.ids[b]),
            None => y,
        }
    }
}

/// Depthwise convolution parameter handles.
#[derive(Clone)]
struct DwConv {
    w: usize,
    cfg: ConvCfg,
}

impl DwConv {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        k: usize,
        cfg: ConvCfg,
    ) -> Self {
        let w = store.add(format!("{name}.w"), he_normal(rng, &[channels, 1, k, k], k * k));
        DwConv { w, cfg }
    }

    fn fwd<T: Scalar>(&self, g: &mut Graph<T>, bound: &Bound, x: NodeId) -> NodeId {
        g.depthwise_conv2d(x, bound.ids[self.w], self.cfg)
    }
}

const TRUNK_SLOPE: f64 = 0.1;

/// Head output convs start small so every task's prediction opens near
/// its loss floor; otherwise the unbounded heatmap heads dominate early
/// gradients and cap the stable learning rate.
const HEAD_INIT_SCALE: f64 = 0.05;

#[derive(Clone)]
enum Block {
    Hdd {
        br1a: Conv,
        br1b: Conv,
        br2d: DwConv,
        br2p: Conv,
        fuse: Conv,
        proj: Option<Conv>,
    },
    Plain {
        conv: Conv,
        proj: Option<Conv>,
    },
}

impl Block {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        kind: BlockKind,
        cin: usize,
        cout: usize,
    ) -> Self {
        assert!(cout % 2 == 0, "block output channels must be even");
        let proj = (cin != cout).then(|| {
            Conv::new(store, rng, &format!("{name}.proj"), cin, cout, 1, 1, ConvCfg::unit(), false)
        });
        match kind {
            BlockKind::HddLite => {
                let half = cout / 2;
                Block::Hdd {
                    br1a: Conv::new(store, rng, &format!("{name}.br1a"), cin, half, 1, 3, ConvCfg::same(1, 3), true),
                    br1b: Conv::new(store, rng, &format!("{name}.br1b"), half, half, 3, 1, ConvCfg::same(3, 1), true),
                    br2d: DwConv::new(store, rng, &format!("{name}.br2d"), cin, 3, ConvCfg::same3(2)),
                    br2p: Conv::new(store, rng, &format!("{name}.br2p"), cin, half, 1, 1, ConvCfg::unit(), true),
                    fuse: Conv::new(store, rng, &format!("{name}.fuse"), cout, cout, 1, 1, ConvCfg::unit(), true),
                    proj,
                }
            }
            BlockKind::PlainConv => Block::Plain {
                conv: Conv::new(store, rng, &format!("{name}.conv"), cin, cout, 3, 3, ConvCfg::same3(1), true),
                proj,
            },
        }
    }

    fn fwd<T: Scalar>(&self, g: &mut Graph<T>, bound: &Bound, x: NodeId) -> NodeId {
        let slope = T::c(TRUNK_SLOPE);
        match self {
            Block::Hdd { br1a, br1b, br2d, br2p, fuse, proj } => {
                let a = br1a.fwd(g, bound, x);
                let a = g.leaky_relu(a, slope);
                let a = br1b.fwd(g, bound, a);
                let b = br2d.fwd(g, bound, x);
                let b = br2p.fwd(g, bound, b);
                let cat = g.concat_ch(a, b);
                let cat = g.leaky_relu(cat, slope);
                let f = fuse.fwd(g, bound, cat);
                let res = match proj {
                    Some(p) => p.fwd(g, bound, x),
                    None => x,
                };
                let sum = g.add(f, res);
                g.leaky_relu(sum, slope)
            }
            Block::Plain { conv, proj } => {
                let f = conv.fwd(g, bound, x);
                let res = match proj {
                    Some(p) => p.fwd(g, bound, x),
                    None => x,
                };
                let sum = g.add(f, res);
                g.leaky_relu(sum, slope)
            }
        }
    }
}

#[derive(Clone)]
struct Trunk {
    stem: Conv,
    enc: Vec<Block>,
    bottleneck: Block,
    dec: Vec<Block>,
    depth: usize,
}

impl Trunk {
    fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, cfg: &BackboneConfig) -> Self {
        let b = cfg.base_channels;
        let width = |i: usize| b << i;
        let stem = Conv::new(store, rng, "trunk.stem", 1, b, 3, 3, ConvCfg::same3(1), true);
        let mut enc = Vec::new();
        for i in 0..cfg.depth {
            let cin = if i == 0 { b } else { width(i - 1) };
            enc.push(Block::new(store, rng, &format!("trunk.enc{i}"), cfg.block, cin, width(i)));
        }
        let bottleneck = Block::new(
            store,
            rng,
            "trunk.mid",
            cfg.block,
            width(cfg.depth - 1),
            width(cfg.depth),
        );
        let mut dec = Vec::new();
        for i in (0..cfg.depth).rev() {
            dec.push(Block::new(
                store,
                rng,
                &format!("trunk.dec{i}"),
                cfg.block,
                width(i + 1) + width(i),
                width(i),
            ));
        }
        Trunk { stem, enc, bottleneck, dec, depth: cfg.depth }
    }

    /// Full-resolution feature map with `base_channels` channels.
    fn fwd<T: Scalar>(&self, g: &mut Graph<T>, bound: &Bound, x: NodeId) -> NodeId {
        let shape = g.value(x).shape().to_vec();
        assert!(
            shape[2] % (1 << self.depth) == 0 && shape[3] % (1 << self.depth) == 0,
            "trunk input {}x{} must divide 2^{}",
            shape[2],
            shape[3],
            self.depth
        );
        let slope = T::c(TRUNK_SLOPE);
        let mut f = self.stem.fwd(g, bound, x);
        f = g.leaky_relu(f, slope);
        let mut skips = Vec::with_capacity(self.depth);
        for blk in &self.enc {
            f = blk.fwd(g, bound, f);
            skips.push(f);
            f = g.maxpool2(f);
        }
        f = self.bottleneck.fwd(g, bound, f);
        for (blk, &skip) in self.dec.iter().zip(skips.iter().rev()) {
            let up = g.upsample_nearest2(f);
            let cat = g.concat_ch(up, skip);
            f = blk.fwd(g, bound, cat);
        }
        f
    }
}

/// Forward-pass handles of the multi-task network.
pub struct G1Nodes {
    /// `[B,2,H,W]` softmax probabilities (channel 1 = foreground).
    pub seg_prob: NodeId,
    /// `[B,1,H,W]` non-negative detection heatmap.
    pub det_heat: NodeId,
    /// `[B,1,H,W]` non-negative counting density from the counting subnet.
    pub count_density: NodeId,
    /// `[B]` predicted counts (integral of `count_density`).
    pub count_hat: NodeId,
}

/// Multi-task network: shared trunk, segmentation head (1 block),
/// detection head (2 blocks), counting subnet over the detection heatmap.
#[derive(Clone)]
pub struct G1<T: Scalar> {
    pub cfg: BackboneConfig,
    pub params: ParamStore<T>,
    trunk: Trunk,
    seg_block: Block,
    seg_out: Conv,
    det_block0: Block,
    det_block1: Block,
    det_out: Conv,
    count_block: Block,
    count_out: Conv,
}

impl<T: Scalar> G1<T> {
    pub fn new(cfg: BackboneConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = cfg.base_channels;
        let trunk = Trunk::new(&mut store, &mut rng, &cfg);
        let seg_block = Block::new(&mut store, &mut rng, "seg.block0", cfg.block, b, b);
        let seg_out = Conv::new(&mut store, &mut rng, "seg.out", b, 2, 1, 1, ConvCfg::unit(), true);
        let det_block0 = Block::new(&mut store, &mut rng, "det.block0", cfg.block, b, b);
        let det_block1 = Block::new(&mut store, &mut rng, "det.block1", cfg.block, b, b);
        let det_out = Conv::new(&mut store, &mut rng, "det.out", b, 1, 1, 1, ConvCfg::unit(), true);
        let count_block = Block::new(&mut store, &mut rng, "count.block0", cfg.block, 1, b);
        let count_out = Conv::new(&mut store, &mut rng, "count.out", b, 1, 1, 1, ConvCfg::unit(), true);
        for head in [&seg_out, &det_out, &count_out] {
            let s = T::c(HEAD_INIT_SCALE);
            store.value_mut(head.w).mapv_inplace(|v| v * s);
        }
        Ok(G1 {
            cfg,
            params: store,
            trunk,
            seg_block,
            seg_out,
            det_block0,
            det_block1,
            det_out,
            count_block,
            count_out,
        })
    }

    /// Builds the forward pass for input `x` (`[B,1,H,W]`, H and W
    /// divisible by 2^depth) on an existing binding of this network's
    /// parameters.
    pub fn forward(&self, g: &mut Graph<T>, bound: &Bound, x: NodeId) -> G1Nodes {
        let slope = T::c(TRUNK_SLOPE);
        let f = self.trunk.fwd(g, bound, x);
        let s = self.seg_block.fwd(g, bound, f);
        let s = self.seg_out.fwd(g, bound, s);
        let seg_prob = g.softmax_ch(s);
        let d = self.det_block0.fwd(g, bound, f);
        let d = self.det_block1.fwd(g, bound, d);
        let d = self.det_out.fwd(g, bound, d);
        let det_heat = g.softplus(d);
        let c = self.count_block.fwd(g, bound, det_heat);
        let c = g.leaky_relu(c, slope);
        let c = self.count_out.fwd(g, bound, c);
        let count_density = g.softplus(c);
        let count_hat = g.sum_per_image(count_density);
        G1Nodes { seg_prob, det_heat, count_density, count_hat }
    }
}

/// Handles of the counting network's forward pass.
pub struct G2Nodes {
    /// `[B,1,H,W]` non-negative density map.
    pub density: NodeId,
    /// `[B]` predicted counts (integral of the density).
    pub count: NodeId,
}

/// Source-trained counting network: the same trunk followed by a
/// single-channel density head whose integral is the count.
#[derive(Clone)]
pub struct G2<T: Scalar> {
    pub cfg: BackboneConfig,
    pub params: ParamStore<T>,
    trunk: Trunk,
    head: Conv,
}

impl<T: Scalar> G2<T> {
    pub fn new(cfg: BackboneConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trunk = Trunk::new(&mut store, &mut rng, &cfg);
        let head = Conv::new(&mut store, &mut rng, "head.out", cfg.base_channels, 1, 1, 1, ConvCfg::unit(), true);
        let s = T::c(HEAD_INIT_SCALE);
        store.value_mut(head.w).mapv_inplace(|v| v * s);
        Ok(G2 { cfg, params: store, trunk, head })
    }

    /// Copies all `trunk.*` tensors from a compatible store (for example a
    /// trained G1); head tensors are left at their initialization.
    pub fn init_trunk_from(&mut self, source: &ParamStore<T>) -> Result<usize> {
        self.params.load_matching(source, |name| name.starts_with("trunk."))
    }

    pub fn forward(&self, g: &mut Graph<T>, bound: &Bound, x: NodeId) -> G2Nodes {
        let f = self.trunk.fwd(g, bound, x);
        let d = self.head.fwd(g, bound, f);
        let density = g.softplus(d);
        let count = g.sum_per_image(density);
        G2Nodes { density, count }
    }
}

/// Patch discriminator over 2-channel probability maps: kernel-4 stride-2
/// convolutions through `cfg.channels`, leaky-ReLU 0.2 between layers,
/// raw logits out (the loss applies the sigmoid).
#[derive(Clone)]
pub struct Discriminator<T: Scalar> {
    pub cfg: DiscriminatorConfig,
    pub params: ParamStore<T>,
    layers: Vec<Conv>,
}

impl<T: Scalar> Discriminator<T> {
    pub fn new(cfg: DiscriminatorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut cin = 2usize;
        for (i, &cout) in cfg.channels.iter().enumerate() {
            layers.push(Conv::new(
                &mut store,
                &mut rng,
                &format!("d.l{i}"),
                cin,
                cout,
                4,
                4,
                ConvCfg { stride: 2, pad: (1, 1), dilation: 1 },
                true,
            ));
            cin = cout;
        }
        Ok(Discriminator { cfg, params: store, layers })
    }

    /// Logit map for a `[B,2,H,W]` probability input; spatial size shrinks
    /// by 2 per layer.
    pub fn forward(&self, g: &mut Graph<T>, bound: &Bound, x: NodeId) -> NodeId {
        let mut f = x;
        for (i, layer) in self.layers.iter().enumerate() {
            f = layer.fwd(g, bound, f);
            if i + 1 < self.layers.len() {
                f = g.leaky_relu(f, T::c(0.2));
            }
        }
        f
    }
}

/// Parameter-count and output-shape summary of a network build.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ModelInfo {
    pub kind: String,
    pub tensors: usize,
    pub parameters: usize,
    pub input_shape: Vec<usize>,
    pub output_shapes: Vec<(String, Vec<usize>)>,
}

/// Builds each network at the given configuration and reports sizes.
pub fn model_info(
    backbone: &BackboneConfig,
    disc: &DiscriminatorConfig,
    input_hw: (usize, usize),
) -> Result<Vec<ModelInfo>> {
    let (h, w) = input_hw;
    let div = 1 << backbone.depth;
    if h % div != 0 || w % div != 0 {
        return Err(WdaError::Config(format!(
            "input {h}x{w} must divide 2^depth = {div}"
        )));
    }
    let x = ArrayD::<f32>::zeros(IxDyn(&[1, 1, h, w]));
    let mut out = Vec::new();

    let g1 = G1::<f32>::new(*backbone, 0)?;
    let mut g = Graph::new();
    let bound = g1.params.bind(&mut g, false);
    let xid = g.constant(x.clone());
    let nodes = g1.forward(&mut g, &bound, xid);
    out.push(ModelInfo {
        kind: "g1".into(),
        tensors: g1.params.len(),
        parameters: g1.params.total_params(),
        input_shape: vec![1, 1, h, w],
        output_shapes: vec![
            ("seg_prob".into(), g.value(nodes.seg_prob).shape().to_vec()),
            ("det_heat".into(), g.value(nodes.det_heat).shape().to_vec()),
            ("count_hat".into(), g.value(nodes.count_hat).shape().to_vec()),
        ],
    });

    let g2 = G2::<f32>::new(*backbone, 0)?;
    let mut g = Graph::new();
    let bound = g2.params.bind(&mut g, false);
    let xid = g.constant(x);
    let nodes = g2.forward(&mut g, &bound, xid);
    out.push(ModelInfo {
        kind: "g2".into(),
        tensors: g2.params.len(),
        parameters: g2.params.total_params(),
        input_shape: vec![1, 1, h, w],
        output_shapes: vec![
            ("density".into(), g.value(nodes.density).shape().to_vec()),
            ("count".into(), g.value(nodes.count).shape().to_vec()),
        ],
    });

    let d = Discriminator::<f32>::new(disc.clone(), 0)?;
    let mut g = Graph::new();
    let bound = d.params.bind(&mut g, false);
    let xid = g.constant(ArrayD::<f32>::zeros(IxDyn(&[1, 2, h, w])));
    let logits = d.forward(&mut g, &bound, xid);
    out.push(ModelInfo {
        kind: "discriminator".into(),
        tensors: d.params.len(),
        parameters: d.params.total_params(),
        input_shape: vec![1, 2, h, w],
        output_shapes: vec![("logits".into(), g.value(logits).shape().to_vec())],
    });
    Ok(out)
}

#[cfg(test)]
mod tests;
