//! The 3D dense detector: ResNet-style bottom-up backbone producing C2..C5
//! at strides 4/8/16/32, a top-down feature pyramid P2..P5 built from
//! nearest-neighbor upsampling plus 3x3x3 lateral convolutions, and twin
//! classification/regression heads shared across levels.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal};

use super::ops::{
    conv3d_backward, conv3d_forward, group_norm_backward, group_norm_forward, relu_backward,
    relu_forward, upsample2_backward, upsample2_forward, ConvSpec, GroupNormSpec,
};
use super::tensor::Tensor;
use crate::anchors::PyramidLevel;
use crate::mathutil;
use crate::rng::rng_from_seed;
use crate::vol::Volume;

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum NetError {
    #[error("unsupported backbone depth {0}; expected one of 10, 18, 34, 50, 101")]
    BadDepth(u32),
    #[error("input has {got} channels, model expects {want}")]
    ChannelMismatch { got: usize, want: usize },
    #[error("input dims {0:?} must be divisible by 32")]
    DimsNotDivisible([usize; 3]),
    #[error("invalid config: {0}")]
    BadConfig(&'static str),
}

/// Bottom-up backbone settings.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub depth: u32,
    /// Output width of each of the four stages (C2..C5).
    pub widths: [usize; 4],
    pub in_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            depth: 10,
            widths: [16, 32, 64, 128],
            in_channels: 1,
        }
    }
}

impl BackboneConfig {
    /// Residual blocks per stage.
    pub fn block_counts(&self) -> Result<[usize; 4], NetError> {
        match self.depth {
            10 => Ok([1, 1, 1, 1]),
            18 => Ok([2, 2, 2, 2]),
            34 | 50 => Ok([3, 4, 6, 3]),
            101 => Ok([3, 4, 23, 3]),
            d => Err(NetError::BadDepth(d)),
        }
    }

    /// Depths of 50 and up use bottleneck blocks.
    pub fn bottleneck(&self) -> bool {
        self.depth >= 50
    }
}

/// Full detector architecture settings.
#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub backbone: BackboneConfig,
    /// Shared channel width of the pyramid levels and head towers.
    pub fpn_width: usize,
    /// Convolutions per head tower before the output layer.
    pub head_depth: usize,
    /// Foreground class count K; the classifier emits 1+K per anchor.
    pub class_count: usize,
    pub anchors_per_location: usize,
    /// Requested group count for group normalization.
    pub norm_groups: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            backbone: BackboneConfig::default(),
            fpn_width: 64,
            head_depth: 4,
            class_count: 5,
            anchors_per_location: 1,
            norm_groups: 8,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        self.backbone.block_counts()?;
        if self.fpn_width == 0 || self.head_depth == 0 {
            return Err(NetError::BadConfig("fpn width and head depth must be > 0"));
        }
        if self.class_count == 0 || self.anchors_per_location == 0 {
            return Err(NetError::BadConfig("class count and anchors must be > 0"));
        }
        if !(1..=2).contains(&self.backbone.in_channels) {
            return Err(NetError::BadConfig("input channels must be 1 or 2"));
        }
        Ok(())
    }

    pub fn cls_channels(&self) -> usize {
        (1 + self.class_count) * self.anchors_per_location
    }

    pub fn reg_channels(&self) -> usize {
        6 * self.anchors_per_location
    }
}

/// Named flat parameter storage.
#[derive(Clone, Debug)]
pub struct ParamStore {
    names: Vec<String>,
    data: Vec<Vec<f32>>,
}

impl ParamStore {
    fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            data: Vec::new(),
        }
    }

    fn register(&mut self, name: String, data: Vec<f32>) -> P {
        self.names.push(name);
        self.data.push(data);
        P(self.data.len() - 1)
    }

    pub fn entry_count(&self) -> usize {
        self.data.len()
    }

    pub fn scalar_count(&self) -> usize {
        self.data.iter().map(|d| d.len()).sum()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn values(&self, i: usize) -> &[f32] {
        &self.data[i]
    }

    pub fn values_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i]
    }

    fn get(&self, p: P) -> &[f32] {
        &self.data[p.0]
    }
}

/// Handle into a [`ParamStore`].
#[derive(Clone, Copy, Debug)]
struct P(usize);

/// Gradient buffers mirroring a [`ParamStore`] layout.
#[derive(Clone, Debug)]
pub struct Grads {
    bufs: Vec<Vec<f32>>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Grads {
            bufs: store.data.iter().map(|d| vec![0.0; d.len()]).collect(),
        }
    }

    pub fn zero(&mut self) {
        for b in self.bufs.iter_mut() {
            b.fill(0.0);
        }
    }

    pub fn buf(&self, i: usize) -> &[f32] {
        &self.bufs[i]
    }

    pub fn buf_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.bufs[i]
    }

    pub fn scale(&mut self, s: f32) {
        for b in self.bufs.iter_mut() {
            for v in b.iter_mut() {
                *v *= s;
            }
        }
    }

    pub fn add_from(&mut self, other: &Grads) {
        for (a, b) in self.bufs.iter_mut().zip(&other.bufs) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    fn get_mut(&mut self, p: P) -> &mut [f32] {
        &mut self.bufs[p.0]
    }

    /// Disjoint mutable access for a conv's weight and bias buffers.
    fn pair_mut(&mut self, a: P, b: P) -> (&mut [f32], &mut [f32]) {
        debug_assert_ne!(a.0, b.0);
        if a.0 < b.0 {
            let (lo, hi) = self.bufs.split_at_mut(b.0);
            (&mut lo[a.0], &mut hi[0])
        } else {
            let (lo, hi) = self.bufs.split_at_mut(a.0);
            (&mut hi[0], &mut lo[b.0])
        }
    }
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: rand_chacha::ChaCha8Rng,
}

impl Builder<'_> {
    fn conv(
        &mut self,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        bias: bool,
    ) -> Conv3d {
        let spec = ConvSpec {
            in_c,
            out_c,
            k,
            stride,
        };
        let fan_in = (in_c * k * k * k) as f64;
        let std = mathutil::sqrt(2.0 / fan_in);
        let w: Vec<f32> = (0..spec.weight_len())
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                (z * std) as f32
            })
            .collect();
        let w = self.store.register(format!("{name}.w"), w);
        let b = bias.then(|| self.store.register(format!("{name}.b"), vec![0.0; out_c]));
        Conv3d { spec, w, b }
    }

    fn norm(&mut self, name: &str, channels: usize, groups: usize) -> Norm {
        let spec = GroupNormSpec::for_channels(channels, groups);
        let gamma = self
            .store
            .register(format!("{name}.gamma"), vec![1.0; channels]);
        let beta = self
            .store
            .register(format!("{name}.beta"), vec![0.0; channels]);
        Norm { spec, gamma, beta }
    }
}

#[derive(Clone, Debug)]
struct Conv3d {
    spec: ConvSpec,
    w: P,
    b: Option<P>,
}

impl Conv3d {
    fn forward(&self, ps: &ParamStore, x: &Tensor) -> Tensor {
        conv3d_forward(&self.spec, ps.get(self.w), self.b.map(|b| ps.get(b)), x)
    }

    fn backward(&self, ps: &ParamStore, g: &mut Grads, x: &Tensor, dy: &Tensor) -> Tensor {
        match self.b {
            Some(b) => {
                let (dw, db) = g.pair_mut(self.w, b);
                conv3d_backward(&self.spec, ps.get(self.w), x, dy, dw, Some(db))
            }
            None => conv3d_backward(&self.spec, ps.get(self.w), x, dy, g.get_mut(self.w), None),
        }
    }
}

#[derive(Clone, Debug)]
struct Norm {
    spec: GroupNormSpec,
    gamma: P,
    beta: P,
}

impl Norm {
    fn forward(&self, ps: &ParamStore, x: &Tensor) -> Tensor {
        group_norm_forward(&self.spec, ps.get(self.gamma), ps.get(self.beta), x)
    }

    fn backward(&self, ps: &ParamStore, g: &mut Grads, x: &Tensor, dy: &Tensor) -> Tensor {
        let (dgamma, dbeta) = g.pair_mut(self.gamma, self.beta);
        group_norm_backward(&self.spec, ps.get(self.gamma), x, dy, dgamma, dbeta)
    }
}

/// Basic residual block (two 3x3x3 convs) or bottleneck (1-3-1).
#[derive(Clone, Debug)]
enum Block {
    Basic {
        conv1: Conv3d,
        n1: Norm,
        conv2: Conv3d,
        n2: Norm,
        down: Option<(Conv3d, Norm)>,
    },
    Bottleneck {
        conv1: Conv3d,
        n1: Norm,
        conv2: Conv3d,
        n2: Norm,
        conv3: Conv3d,
        n3: Norm,
        down: Option<(Conv3d, Norm)>,
    },
}

/// Cached intermediates for one block's backward pass.
struct BlockCache {
    x: Tensor,
    c1: Tensor,
    r1: Tensor,
    c2: Tensor,
    /// Bottleneck only.
    r2: Option<Tensor>,
    c3: Option<Tensor>,
    /// Downsample conv output (norm input), when a projection shortcut exists.
    dc: Option<Tensor>,
    y: Tensor,
}

impl Block {
    fn forward(&self, ps: &ParamStore, x: Tensor) -> (Tensor, BlockCache) {
        match self {
            Block::Basic {
                conv1,
                n1,
                conv2,
                n2,
                down,
            } => {
                let c1 = conv1.forward(ps, &x);
                let r1 = relu_forward(&n1.forward(ps, &c1));
                let c2 = conv2.forward(ps, &r1);
                let mut sum = n2.forward(ps, &c2);
                let dc = match down {
                    Some((dconv, dnorm)) => {
                        let dc = dconv.forward(ps, &x);
                        sum.add_assign(&dnorm.forward(ps, &dc));
                        Some(dc)
                    }
                    None => {
                        sum.add_assign(&x);
                        None
                    }
                };
                let y = relu_forward(&sum);
                let cache = BlockCache {
                    x,
                    c1,
                    r1,
                    c2,
                    r2: None,
                    c3: None,
                    dc,
                    y: y.clone(),
                };
                (y, cache)
            }
            Block::Bottleneck {
                conv1,
                n1,
                conv2,
                n2,
                conv3,
                n3,
                down,
            } => {
                let c1 = conv1.forward(ps, &x);
                let r1 = relu_forward(&n1.forward(ps, &c1));
                let c2 = conv2.forward(ps, &r1);
                let r2 = relu_forward(&n2.forward(ps, &c2));
                let c3 = conv3.forward(ps, &r2);
                let mut sum = n3.forward(ps, &c3);
                let dc = match down {
                    Some((dconv, dnorm)) => {
                        let dc = dconv.forward(ps, &x);
                        sum.add_assign(&dnorm.forward(ps, &dc));
                        Some(dc)
                    }
                    None => {
                        sum.add_assign(&x);
                        None
                    }
                };
                let y = relu_forward(&sum);
                let cache = BlockCache {
                    x,
                    c1,
                    r1,
                    c2,
                    r2: Some(r2),
                    c3: Some(c3),
                    dc,
                    y: y.clone(),
                };
                (y, cache)
            }
        }
    }

    fn backward(&self, ps: &ParamStore, g: &mut Grads, cache: &BlockCache, dy: &Tensor) -> Tensor {
        let dsum = relu_backward(&cache.y, dy);
        match self {
            Block::Basic {
                conv1,
                n1,
                conv2,
                n2,
                down,
            } => {
                let dc2 = n2.backward(ps, g, &cache.c2, &dsum);
                let dr1 = conv2.backward(ps, g, &cache.r1, &dc2);
                let dn1 = relu_backward(&cache.r1, &dr1);
                let dc1 = n1.backward(ps, g, &cache.c1, &dn1);
                let mut dx = conv1.backward(ps, g, &cache.x, &dc1);
                match down {
                    Some((dconv, dnorm)) => {
                        let ddc =
                            dnorm.backward(ps, g, cache.dc.as_ref().expect("down cache"), &dsum);
                        dx.add_assign(&dconv.backward(ps, g, &cache.x, &ddc));
                    }
                    None => dx.add_assign(&dsum),
                }
                dx
            }
            Block::Bottleneck {
                conv1,
                n1,
                conv2,
                n2,
                conv3,
                n3,
                down,
            } => {
                let r2 = cache.r2.as_ref().expect("bottleneck cache");
                let c3 = cache.c3.as_ref().expect("bottleneck cache");
                let dc3 = n3.backward(ps, g, c3, &dsum);
                let dr2 = conv3.backward(ps, g, r2, &dc3);
                let dn2 = relu_backward(r2, &dr2);
                let dc2 = n2.backward(ps, g, &cache.c2, &dn2);
                let dr1 = conv2.backward(ps, g, &cache.r1, &dc2);
                let dn1 = relu_backward(&cache.r1, &dr1);
                let dc1 = n1.backward(ps, g, &cache.c1, &dn1);
                let mut dx = conv1.backward(ps, g, &cache.x, &dc1);
                match down {
                    Some((dconv, dnorm)) => {
                        let ddc =
                            dnorm.backward(ps, g, cache.dc.as_ref().expect("down cache"), &dsum);
                        dx.add_assign(&dconv.backward(ps, g, &cache.x, &ddc));
                    }
                    None => dx.add_assign(&dsum),
                }
                dx
            }
        }
    }
}

/// One head tower: `head_depth` conv+ReLU layers and an output conv, shared
/// across pyramid levels.
#[derive(Clone, Debug)]
struct Head {
    tower: Vec<Conv3d>,
    out: Conv3d,
}

struct HeadCache {
    /// Tower inputs per layer (first entry is the pyramid feature), then the
    /// ReLU outputs which feed the next layer.
    inputs: Vec<Tensor>,
}

impl Head {
    fn forward(&self, ps: &ParamStore, p: &Tensor) -> (Tensor, HeadCache) {
        let mut inputs = Vec::with_capacity(self.tower.len() + 1);
        let mut cur = p.clone();
        for conv in &self.tower {
            let next = relu_forward(&conv.forward(ps, &cur));
            inputs.push(cur);
            cur = next;
        }
        let out = self.out.forward(ps, &cur);
        inputs.push(cur);
        (out, HeadCache { inputs })
    }

    fn backward(&self, ps: &ParamStore, g: &mut Grads, cache: &HeadCache, dout: &Tensor) -> Tensor {
        let last = cache.inputs.len() - 1;
        let mut grad = self.out.backward(ps, g, &cache.inputs[last], dout);
        for (i, conv) in self.tower.iter().enumerate().rev() {
            // inputs[i+1] is this conv's relu output
            let drelu = relu_backward(&cache.inputs[i + 1], &grad);
            grad = conv.backward(ps, g, &cache.inputs[i], &drelu);
        }
        grad
    }
}

/// Bottom-up and top-down feature volumes from one forward pass.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub c: [Tensor; 4],
    pub p: [Tensor; 4],
}

/// Raw per-level head outputs: `(1+K)*n_a` classification channels and
/// `6*n_a` regression channels, anchor-major within each block.
#[derive(Clone, Debug)]
pub struct LevelOutput {
    pub level: PyramidLevel,
    pub cls: Tensor,
    pub reg: Tensor,
}

#[derive(Clone, Debug)]
pub struct HeadOutputs {
    pub levels: Vec<LevelOutput>,
}

impl HeadOutputs {
    pub fn level(&self, level: PyramidLevel) -> Option<&LevelOutput> {
        self.levels.iter().find(|l| l.level == level)
    }
}

pub(crate) struct ForwardCache {
    stem_x: Tensor,
    stem_c: Tensor,
    stem_y: Tensor,
    stages: [Vec<BlockCache>; 4],
    /// C2..C5 (stage outputs; also the lateral conv inputs).
    c: [Tensor; 4],
    /// P2..P5.
    p: [Tensor; 4],
    head_caches: Vec<(HeadCache, HeadCache)>,
}

/// The detector model: architecture config plus a named flat parameter list.
#[derive(Clone, Debug)]
pub struct DetectorModel {
    cfg: NetConfig,
    store: ParamStore,
    stem_conv: Conv3d,
    stem_norm: Norm,
    stages: [Vec<Block>; 4],
    lateral: [Conv3d; 4],
    cls_head: Head,
    reg_head: Head,
}

impl DetectorModel {
    pub fn new(cfg: NetConfig, seed: u64) -> Result<Self, NetError> {
        cfg.validate()?;
        let counts = cfg.backbone.block_counts()?;
        let bottleneck = cfg.backbone.bottleneck();
        let widths = cfg.backbone.widths;
        let groups = cfg.norm_groups;
        let mut store = ParamStore::new();
        let mut b = Builder {
            store: &mut store,
            rng: rng_from_seed(seed),
        };

        let stem_conv = b.conv("stem.conv", cfg.backbone.in_channels, widths[0], 3, 2, false);
        let stem_norm = b.norm("stem.norm", widths[0], groups);

        let mut stages: [Vec<Block>; 4] = [vec![], vec![], vec![], vec![]];
        let mut in_c = widths[0];
        for (si, stage) in stages.iter_mut().enumerate() {
            let out_c = widths[si];
            for bi in 0..counts[si] {
                let stride = if bi == 0 { 2 } else { 1 };
                let name = format!("stage{}.block{}", si + 1, bi);
                let needs_down = stride != 1 || in_c != out_c;
                let block = if bottleneck {
                    let inner = (out_c / 4).max(1);
                    Block::Bottleneck {
                        conv1: b.conv(&format!("{name}.conv1"), in_c, inner, 1, 1, false),
                        n1: b.norm(&format!("{name}.norm1"), inner, groups),
                        conv2: b.conv(&format!("{name}.conv2"), inner, inner, 3, stride, false),
                        n2: b.norm(&format!("{name}.norm2"), inner, groups),
                        conv3: b.conv(&format!("{name}.conv3"), inner, out_c, 1, 1, false),
                        n3: b.norm(&format!("{name}.norm3"), out_c, groups),
                        down: needs_down.then(|| {
                            (
                                b.conv(&format!("{name}.down.conv"), in_c, out_c, 1, stride, false),
                                b.norm(&format!("{name}.down.norm"), out_c, groups),
                            )
                        }),
                    }
                } else {
                    Block::Basic {
                        conv1: b.conv(&format!("{name}.conv1"), in_c, out_c, 3, stride, false),
                        n1: b.norm(&format!("{name}.norm1"), out_c, groups),
                        conv2: b.conv(&format!("{name}.conv2"), out_c, out_c, 3, 1, false),
                        n2: b.norm(&format!("{name}.norm2"), out_c, groups),
                        down: needs_down.then(|| {
                            (
                                b.conv(&format!("{name}.down.conv"), in_c, out_c, 1, stride, false),
                                b.norm(&format!("{name}.down.norm"), out_c, groups),
                            )
                        }),
                    }
                };
                stage.push(block);
                in_c = out_c;
            }
        }

        let f = cfg.fpn_width;
        let lateral = [
            b.conv("fpn.lateral2", widths[0], f, 3, 1, true),
            b.conv("fpn.lateral3", widths[1], f, 3, 1, true),
            b.conv("fpn.lateral4", widths[2], f, 3, 1, true),
            b.conv("fpn.lateral5", widths[3], f, 3, 1, true),
        ];

        let mut make_head = |name: &str, out_c: usize| {
            let tower = (0..cfg.head_depth)
                .map(|i| b.conv(&format!("{name}.tower{i}"), f, f, 3, 1, true))
                .collect();
            let out = b.conv(&format!("{name}.out"), f, out_c, 3, 1, true);
            Head { tower, out }
        };
        let cls_head = make_head("head.cls", cfg.cls_channels());
        let reg_head = make_head("head.reg", cfg.reg_channels());

        Ok(DetectorModel {
            cfg,
            store,
            stem_conv,
            stem_norm,
            stages,
            lateral,
            cls_head,
            reg_head,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn check_input(&self, x: &Tensor) -> Result<(), NetError> {
        if x.c != self.cfg.backbone.in_channels {
            return Err(NetError::ChannelMismatch {
                got: x.c,
                want: self.cfg.backbone.in_channels,
            });
        }
        if [x.d, x.h, x.w].iter().any(|d| d % 32 != 0) {
            return Err(NetError::DimsNotDivisible([x.d, x.h, x.w]));
        }
        Ok(())
    }

    pub(crate) fn forward_cached(&self, x: Tensor) -> Result<(HeadOutputs, ForwardCache), NetError> {
        self.check_input(&x)?;
        let ps = &self.store;
        let stem_c = self.stem_conv.forward(ps, &x);
        let stem_y = relu_forward(&self.stem_norm.forward(ps, &stem_c));

        let mut stage_caches: [Vec<BlockCache>; 4] = [vec![], vec![], vec![], vec![]];
        let mut c: Vec<Tensor> = Vec::with_capacity(4);
        let mut cur = stem_y.clone();
        for (si, stage) in self.stages.iter().enumerate() {
            for block in stage {
                let (next, cache) = block.forward(ps, cur);
                stage_caches[si].push(cache);
                cur = next;
            }
            c.push(cur.clone());
        }
        let c: [Tensor; 4] = match c.try_into() {
            Ok(arr) => arr,
            Err(_) => unreachable!("four stages"),
        };

        // top-down pyramid
        let p5 = self.lateral[3].forward(ps, &c[3]);
        let mut p4 = upsample2_forward(&p5);
        p4.add_assign(&self.lateral[2].forward(ps, &c[2]));
        let mut p3 = upsample2_forward(&p4);
        p3.add_assign(&self.lateral[1].forward(ps, &c[1]));
        let mut p2 = upsample2_forward(&p3);
        p2.add_assign(&self.lateral[0].forward(ps, &c[0]));
        let p = [p2, p3, p4, p5];

        let mut levels = Vec::with_capacity(4);
        let mut head_caches = Vec::with_capacity(4);
        for (li, level) in PyramidLevel::ALL.iter().enumerate() {
            let (cls, cls_cache) = self.cls_head.forward(ps, &p[li]);
            let (reg, reg_cache) = self.reg_head.forward(ps, &p[li]);
            levels.push(LevelOutput {
                level: *level,
                cls,
                reg,
            });
            head_caches.push((cls_cache, reg_cache));
        }

        Ok((
            HeadOutputs { levels },
            ForwardCache {
                stem_x: x,
                stem_c,
                stem_y,
                stages: stage_caches,
                c,
                p,
                head_caches,
            },
        ))
    }

    /// Inference forward: feature pyramid plus raw head outputs.
    pub fn forward(&self, v: &Volume) -> Result<(FeaturePyramid, HeadOutputs), NetError> {
        let (outputs, cache) = self.forward_cached(Tensor::from_volume(v))?;
        Ok((
            FeaturePyramid {
                c: cache.c,
                p: cache.p,
            },
            outputs,
        ))
    }

    /// Accumulates parameter gradients for per-level head-output gradients.
    pub(crate) fn backward(
        &self,
        cache: &ForwardCache,
        dcls: &[Tensor],
        dreg: &[Tensor],
        grads: &mut Grads,
    ) {
        let ps = &self.store;
        // heads, collecting gradient on each pyramid level
        let mut dp: Vec<Tensor> = (0..4)
            .map(|li| Tensor::zeros(self.cfg.fpn_width, cache.p[li].d, cache.p[li].h, cache.p[li].w))
            .collect();
        for li in 0..4 {
            let (cls_cache, reg_cache) = &cache.head_caches[li];
            dp[li].add_assign(&self.cls_head.backward(ps, grads, cls_cache, &dcls[li]));
            dp[li].add_assign(&self.reg_head.backward(ps, grads, reg_cache, &dreg[li]));
        }

        // top-down pyramid in reverse: P2 feeds P3 through the upsample, etc.
        let mut dc: Vec<Tensor> = (0..4)
            .map(|li| Tensor::zeros(cache.c[li].c, cache.c[li].d, cache.c[li].h, cache.c[li].w))
            .collect();
        for li in 0..4 {
            let dpl = dp[li].clone();
            dc[li].add_assign(&self.lateral[li].backward(ps, grads, &cache.c[li], &dpl));
            if li < 3 {
                dp[li + 1].add_assign(&upsample2_backward(&dpl));
            }
        }

        // backbone stages in reverse
        let mut grad = dc.pop().expect("four stage grads"); // dC5
        for si in (0..4).rev() {
            for (block, bc) in self.stages[si].iter().zip(&cache.stages[si]).rev() {
                grad = block.backward(ps, grads, bc, &grad);
            }
            if si > 0 {
                grad.add_assign(&dc[si - 1]);
            }
        }

        // stem
        let dn = relu_backward(&cache.stem_y, &grad);
        let dcv = self.stem_norm.backward(ps, grads, &cache.stem_c, &dn);
        let _ = self
            .stem_conv
            .backward(ps, grads, &cache.stem_x, &dcv);
    }
}
