use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::*;
use crate::augmentation::Image;
use crate::error::{Error, Result};
use crate::representation::dir_len;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncoderArch {
    /// Four stride-2 conv-BN-ReLU blocks.
    TinyCNN,
    /// ResNet-18 with a 3×3 stride-1 stem and no max-pool (small-image variant).
    ResNet18Lightly,
    /// ResNet-50 bottleneck layout with the same small-image stem.
    ResNet50,
    /// One hidden fully connected layer on flattened pixels.  Has no
    /// convolutional feature map, so attention maps are unavailable.
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub arch: EncoderArch,
    /// Width `d` of the representation produced by the last layer.
    pub output_dim: usize,
    /// Disentangling ratio: fraction of `output_dim` given to the DIR block.
    pub dr: f64,
    /// Side length of the square input images.
    pub input_size: usize,
    pub in_channels: usize,
    /// Channels of the first stage; each later stage doubles it.
    pub base_width: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            arch: EncoderArch::TinyCNN,
            output_dim: 64,
            dr: 0.8,
            input_size: 32,
            in_channels: 3,
            base_width: 16,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if let Err(e) = dir_len(self.output_dim, self.dr) {
            errs.push(format!("encoder.dr / encoder.output_dim: {e}"));
        }
        if self.input_size < crate::augmentation::MIN_IMAGE_SIDE {
            errs.push(format!(
                "encoder.input_size must be at least {}, got {}",
                crate::augmentation::MIN_IMAGE_SIDE,
                self.input_size
            ));
        }
        if self.in_channels != 1 && self.in_channels != 3 {
            errs.push(format!("encoder.in_channels must be 1 or 3, got {}", self.in_channels));
        }
        if self.base_width == 0 {
            errs.push("encoder.base_width must be positive".into());
        }
        errs
    }

    pub fn dir_dim(&self) -> Result<usize> {
        dir_len(self.output_dim, self.dr)
    }
}

/// Convolution, batch normalization and an optional ReLU.
#[derive(Clone, Debug)]
struct Unit {
    conv: Conv2d,
    bn: BatchNorm,
    relu: bool,
}

struct UnitCache {
    conv: ConvCache,
    bn: BnCache,
    out: Option<Array2<f32>>,
}

impl Unit {
    fn new(cin: usize, cout: usize, kernel: usize, stride: usize, relu: bool, rng: &mut impl Rng) -> Self {
        Self {
            conv: Conv2d::new(cin, cout, kernel, stride, rng),
            bn: BatchNorm::new(cout),
            relu,
        }
    }

    fn forward_train(&mut self, x: &FeatureMap, need_input_grad: bool) -> Result<(FeatureMap, UnitCache)> {
        let (c, conv) = self.conv.forward_train(x, need_input_grad);
        let meta = c.meta();
        let (mut y, bn) = self.bn.forward_train(c.data)?;
        let out = if self.relu {
            y = relu(y);
            Some(y.clone())
        } else {
            None
        };
        let fm = FeatureMap { data: y, ..meta };
        Ok((fm, UnitCache { conv, bn, out }))
    }

    fn forward_eval(&self, x: &FeatureMap) -> FeatureMap {
        let c = self.conv.forward_eval(x);
        let meta = c.meta();
        let mut y = self.bn.forward_eval(c.data);
        if self.relu {
            y = relu(y);
        }
        FeatureMap { data: y, ..meta }
    }

    fn backward(&mut self, cache: UnitCache, grad: Array2<f32>) -> Option<Array2<f32>> {
        let g = match &cache.out {
            Some(o) => relu_backward(o, grad),
            None => grad,
        };
        let g = self.bn.backward(cache.bn, &g);
        self.conv.backward(cache.conv, &g)
    }

    fn tensors<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedTensor<'a>>) {
        self.conv.tensors_mut(&format!("{prefix}.conv"), out);
        self.bn.tensors_mut(&format!("{prefix}.bn"), out);
    }
}

impl FeatureMap {
    fn meta(&self) -> FeatureMap {
        FeatureMap {
            channels: self.channels,
            batch: self.batch,
            height: self.height,
            width: self.width,
            data: Array2::zeros((0, 0)),
        }
    }
}

#[derive(Clone, Debug)]
enum Block {
    Plain(Unit),
    /// Residual block; `units` are applied in sequence, the last without
    /// ReLU, and the activation follows the sum with the shortcut.
    Residual { units: Vec<Unit>, shortcut: Option<Unit> },
}

enum BlockCache {
    Plain(UnitCache),
    Residual {
        units: Vec<UnitCache>,
        shortcut: Option<UnitCache>,
        out: Array2<f32>,
    },
}

impl Block {
    fn residual(units: Vec<Unit>, cin: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let cout = units.last().expect("non-empty block").conv.out_channels;
        let shortcut = (stride != 1 || cin != cout).then(|| Unit::new(cin, cout, 1, stride, false, rng));
        Block::Residual { units, shortcut }
    }

    fn out_channels(&self) -> usize {
        match self {
            Block::Plain(u) => u.conv.out_channels,
            Block::Residual { units, .. } => units.last().expect("non-empty block").conv.out_channels,
        }
    }

    fn forward_train(&mut self, x: &FeatureMap, need_input_grad: bool) -> Result<(FeatureMap, BlockCache)> {
        match self {
            Block::Plain(u) => {
                let (y, c) = u.forward_train(x, need_input_grad)?;
                Ok((y, BlockCache::Plain(c)))
            }
            Block::Residual { units, shortcut } => {
                let mut caches = Vec::with_capacity(units.len());
                let mut h: Option<FeatureMap> = None;
                for u in units.iter_mut() {
                    let input = h.as_ref().unwrap_or(x);
                    let (y, c) = u.forward_train(input, true)?;
                    caches.push(c);
                    h = Some(y);
                }
                let mut y = h.expect("non-empty block");
                let sc = match shortcut {
                    Some(s) => {
                        let (sy, c) = s.forward_train(x, true)?;
                        y.data += &sy.data;
                        Some(c)
                    }
                    None => {
                        y.data += &x.data;
                        None
                    }
                };
                y.data = relu(y.data);
                let out = y.data.clone();
                Ok((
                    y,
                    BlockCache::Residual {
                        units: caches,
                        shortcut: sc,
                        out,
                    },
                ))
            }
        }
    }

    fn forward_eval(&self, x: &FeatureMap) -> FeatureMap {
        match self {
            Block::Plain(u) => u.forward_eval(x),
            Block::Residual { units, shortcut } => {
                let mut h = units[0].forward_eval(x);
                for u in &units[1..] {
                    h = u.forward_eval(&h);
                }
                match shortcut {
                    Some(s) => h.data += &s.forward_eval(x).data,
                    None => h.data += &x.data,
                }
                h.data = relu(h.data);
                h
            }
        }
    }

    fn backward(&mut self, cache: BlockCache, grad: Array2<f32>) -> Option<Array2<f32>> {
        match (self, cache) {
            (Block::Plain(u), BlockCache::Plain(c)) => u.backward(c, grad),
            (
                Block::Residual { units, shortcut },
                BlockCache::Residual {
                    units: caches,
                    shortcut: sc_cache,
                    out,
                },
            ) => {
                let g = relu_backward(&out, grad);
                let mut main = g.clone();
                for (u, c) in units.iter_mut().zip(caches).rev() {
                    main = u.backward(c, main).expect("inner units propagate gradients");
                }
                let side = match (shortcut, sc_cache) {
                    (Some(s), Some(c)) => s.backward(c, g).expect("shortcut propagates gradients"),
                    _ => g,
                };
                Some(main + side)
            }
            _ => unreachable!("cache built by the same block"),
        }
    }

    fn tensors<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedTensor<'a>>) {
        match self {
            Block::Plain(u) => u.tensors(prefix, out),
            Block::Residual { units, shortcut } => {
                for (i, u) in units.iter_mut().enumerate() {
                    u.tensors(&format!("{prefix}.{i}"), out);
                }
                if let Some(s) = shortcut {
                    s.tensors(&format!("{prefix}.shortcut"), out);
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
enum Body {
    Conv(Vec<Block>),
    Mlp { hidden: Linear, bn: BatchNorm },
}

pub struct EncoderCache {
    body: BodyCache,
    last: LinearCache,
}

enum BodyCache {
    Conv {
        blocks: Vec<BlockCache>,
        height: usize,
        width: usize,
    },
    Mlp {
        hidden: LinearCache,
        bn: BnCache,
        act: Array2<f32>,
    },
}

/// Backbone `f` followed by the grouped last layer: rows `0..d_I` of the
/// last layer's weight produce the DIR block, the remaining rows the DVR.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    body: Body,
    pub last: Linear,
}

impl Encoder {
    pub fn new(config: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        let errs = config.validate();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let w = config.base_width;
        let cin = config.in_channels;
        let (body, features) = match config.arch {
            EncoderArch::TinyCNN => {
                let mut blocks = Vec::new();
                let mut c = cin;
                for mult in [1, 2, 4, 8] {
                    blocks.push(Block::Plain(Unit::new(c, w * mult, 3, 2, true, rng)));
                    c = w * mult;
                }
                (Body::Conv(blocks), c)
            }
            EncoderArch::ResNet18Lightly | EncoderArch::ResNet50 => {
                let bottleneck = config.arch == EncoderArch::ResNet50;
                let depths: [usize; 4] = if bottleneck { [3, 4, 6, 3] } else { [2, 2, 2, 2] };
                let mut blocks = vec![Block::Plain(Unit::new(cin, w, 3, 1, true, rng))];
                let mut c = w;
                for (stage, (&depth, mult)) in depths.iter().zip([1, 2, 4, 8]).enumerate() {
                    let planes = w * mult;
                    for j in 0..depth {
                        let stride = if stage > 0 && j == 0 { 2 } else { 1 };
                        let block = if bottleneck {
                            let units = vec![
                                Unit::new(c, planes, 1, 1, true, rng),
                                Unit::new(planes, planes, 3, stride, true, rng),
                                Unit::new(planes, planes * 4, 1, 1, false, rng),
                            ];
                            Block::residual(units, c, stride, rng)
                        } else {
                            let units = vec![
                                Unit::new(c, planes, 3, stride, true, rng),
                                Unit::new(planes, planes, 3, 1, false, rng),
                            ];
                            Block::residual(units, c, stride, rng)
                        };
                        c = block.out_channels();
                        blocks.push(block);
                    }
                }
                (Body::Conv(blocks), c)
            }
            EncoderArch::Mlp => {
                let inputs = cin * config.input_size * config.input_size;
                let hidden = w * 8;
                (
                    Body::Mlp {
                        hidden: Linear::new(inputs, hidden, false, rng),
                        bn: BatchNorm::new(hidden),
                    },
                    hidden,
                )
            }
        };
        let last = Linear::new(features, config.output_dim, true, rng);
        Ok(Self {
            config: config.clone(),
            body,
            last,
        })
    }

    pub fn is_convolutional(&self) -> bool {
        matches!(self.body, Body::Conv(_))
    }

    /// Packs a batch into the feature-major layout, checking sizes.
    pub fn input_map(&self, images: &[&Image]) -> Result<FeatureMap> {
        images_to_map(images, self.config.input_size, self.config.in_channels)
    }

    pub fn forward_train(&mut self, x: &FeatureMap) -> Result<(Array2<f32>, EncoderCache)> {
        let (features, body) = match &mut self.body {
            Body::Conv(blocks) => {
                let mut caches = Vec::with_capacity(blocks.len());
                let mut h: Option<FeatureMap> = None;
                for (i, b) in blocks.iter_mut().enumerate() {
                    let input = h.as_ref().unwrap_or(x);
                    let (y, c) = b.forward_train(input, i > 0)?;
                    caches.push(c);
                    h = Some(y);
                }
                let h = h.expect("at least one block");
                (
                    global_avg_pool(&h),
                    BodyCache::Conv {
                        blocks: caches,
                        height: h.height,
                        width: h.width,
                    },
                )
            }
            Body::Mlp { hidden, bn } => {
                let (a, hc) = hidden.forward_train(flatten(x));
                let (a, bc) = bn.forward_train(a)?;
                let act = relu(a);
                (
                    act.clone(),
                    BodyCache::Mlp {
                        hidden: hc,
                        bn: bc,
                        act,
                    },
                )
            }
        };
        let (y, last) = self.last.forward_train(features);
        Ok((y, EncoderCache { body, last }))
    }

    pub fn forward_eval(&self, x: &FeatureMap) -> Array2<f32> {
        let features = match &self.body {
            Body::Conv(_) => global_avg_pool(&self.conv_features(x).expect("convolutional body")),
            Body::Mlp { hidden, bn } => relu(bn.forward_eval(hidden.forward_eval(flatten(x).view()))),
        };
        self.last.forward_eval(features.view())
    }

    /// Last convolutional feature map in evaluation mode.
    pub fn conv_features(&self, x: &FeatureMap) -> Result<FeatureMap> {
        let Body::Conv(blocks) = &self.body else {
            return Err(Error::Unsupported(format!(
                "{:?} encoder has no convolutional feature map",
                self.config.arch
            )));
        };
        let mut h = blocks[0].forward_eval(x);
        for b in &blocks[1..] {
            h = b.forward_eval(&h);
        }
        Ok(h)
    }

    /// Accumulates parameter gradients given `dL/dy` (`d × N`).
    pub fn backward(&mut self, cache: EncoderCache, grad_y: &Array2<f32>) {
        let g = self.last.backward(cache.last, grad_y);
        match (&mut self.body, cache.body) {
            (Body::Conv(blocks), BodyCache::Conv { blocks: caches, height, width }) => {
                let mut g = global_avg_pool_backward(&g, height, width);
                for (b, c) in blocks.iter_mut().zip(caches).rev() {
                    match b.backward(c, g) {
                        Some(next) => g = next,
                        None => break,
                    }
                }
            }
            (Body::Mlp { hidden, bn }, BodyCache::Mlp { hidden: hc, bn: bc, act }) => {
                let g = relu_backward(&act, g);
                let g = bn.backward(bc, &g);
                hidden.backward(hc, &g);
            }
            _ => unreachable!("cache built by the same encoder"),
        }
    }
}

impl Parameterized for Encoder {
    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedTensor<'a>>) {
        let p = |s: &str| if prefix.is_empty() { s.to_string() } else { format!("{prefix}.{s}") };
        match &mut self.body {
            Body::Conv(blocks) => {
                for (i, b) in blocks.iter_mut().enumerate() {
                    b.tensors(&p(&format!("body.{i}")), out);
                }
            }
            Body::Mlp { hidden, bn } => {
                hidden.tensors_mut(&p("hidden"), out);
                bn.tensors_mut(&p("hidden_bn"), out);
            }
        }
        self.last.tensors_mut(&p("last"), out);
    }
}

pub fn images_to_map(images: &[&Image], size: usize, channels: usize) -> Result<FeatureMap> {
    if images.is_empty() {
        return Err(Error::InvalidInput("empty image batch".into()));
    }
    let plane = size * size;
    let n = images.len();
    let mut data = Array2::<f32>::zeros((channels, n * plane));
    for (b, img) in images.iter().enumerate() {
        if img.height() != size || img.width() != size || img.channels() != channels {
            return Err(Error::InvalidInput(format!(
                "image {b} is {}x{}x{}, encoder expects {size}x{size}x{channels}",
                img.height(),
                img.width(),
                img.channels()
            )));
        }
        for (s, px) in img.data().chunks_exact(channels).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                data[[c, b * plane + s]] = v;
            }
        }
    }
    Ok(FeatureMap {
        channels,
        batch: n,
        height: size,
        width: size,
        data,
    })
}

/// `C × (N·H·W)` → `(C·H·W) × N`.
fn flatten(x: &FeatureMap) -> Array2<f32> {
    let s = x.spatial();
    let mut out = Array2::<f32>::zeros((x.channels * s, x.batch));
    for c in 0..x.channels {
        for b in 0..x.batch {
            for j in 0..s {
                out[[c * s + j, b]] = x.data[[c, b * s + j]];
            }
        }
    }
    out
}
