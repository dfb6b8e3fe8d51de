//! Layers with explicit forward/backward passes.
//!
//! Activations are feature-major: a batch of `N` samples with `F` features
//! is an `F × N` matrix, and a convolutional feature map with `C` channels
//! is `C × (N·H·W)`.  Batch normalization therefore always reduces over
//! rows, and a 3×3 convolution is a single GEMM over an im2col buffer.
//!
//! `forward_train` returns a cache that owns everything `backward` needs,
//! so one layer can be run on several inputs (the two branches) before any
//! backward pass.  `backward` accumulates into the parameter gradients.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use crate::error::{Error, Result};

/// A learnable tensor (or a persistent buffer) with its gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
}

impl Param {
    pub fn new(shape: Vec<usize>, value: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![0.0; value.len()];
        Self { shape, value, grad }
    }

    pub fn filled(shape: Vec<usize>, v: f32) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![v; n])
    }

    fn uniform(shape: Vec<usize>, bound: f32, rng: &mut impl Rng) -> Self {
        let n = shape.iter().product();
        let value = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        Self::new(shape, value)
    }

    pub fn as_matrix(&self) -> ArrayView2<'_, f32> {
        ArrayView2::from_shape((self.shape[0], self.shape[1..].iter().product()), &self.value)
            .expect("param shape matches storage")
    }

    fn add_grad(&mut self, g: ArrayView2<f32>) {
        for (dst, src) in self.grad.iter_mut().zip(g.iter()) {
            *dst += *src;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Whether a named tensor is trained or only carried along (running stats).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorKind {
    Param,
    Buffer,
}

pub struct NamedTensor<'a> {
    pub name: String,
    pub kind: TensorKind,
    pub tensor: &'a mut Param,
}

/// Shared enumeration of a module's tensors in a fixed order.
pub trait Parameterized {
    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedTensor<'a>>);

    fn named_tensors(&mut self) -> Vec<NamedTensor<'_>> {
        let mut out = Vec::new();
        self.tensors_mut("", &mut out);
        out
    }

    fn zero_grad(&mut self) {
        for t in self.named_tensors() {
            t.tensor.zero_grad();
        }
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Feature-major batch of images or convolutional features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    /// `channels × (batch·height·width)`.
    pub data: Array2<f32>,
}

impl FeatureMap {
    pub fn spatial(&self) -> usize {
        self.height * self.width
    }
}

/// Square convolution (`kernel` 1 or 3) with "same" padding, no bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// `out × (in·k·k)`.
    pub weight: Param,
}

pub struct ConvCache {
    col: Array2<f32>,
    in_shape: (usize, usize, usize, usize),
    need_input_grad: bool,
}

impl Conv2d {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, rng: &mut impl Rng) -> Self {
        assert!(kernel % 2 == 1, "odd kernels only");
        let fan_in = in_channels * kernel * kernel;
        let bound = 1.0 / (fan_in as f32).sqrt();
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            weight: Param::uniform(vec![out_channels, fan_in], bound, rng),
        }
    }

    fn pad(&self) -> isize {
        (self.kernel / 2) as isize
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let o = |s: usize| (s + 2 * (self.kernel / 2) - self.kernel) / self.stride + 1;
        (o(h), o(w))
    }

    fn im2col(&self, x: &FeatureMap) -> Array2<f32> {
        let (k, pad) = (self.kernel, self.pad());
        let (oh, ow) = self.output_size(x.height, x.width);
        let (h, w, n) = (x.height as isize, x.width as isize, x.batch);
        let cols = n * oh * ow;
        let mut col = Array2::<f32>::zeros((x.channels * k * k, cols));
        let src = x.data.as_slice().expect("feature maps are contiguous");
        let plane = x.height * x.width;
        let dst = col.as_slice_mut().expect("fresh array is contiguous");
        for c in 0..x.channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let out_row = &mut dst[row * cols..(row + 1) * cols];
                    for b in 0..n {
                        let base = (c * n + b) * plane;
                        for oy in 0..oh {
                            let iy = (oy * self.stride) as isize + ky as isize - pad;
                            if iy < 0 || iy >= h {
                                continue;
                            }
                            let o_base = (b * oh + oy) * ow;
                            let i_base = base + iy as usize * x.width;
                            for ox in 0..ow {
                                let ix = (ox * self.stride) as isize + kx as isize - pad;
                                if ix >= 0 && ix < w {
                                    out_row[o_base + ox] = src[i_base + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, col: &Array2<f32>, shape: (usize, usize, usize, usize)) -> Array2<f32> {
        let (k, pad) = (self.kernel, self.pad());
        let (c_in, n, h, w) = shape;
        let (oh, ow) = self.output_size(h, w);
        let cols = n * oh * ow;
        let plane = h * w;
        let mut out = Array2::<f32>::zeros((c_in, n * plane));
        let dst = out.as_slice_mut().expect("fresh array is contiguous");
        let src = col.as_slice().expect("contiguous");
        for c in 0..c_in {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let in_row = &src[row * cols..(row + 1) * cols];
                    for b in 0..n {
                        let base = (c * n + b) * plane;
                        for oy in 0..oh {
                            let iy = (oy * self.stride) as isize + ky as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let o_base = (b * oh + oy) * ow;
                            let i_base = base + iy as usize * w;
                            for ox in 0..ow {
                                let ix = (ox * self.stride) as isize + kx as isize - pad;
                                if ix >= 0 && ix < w as isize {
                                    dst[i_base + ix as usize] += in_row[o_base + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn apply(&self, col: &Array2<f32>, x: &FeatureMap) -> FeatureMap {
        let (oh, ow) = self.output_size(x.height, x.width);
        FeatureMap {
            channels: self.out_channels,
            batch: x.batch,
            height: oh,
            width: ow,
            data: self.weight.as_matrix().dot(col),
        }
    }

    pub fn forward_train(&self, x: &FeatureMap, need_input_grad: bool) -> (FeatureMap, ConvCache) {
        let col = self.im2col(x);
        let out = self.apply(&col, x);
        (
            out,
            ConvCache {
                col,
                in_shape: (x.channels, x.batch, x.height, x.width),
                need_input_grad,
            },
        )
    }

    pub fn forward_eval(&self, x: &FeatureMap) -> FeatureMap {
        let col = self.im2col(x);
        self.apply(&col, x)
    }

    pub fn backward(&mut self, cache: ConvCache, grad_out: &Array2<f32>) -> Option<Array2<f32>> {
        let dw = grad_out.dot(&cache.col.t());
        self.weight.add_grad(dw.view());
        if !cache.need_input_grad {
            return None;
        }
        let dcol = self.weight.as_matrix().t().dot(grad_out);
        Some(self.col2im(&dcol, cache.in_shape))
    }
}

impl Parameterized for Conv2d {
    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedTensor<'a>>) {
        out.push(NamedTensor {
            name: join(prefix, "weight"),
            kind: TensorKind::Param,
            tensor: &mut self.weight,
        });
    }
}

/// Fully connected layer on `in × N` input.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
}

pub struct LinearCache {
    input: Array2<f32>,
}

impl Linear {
    pub fn new(inputs: usize, outputs: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (inputs as f32).sqrt();
        let weight = Param::uniform(vec![outputs, inputs], bound, rng);
        let bias = bias.then(|| Param::uniform(vec![outputs], bound, rng));
        Self { weight, bias }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn forward_eval(&self, x: ArrayView2<f32>) -> Array2<f32> {
        let mut y = self.weight.as_matrix().dot(&x);
        if let Some(b) = &self.bias {
            for (mut row, &bv) in y.axis_iter_mut(Axis(0)).zip(&b.value) {
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
        y
    }

    pub fn forward_train(&self, x: Array2<f32>) -> (Array2<f32>, LinearCache) {
        let y = self.forward_eval(x.view());
        (y, LinearCache { input: x })
    }

    pub fn backward(&mut self, cache: LinearCache, grad_out: &Array2<f32>) -> Array2<f32> {
        self.weight.add_grad(grad_out.dot(&cache.input.t()).view());
        if let Some(b) = &mut self.bias {
            for (g, row) in b.grad.iter_mut().zip(grad_out.axis_iter(Axis(0))) {
                *g += row.sum();
            }
        }
        self.weight.as_matrix().t().dot(grad_out)
    }
}

impl Parameterized for Linear {
    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedTensor<'a>>) {
        out.push(NamedTensor {
            name: join(prefix, "weight"),
            kind: TensorKind::Param,
            tensor: &mut self.weight,
        });
        if let Some(b) = &mut self.bias {
            out.push(NamedTensor {
                name: join(prefix, "bias"),
                kind: TensorKind::Param,
                tensor: b,
            });
        }
    }
}

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

/// Batch normalization over the columns of each feature row.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
}

pub struct BnCache {
    xhat: Array2<f32>,
    inv_std: Array1<f32>,
}

impl BatchNorm {
    pub fn new(features: usize) -> Self {
        Self {
            gamma: Param::filled(vec![features], 1.0),
            beta: Param::filled(vec![features], 0.0),
            running_mean: Param::filled(vec![features], 0.0),
            running_var: Param::filled(vec![features], 1.0),
        }
    }

    /// Normalizes with batch statistics and folds them into the running
    /// estimates (unbiased variance, momentum 0.1).
    pub fn forward_train(&mut self, mut x: Array2<f32>) -> Result<(Array2<f32>, BnCache)> {
        let m = x.ncols();
        if m < 2 {
            return Err(Error::InvalidInput(format!(
                "batch normalization in training mode needs at least 2 values per feature, got {m}"
            )));
        }
        let mut inv_std = Array1::<f32>::zeros(x.nrows());
        for (f, mut row) in x.axis_iter_mut(Axis(0)).enumerate() {
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / m as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / m as f64;
            let istd = 1.0 / (var + BN_EPS as f64).sqrt();
            inv_std[f] = istd as f32;
            let (mean32, istd32) = (mean as f32, istd as f32);
            row.iter_mut().for_each(|v| *v = (*v - mean32) * istd32);
            let unbiased = var * m as f64 / (m - 1) as f64;
            let rm = &mut self.running_mean.value[f];
            *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * mean32;
            let rv = &mut self.running_var.value[f];
            *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * unbiased as f32;
        }
        let xhat = x.clone();
        self.affine(&mut x);
        Ok((x, BnCache { xhat, inv_std }))
    }

    fn affine(&self, x: &mut Array2<f32>) {
        for ((mut row, &g), &b) in x.axis_iter_mut(Axis(0)).zip(&self.gamma.value).zip(&self.beta.value) {
            row.iter_mut().for_each(|v| *v = g * *v + b);
        }
    }

    pub fn forward_eval(&self, mut x: Array2<f32>) -> Array2<f32> {
        for (f, mut row) in x.axis_iter_mut(Axis(0)).enumerate() {
            let mean = self.running_mean.value[f];
            let istd = 1.0 / (self.running_var.value[f] + BN_EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * istd);
        }
        self.affine(&mut x);
        x
    }

    pub fn backward(&mut self, cache: BnCache, grad_out: &Array2<f32>) -> Array2<f32> {
        let m = grad_out.ncols() as f32;
        let mut grad_in = Array2::<f32>::zeros(grad_out.dim());
        for f in 0..grad_out.nrows() {
            let dy = grad_out.row(f);
            let xh = cache.xhat.row(f);
            let sum_dy: f32 = dy.sum();
            let sum_dy_xh: f32 = dy.dot(&xh);
            self.beta.grad[f] += sum_dy;
            self.gamma.grad[f] += sum_dy_xh;
            let k = self.gamma.value[f] * cache.inv_std[f] / m;
            Zip::from(grad_in.row_mut(f))
                .and(&dy)
                .and(&xh)
                .for_each(|g, &d, &x| *g = k * (m * d - sum_dy - x * sum_dy_xh));
        }
        grad_in
    }
}

impl Parameterized for BatchNorm {
    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedTensor<'a>>) {
        let Self {
            gamma,
            beta,
            running_mean,
            running_var,
        } = self;
        for (name, kind, tensor) in [
            ("weight", TensorKind::Param, gamma),
            ("bias", TensorKind::Param, beta),
            ("running_mean", TensorKind::Buffer, running_mean),
            ("running_var", TensorKind::Buffer, running_var),
        ] {
            out.push(NamedTensor {
                name: join(prefix, name),
                kind,
                tensor,
            });
        }
    }
}

pub fn relu(mut x: Array2<f32>) -> Array2<f32> {
    x.iter_mut().for_each(|v| *v = v.max(0.0));
    x
}

/// Gradient of ReLU given its output.
pub fn relu_backward(output: &Array2<f32>, mut grad: Array2<f32>) -> Array2<f32> {
    Zip::from(&mut grad).and(output).for_each(|g, &o| {
        if o <= 0.0 {
            *g = 0.0
        }
    });
    grad
}

/// Mean over the spatial positions of each sample: `C × (N·H·W)` → `C × N`.
pub fn global_avg_pool(x: &FeatureMap) -> Array2<f32> {
    let s = x.spatial();
    let mut out = Array2::<f32>::zeros((x.channels, x.batch));
    for (c, row) in x.data.axis_iter(Axis(0)).enumerate() {
        let row = row.as_slice().expect("contiguous rows");
        for b in 0..x.batch {
            out[[c, b]] = row[b * s..(b + 1) * s].iter().sum::<f32>() / s as f32;
        }
    }
    out
}

pub fn global_avg_pool_backward(grad: &Array2<f32>, height: usize, width: usize) -> Array2<f32> {
    let s = height * width;
    let (c, n) = grad.dim();
    let mut out = Array2::<f32>::zeros((c, n * s));
    for ((ci, b), &g) in grad.indexed_iter() {
        let v = g / s as f32;
        for j in 0..s {
            out[[ci, b * s + j]] = v;
        }
    }
    out
}

/// One step of SGD with momentum and coupled L2 weight decay:
/// `buf = momentum * buf + (grad + wd * value)`, `value -= lr * buf`.
pub fn sgd_update<T>(value: &mut [T], grad: &[T], buf: &mut [T], lr: T, momentum: T, weight_decay: T)
where
    T: num_traits::Float,
{
    for ((v, &g), b) in value.iter_mut().zip(grad).zip(buf.iter_mut()) {
        let d = g + weight_decay * *v;
        *b = momentum * *b + d;
        *v = *v - lr * *b;
    }
}
