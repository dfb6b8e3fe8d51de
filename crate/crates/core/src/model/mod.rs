//! Two-branch, parameter-shared network: encoder `f` with a grouped last
//! layer, per-part projectors `g_I`/`g_V` and, for the asymmetric
//! architecture, per-part predictors `q_I`/`q_V`.
//!
//! Both views of a pair go through the very same [`Network`] value, so
//! parameter sharing holds by construction.  Public outputs are
//! sample-major (`B × features`); internally layers are feature-major.

mod attention;
mod checkpoint;
mod encoder;
mod heads;
pub mod layers;

use ndarray::{concatenate, s, Array, Array2, ArrayView, ArrayView2, Axis, Dimension};
use num_traits::Zero;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use self::attention::{attention_energy, attention_map, Heatmap};
pub use self::checkpoint::{
    file_hash, Checkpoint, CheckpointMeta, StoredTensor, TensorRole, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use self::encoder::{images_to_map, Encoder, EncoderArch, EncoderCache, EncoderConfig};
pub use self::heads::{HeadCache, HeadConfig, MlpHead};
use self::layers::{NamedTensor, Parameterized, TensorKind};
use crate::augmentation::Image;
use crate::error::{Error, Result};

/// Symmetric (Barlow Twins style, no predictor) or asymmetric (Simsiam
/// style, predictor plus stop-gradient) architecture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Symmetric,
    Asymmetric,
}

impl Mode {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "symmetric" | "sym" => Some(Mode::Symmetric),
            "asymmetric" | "asym" => Some(Mode::Asymmetric),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub mode: Mode,
    pub encoder: EncoderConfig,
    pub heads: HeadConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::new(Mode::Asymmetric)
    }
}

impl ModelConfig {
    pub fn new(mode: Mode) -> Self {
        Self {
            mode,
            encoder: EncoderConfig::default(),
            heads: HeadConfig::default(),
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = self.encoder.validate();
        errs.extend(self.heads.validate());
        errs
    }
}

/// Outputs of one branch, sample-major.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchOutput {
    /// Full representation `[y_I | y_V]`, `B × d`.
    pub y: Array2<f32>,
    pub d_i: usize,
    pub z_i: Array2<f32>,
    pub z_v: Array2<f32>,
    pub p_i: Option<Array2<f32>>,
    pub p_v: Option<Array2<f32>>,
}

impl BranchOutput {
    pub fn y_i(&self) -> ArrayView2<'_, f32> {
        self.y.slice(s![.., ..self.d_i])
    }

    pub fn y_v(&self) -> ArrayView2<'_, f32> {
        self.y.slice(s![.., self.d_i..])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TwoBranchOutput {
    pub first: BranchOutput,
    pub second: BranchOutput,
}

pub struct BranchCache {
    encoder: EncoderCache,
    g_i: HeadCache,
    g_v: HeadCache,
    q_i: Option<HeadCache>,
    q_v: Option<HeadCache>,
}

/// Loss gradients for one branch, sample-major, matching [`BranchOutput`].
#[derive(Clone, Debug)]
pub struct BranchGrads {
    pub z_i: Array2<f64>,
    pub z_v: Array2<f64>,
    pub p_i: Option<Array2<f64>>,
    pub p_v: Option<Array2<f64>>,
}

/// A value cut out of the backward graph: it reads like the wrapped tensor
/// but any gradient sent to it is discarded.
#[derive(Clone, Debug, PartialEq)]
pub struct Detached<T>(T);

pub fn stop_gradient<A: Clone, D: Dimension>(t: ArrayView<'_, A, D>) -> Detached<Array<A, D>> {
    Detached(t.to_owned())
}

impl<A: Clone + Zero, D: Dimension> Detached<Array<A, D>> {
    pub fn value(&self) -> ArrayView<'_, A, D> {
        self.0.view()
    }

    /// Gradient with respect to the wrapped input: always zero.
    pub fn backward(&self, grad: &Array<A, D>) -> Array<A, D> {
        assert_eq!(grad.shape(), self.0.shape(), "gradient shape must match the detached value");
        Array::zeros(self.0.raw_dim())
    }
}

#[derive(Clone, Debug)]
pub struct Network {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub g_i: MlpHead,
    pub g_v: MlpHead,
    pub q_i: Option<MlpHead>,
    pub q_v: Option<MlpHead>,
    d_i: usize,
}

/// Named copy of one tensor of a network.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
}

const INIT_STREAM: u64 = 0x1D17;

fn to_sample_major(x: &Array2<f32>) -> Array2<f32> {
    x.t().as_standard_layout().into_owned()
}

fn grad_to_feature_major(g: &Array2<f64>) -> Array2<f32> {
    g.t().mapv(|v| v as f32).as_standard_layout().into_owned()
}

impl Network {
    /// Initializes all parameters from `seed`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let errs = config.validate();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(INIT_STREAM);
        let encoder = Encoder::new(&config.encoder, &mut rng)?;
        let d = config.encoder.output_dim;
        let d_i = config.encoder.dir_dim()?;
        let g_i = MlpHead::projector(d_i, &config.heads, &mut rng);
        let g_v = MlpHead::projector(d - d_i, &config.heads, &mut rng);
        let (q_i, q_v) = match config.mode {
            Mode::Asymmetric => (
                Some(MlpHead::predictor(&config.heads, &mut rng)),
                Some(MlpHead::predictor(&config.heads, &mut rng)),
            ),
            Mode::Symmetric => (None, None),
        };
        Ok(Self {
            config: config.clone(),
            encoder,
            g_i,
            g_v,
            q_i,
            q_v,
            d_i,
        })
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    pub fn dim(&self) -> usize {
        self.config.encoder.output_dim
    }

    pub fn dir_dim(&self) -> usize {
        self.d_i
    }

    /// Representation `y` (`B × d`) in evaluation mode.
    pub fn encode(&self, images: &[&Image]) -> Result<Array2<f32>> {
        let x = self.encoder.input_map(images)?;
        Ok(to_sample_major(&self.encoder.forward_eval(&x)))
    }

    fn branch_eval(&self, images: &[&Image]) -> Result<BranchOutput> {
        let x = self.encoder.input_map(images)?;
        let y = self.encoder.forward_eval(&x);
        let z_i = self.g_i.forward_eval(y.slice(s![..self.d_i, ..]));
        let z_v = self.g_v.forward_eval(y.slice(s![self.d_i.., ..]));
        let p_i = self.q_i.as_ref().map(|q| to_sample_major(&q.forward_eval(z_i.view())));
        let p_v = self.q_v.as_ref().map(|q| to_sample_major(&q.forward_eval(z_v.view())));
        Ok(BranchOutput {
            y: to_sample_major(&y),
            d_i: self.d_i,
            z_i: to_sample_major(&z_i),
            z_v: to_sample_major(&z_v),
            p_i,
            p_v,
        })
    }

    /// Both branches in evaluation mode (running normalization statistics).
    pub fn forward_pair(&self, v: &[&Image], v2: &[&Image]) -> Result<TwoBranchOutput> {
        if v.len() != v2.len() {
            return Err(Error::shape(v.len(), v2.len()));
        }
        Ok(TwoBranchOutput {
            first: self.branch_eval(v)?,
            second: self.branch_eval(v2)?,
        })
    }

    /// One branch in training mode; normalization layers use batch
    /// statistics and update their running estimates.
    pub fn forward_branch_train(&mut self, images: &[&Image]) -> Result<(BranchOutput, BranchCache)> {
        let x = self.encoder.input_map(images)?;
        let (y, encoder) = self.encoder.forward_train(&x)?;
        let (z_i, g_i) = self.g_i.forward_train(y.slice(s![..self.d_i, ..]).to_owned())?;
        let (z_v, g_v) = self.g_v.forward_train(y.slice(s![self.d_i.., ..]).to_owned())?;
        let (p_i, q_i) = match &mut self.q_i {
            Some(q) => {
                let (p, c) = q.forward_train(z_i.clone())?;
                (Some(to_sample_major(&p)), Some(c))
            }
            None => (None, None),
        };
        let (p_v, q_v) = match &mut self.q_v {
            Some(q) => {
                let (p, c) = q.forward_train(z_v.clone())?;
                (Some(to_sample_major(&p)), Some(c))
            }
            None => (None, None),
        };
        let out = BranchOutput {
            y: to_sample_major(&y),
            d_i: self.d_i,
            z_i: to_sample_major(&z_i),
            z_v: to_sample_major(&z_v),
            p_i,
            p_v,
        };
        let cache = BranchCache {
            encoder,
            g_i,
            g_v,
            q_i,
            q_v,
        };
        Ok((out, cache))
    }

    pub fn forward_pair_train(&mut self, v: &[&Image], v2: &[&Image]) -> Result<(TwoBranchOutput, [BranchCache; 2])> {
        if v.len() != v2.len() {
            return Err(Error::shape(v.len(), v2.len()));
        }
        let (first, c1) = self.forward_branch_train(v)?;
        let (second, c2) = self.forward_branch_train(v2)?;
        Ok((TwoBranchOutput { first, second }, [c1, c2]))
    }

    /// Accumulates parameter gradients for one branch.
    pub fn backward_branch(&mut self, cache: BranchCache, grads: &BranchGrads) {
        let head_grad = |q: &mut Option<MlpHead>, c: Option<HeadCache>, gz: &Array2<f64>, gp: &Option<Array2<f64>>| {
            let mut g = grad_to_feature_major(gz);
            if let (Some(q), Some(c), Some(gp)) = (q.as_mut(), c, gp.as_ref()) {
                g += &q.backward(c, &grad_to_feature_major(gp));
            }
            g
        };
        let gz_i = head_grad(&mut self.q_i, cache.q_i, &grads.z_i, &grads.p_i);
        let gz_v = head_grad(&mut self.q_v, cache.q_v, &grads.z_v, &grads.p_v);
        let gy_i = self.g_i.backward(cache.g_i, &gz_i);
        let gy_v = self.g_v.backward(cache.g_v, &gz_v);
        let gy = concatenate(Axis(0), &[gy_i.view(), gy_v.view()]).expect("matching batch width");
        self.encoder.backward(cache.encoder, &gy);
    }

    pub fn zero_grad(&mut self) {
        Parameterized::zero_grad(self);
    }

    /// Copies of every tensor in a fixed order.
    pub fn state(&self) -> Vec<TensorRecord> {
        let mut net = self.clone();
        net.named_tensors()
            .into_iter()
            .map(|t| TensorRecord {
                name: t.name,
                kind: t.kind,
                shape: t.tensor.shape.clone(),
                value: t.tensor.value.clone(),
            })
            .collect()
    }

    /// Overwrites tensor values; names and shapes must match exactly.
    pub fn load_state(&mut self, records: &[TensorRecord]) -> Result<()> {
        let mut tensors = self.named_tensors();
        if tensors.len() != records.len() {
            return Err(Error::Checkpoint(format!(
                "network has {} tensors, state has {}",
                tensors.len(),
                records.len()
            )));
        }
        for (t, r) in tensors.iter_mut().zip(records) {
            if t.name != r.name || t.tensor.shape != r.shape || t.kind != r.kind {
                return Err(Error::Checkpoint(format!(
                    "tensor mismatch: expected {} {:?}, found {} {:?}",
                    t.name, t.tensor.shape, r.name, r.shape
                )));
            }
            t.tensor.value.copy_from_slice(&r.value);
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.state()
            .iter()
            .filter(|t| t.kind == TensorKind::Param)
            .map(|t| t.value.len())
            .sum()
    }
}

impl Parameterized for Network {
    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedTensor<'a>>) {
        let p = |s: &str| if prefix.is_empty() { s.to_string() } else { format!("{prefix}.{s}") };
        self.encoder.tensors_mut(&p("encoder"), out);
        self.g_i.tensors_mut(&p("g_i"), out);
        self.g_v.tensors_mut(&p("g_v"), out);
        if let Some(q) = &mut self.q_i {
            q.tensors_mut(&p("q_i"), out);
        }
        if let Some(q) = &mut self.q_v {
            q.tensors_mut(&p("q_v"), out);
        }
    }
}
