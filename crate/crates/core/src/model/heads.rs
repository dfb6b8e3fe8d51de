use ndarray::{Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::*;
use crate::error::Result;

/// Widths of the projector `g` and predictor `q` heads.  DIR and DVR each
/// get their own heads with this shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    /// Number of linear layers in a projector (at least 1).
    pub projector_layers: usize,
    pub projector_hidden: usize,
    /// Output dimension `D` shared by every projector and predictor.
    pub output_dim: usize,
    /// Bottleneck width of the two-layer predictor.
    pub predictor_hidden: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            projector_layers: 3,
            projector_hidden: 64,
            output_dim: 32,
            predictor_hidden: 16,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.projector_layers == 0 {
            errs.push("heads.projector_layers must be at least 1".into());
        }
        for (name, v) in [
            ("projector_hidden", self.projector_hidden),
            ("output_dim", self.output_dim),
            ("predictor_hidden", self.predictor_hidden),
        ] {
            if v == 0 {
                errs.push(format!("heads.{name} must be positive"));
            }
        }
        errs
    }
}

#[derive(Clone, Debug)]
struct HeadLayer {
    linear: Linear,
    bn: Option<BatchNorm>,
    relu: bool,
}

/// Stack of linear layers, each optionally followed by batch norm and ReLU.
#[derive(Clone, Debug)]
pub struct MlpHead {
    layers: Vec<HeadLayer>,
}

pub struct HeadCache {
    layers: Vec<(LinearCache, Option<BnCache>, Option<Array2<f32>>)>,
}

impl MlpHead {
    /// Linear-BN-ReLU blocks, with a final Linear-BN and no activation.
    pub fn projector(inputs: usize, cfg: &HeadConfig, rng: &mut impl Rng) -> Self {
        let n = cfg.projector_layers;
        let layers = (0..n)
            .map(|i| {
                let fan_in = if i == 0 { inputs } else { cfg.projector_hidden };
                let fan_out = if i + 1 == n { cfg.output_dim } else { cfg.projector_hidden };
                HeadLayer {
                    linear: Linear::new(fan_in, fan_out, false, rng),
                    bn: Some(BatchNorm::new(fan_out)),
                    relu: i + 1 < n,
                }
            })
            .collect();
        Self { layers }
    }

    /// Bottleneck: Linear-BN-ReLU then a plain Linear with bias.
    pub fn predictor(cfg: &HeadConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.output_dim;
        let h = cfg.predictor_hidden;
        Self {
            layers: vec![
                HeadLayer {
                    linear: Linear::new(d, h, false, rng),
                    bn: Some(BatchNorm::new(h)),
                    relu: true,
                },
                HeadLayer {
                    linear: Linear::new(h, d, true, rng),
                    bn: None,
                    relu: false,
                },
            ],
        }
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].linear.inputs()
    }

    pub fn forward_train(&mut self, x: Array2<f32>) -> Result<(Array2<f32>, HeadCache)> {
        let mut h = x;
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &mut self.layers {
            let (a, lc) = layer.linear.forward_train(h);
            let (a, bc) = match &mut layer.bn {
                Some(bn) => {
                    let (a, c) = bn.forward_train(a)?;
                    (a, Some(c))
                }
                None => (a, None),
            };
            let (a, act) = if layer.relu {
                let a = relu(a);
                let keep = a.clone();
                (a, Some(keep))
            } else {
                (a, None)
            };
            caches.push((lc, bc, act));
            h = a;
        }
        Ok((h, HeadCache { layers: caches }))
    }

    pub fn forward_eval(&self, x: ArrayView2<f32>) -> Array2<f32> {
        let mut h = x.to_owned();
        for layer in &self.layers {
            h = layer.linear.forward_eval(h.view());
            if let Some(bn) = &layer.bn {
                h = bn.forward_eval(h);
            }
            if layer.relu {
                h = relu(h);
            }
        }
        h
    }

    pub fn backward(&mut self, cache: HeadCache, grad: &Array2<f32>) -> Array2<f32> {
        let mut g = grad.clone();
        for (layer, (lc, bc, act)) in self.layers.iter_mut().zip(cache.layers).rev() {
            if let Some(a) = act {
                g = relu_backward(&a, g);
            }
            if let (Some(bn), Some(c)) = (&mut layer.bn, bc) {
                g = bn.backward(c, &g);
            }
            g = layer.linear.backward(lc, &g);
        }
        g
    }
}

impl Parameterized for MlpHead {
    fn tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedTensor<'a>>) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.linear.tensors_mut(&format!("{prefix}.{i}.linear"), out);
            if let Some(bn) = &mut layer.bn {
                bn.tensors_mut(&format!("{prefix}.{i}.bn"), out);
            }
        }
    }
}
