use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Bound, ParamStore, Scalar, Tape, Tensor, Var};

use super::scaled_normal;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// One entry per block; each block is two 3x3 convolutions.
    pub widths: Vec<usize>,
    /// Blocks open with a stride-2 convolution until this stride is reached;
    /// later blocks keep the resolution and double their dilation instead.
    pub output_stride: usize,
    pub activation: Activation,
    /// Batch normalization after every convolution; replaces the conv bias.
    #[serde(default = "enabled")]
    pub batch_norm: bool,
}

fn enabled() -> bool {
    true
}

/// Running-statistics momentum of the backbone normalization layers.
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

impl BackboneConfig {
    pub fn stride16() -> Self {
        BackboneConfig {
            in_channels: 3,
            widths: vec![16, 32, 64, 128],
            output_stride: 16,
            activation: Activation::Relu,
            batch_norm: true,
        }
    }

    pub fn stride8() -> Self {
        BackboneConfig { output_stride: 8, ..Self::stride16() }
    }

    pub fn out_channels(&self) -> usize {
        *self.widths.last().unwrap_or(&self.in_channels)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.output_stride;
        if self.widths.is_empty() || self.widths.contains(&0) || self.in_channels == 0 {
            return Err(Error::Config(format!("backbone widths {:?} must be non-empty and positive", self.widths)));
        }
        if !s.is_power_of_two() || s < 2 || s > 1 << self.widths.len() {
            return Err(Error::Config(format!(
                "output stride {s} is not reachable with {} stride-2 blocks",
                self.widths.len()
            )));
        }
        Ok(())
    }

    /// `(stride, dilation)` of the first convolution of each block.
    pub fn schedule(&self) -> Vec<(usize, usize)> {
        let mut reached = 1;
        let mut dilation = 1;
        self.widths
            .iter()
            .map(|_| {
                if reached < self.output_stride {
                    reached *= 2;
                    (2, dilation)
                } else {
                    dilation *= 2;
                    (1, dilation)
                }
            })
            .collect()
    }

    fn gain(&self) -> f64 {
        match self.activation {
            Activation::Relu => 2.0,
            Activation::Tanh => 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    prefix: String,
    pub config: BackboneConfig,
}

impl Backbone {
    pub fn new(owner: &str, config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        Ok(Backbone { prefix: format!("{owner}.backbone"), config })
    }

    fn name(&self, block: usize, conv: usize, field: &str) -> String {
        format!("{}.block{block}.conv{conv}.{field}", self.prefix)
    }

    pub fn init<F: Scalar>(&self, store: &mut ParamStore<F>, rng: &mut impl Rng) -> Result<()> {
        let mut channels = self.config.in_channels;
        for (b, &width) in self.config.widths.iter().enumerate() {
            for conv in 0..2 {
                let fan_in = channels * 9;
                let kernel = scaled_normal([width, channels, 3, 3], fan_in, self.config.gain(), rng);
                store.insert(self.name(b, conv, "weight"), kernel)?;
                if self.config.batch_norm {
                    store.insert(self.name(b, conv, "bn.weight"), Tensor::full([width], F::one()))?;
                    store.insert(self.name(b, conv, "bn.bias"), Tensor::zeros([width]))?;
                    store.insert(self.name(b, conv, "bn.mean"), Tensor::zeros([width]))?;
                    store.insert(self.name(b, conv, "bn.var"), Tensor::full([width], F::one()))?;
                } else {
                    store.insert(self.name(b, conv, "bias"), Tensor::zeros([width]))?;
                }
                channels = width;
            }
        }
        Ok(())
    }

    /// `[N, C, H, W]` images to `[N, D, H / s, W / s]` features.
    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, bound: &Bound, images: Var) -> Result<Var> {
        let s = self.config.output_stride;
        let (h, w) = match *tape.shape(images) {
            [_, c, h, w] if c == self.config.in_channels => (h, w),
            ref other => {
                return Err(Error::Shape(format!(
                    "backbone expects [N, {}, H, W] images, got {other:?}",
                    self.config.in_channels
                )))
            }
        };
        if h % s != 0 || w % s != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("image extent {h}x{w} is not divisible by the output stride {s}")));
        }
        let mut x = images;
        for (b, (stride, dilation)) in self.config.schedule().into_iter().enumerate() {
            for conv in 0..2 {
                let k = bound.get(&self.name(b, conv, "weight"))?;
                let st = if conv == 0 { stride } else { 1 };
                if self.config.batch_norm {
                    x = tape.conv2d(x, k, None, st, dilation, dilation)?;
                    let (mean, var) = (bound.get(&self.name(b, conv, "bn.mean"))?, bound.get(&self.name(b, conv, "bn.var"))?);
                    let (mean, var) = (tape.value(mean).data().to_vec(), tape.value(var).data().to_vec());
                    let gamma = bound.get(&self.name(b, conv, "bn.weight"))?;
                    let beta = bound.get(&self.name(b, conv, "bn.bias"))?;
                    x = tape.batch_norm(&self.name(b, conv, "bn"), x, gamma, beta, (&mean, &var), F::lit(BN_EPS))?;
                } else {
                    let bias = bound.get(&self.name(b, conv, "bias"))?;
                    x = tape.conv2d(x, k, Some(bias), st, dilation, dilation)?;
                }
                x = match self.config.activation {
                    Activation::Relu => tape.relu(x)?,
                    Activation::Tanh => tape.tanh(x)?,
                };
            }
        }
        Ok(x)
    }
}
