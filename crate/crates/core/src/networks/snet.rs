use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Bound, ParamStore, Scalar, Tape, Tensor, Var};

use super::{scaled_normal, Backbone, BackboneConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SNetConfig {
    pub backbone: BackboneConfig,
    /// Dilation rate of each parallel 3x3 branch.
    pub rates: Vec<usize>,
}

impl Default for SNetConfig {
    fn default() -> Self {
        SNetConfig { backbone: BackboneConfig::stride8(), rates: vec![6, 12, 18, 24] }
    }
}

/// Dilated multi-rate saliency predictor; parameters live under `snet.*`.
#[derive(Clone, Debug)]
pub struct SNet {
    pub config: SNetConfig,
    pub backbone: Backbone,
}

impl SNet {
    pub const PREFIX: &'static str = "snet";

    pub fn new(config: SNetConfig) -> Result<Self> {
        if config.rates.is_empty() || config.rates.contains(&0) {
            return Err(Error::Config(format!("branch rates {:?} must be non-empty and positive", config.rates)));
        }
        let backbone = Backbone::new(Self::PREFIX, config.backbone.clone())?;
        Ok(SNet { config, backbone })
    }

    pub fn init<F: Scalar>(&self, store: &mut ParamStore<F>, rng: &mut impl Rng) -> Result<()> {
        self.backbone.init(store, rng)?;
        let d = self.config.backbone.out_channels();
        for i in 0..self.config.rates.len() {
            store.insert(format!("snet.branch{i}.weight"), scaled_normal([1, d, 3, 3], 9 * d, 1.0, rng))?;
            store.insert(format!("snet.branch{i}.bias"), Tensor::zeros([1]))?;
        }
        let centre = Tensor::from_fn([1, 1, 3, 3], |i| if i == 4 { F::one() } else { F::zero() });
        store.insert("snet.upsample.weight", centre)?;
        store.insert("snet.upsample.bias", Tensor::zeros([1]))?;
        Ok(())
    }

    /// Pre-sigmoid map `[N, 1, H, W]` at input resolution.
    pub fn logits<F: Scalar>(&self, tape: &mut Tape<F>, bound: &Bound, images: Var) -> Result<Var> {
        let (h, w) = (tape.shape(images)[2], tape.shape(images)[3]);
        let features = self.backbone.forward(tape, bound, images)?;
        let mut sum = None;
        for (i, &rate) in self.config.rates.iter().enumerate() {
            let k = bound.get(&format!("snet.branch{i}.weight"))?;
            let b = bound.get(&format!("snet.branch{i}.bias"))?;
            let branch = tape.conv2d(features, k, Some(b), 1, rate, rate)?;
            sum = Some(match sum {
                None => branch,
                Some(acc) => tape.add(acc, branch)?,
            });
        }
        let coarse = sum.expect("at least one branch");
        let up = tape.bilinear_resize(coarse, h, w)?;
        let k = bound.get("snet.upsample.weight")?;
        let b = bound.get("snet.upsample.bias")?;
        tape.conv2d(up, k, Some(b), 1, 1, 1)
    }

    /// Saliency probabilities `[N, 1, H, W]`.
    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, bound: &Bound, images: Var) -> Result<Var> {
        let logits = self.logits(tape, bound, images)?;
        tape.sigmoid(logits)
    }
}
