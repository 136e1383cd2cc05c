use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attention_forward, region_saliency, Attention, AttentionConfig, AttentionOutput};
use crate::error::Result;
use crate::tensor::{Bound, ParamStore, Scalar, Tape, Tensor, Var};

use super::{scaled_normal, Backbone, BackboneConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CNetConfig {
    pub backbone: BackboneConfig,
    pub attended_dim: usize,
    pub classes: usize,
}

impl CNetConfig {
    pub fn new(classes: usize) -> Self {
        CNetConfig { backbone: BackboneConfig::stride16(), attended_dim: 64, classes }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CNetOutput {
    /// `[N, C]` per-class logits.
    pub logits: Var,
    /// `[N, 1, h, w]` coarse saliency map.
    pub saliency: Var,
    pub attention: AttentionOutput,
}

/// Multi-label classifier on top of attention pooling; parameters live
/// under `cnet.*`.
#[derive(Clone, Debug)]
pub struct CNet {
    pub config: CNetConfig,
    pub backbone: Backbone,
    pub attention: Attention,
}

impl CNet {
    pub const PREFIX: &'static str = "cnet";

    pub fn new(config: CNetConfig) -> Result<Self> {
        let backbone = Backbone::new(Self::PREFIX, config.backbone.clone())?;
        let attention = Attention::new(
            Self::PREFIX,
            AttentionConfig { in_dim: config.backbone.out_channels(), attended_dim: config.attended_dim },
        );
        Ok(CNet { config, backbone, attention })
    }

    pub fn init<F: Scalar>(&self, store: &mut ParamStore<F>, rng: &mut impl Rng) -> Result<()> {
        self.backbone.init(store, rng)?;
        self.attention.init(store, rng)?;
        let (d, c) = (self.config.attended_dim, self.config.classes);
        store.insert("cnet.fc.weight", scaled_normal([d, c], d, 1.0, rng))?;
        store.insert("cnet.fc.bias", Tensor::zeros([c]))?;
        Ok(())
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, bound: &Bound, images: Var) -> Result<CNetOutput> {
        let features = self.backbone.forward(tape, bound, images)?;
        let attention = attention_forward(tape, features, &self.attention.params(bound)?)?;
        let logits = tape.affine(attention.global, bound.get("cnet.fc.weight")?, Some(bound.get("cnet.fc.bias")?))?;
        Ok(CNetOutput { logits, saliency: attention.saliency, attention })
    }

    /// The coarse map alone, without the pooling and classifier head.
    pub fn saliency<F: Scalar>(&self, tape: &mut Tape<F>, bound: &Bound, images: Var) -> Result<Var> {
        let features = self.backbone.forward(tape, bound, images)?;
        region_saliency(tape, features, &self.attention.params(bound)?)
    }
}
