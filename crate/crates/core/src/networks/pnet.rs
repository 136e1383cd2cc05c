use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attention_forward, region_saliency, Attention, AttentionConfig, AttentionOutput};
use crate::error::{Error, Result};
use crate::tensor::{lstm_step, Bound, LstmParams, ParamStore, Scalar, Tape, Tensor, Var};

use super::{scaled_normal, Backbone, BackboneConfig, BOS, PAD};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PNetConfig {
    pub backbone: BackboneConfig,
    pub attended_dim: usize,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl PNetConfig {
    pub fn new(vocab_size: usize) -> Self {
        PNetConfig {
            backbone: BackboneConfig::stride16(),
            attended_dim: 64,
            vocab_size,
            embed_dim: 64,
            hidden_dim: 128,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PNetOutput {
    /// One `[N, M]` logit matrix per prediction step; step `t` predicts
    /// token `t + 1` of the caption.
    pub step_logits: Vec<Var>,
    /// `[N, 1, h, w]` coarse saliency map.
    pub saliency: Var,
    pub attention: AttentionOutput,
}

/// Attention pooling feeding a single-layer LSTM caption decoder;
/// parameters live under `pnet.*`.
#[derive(Clone, Debug)]
pub struct PNet {
    pub config: PNetConfig,
    pub backbone: Backbone,
    pub attention: Attention,
}

const PROJ_W: &str = "pnet.decoder.proj.weight";
const PROJ_B: &str = "pnet.decoder.proj.bias";
const EMBED: &str = "pnet.decoder.embed";
const LSTM_WI: &str = "pnet.decoder.lstm.w_input";
const LSTM_WH: &str = "pnet.decoder.lstm.w_hidden";
const LSTM_B: &str = "pnet.decoder.lstm.bias";
const OUT_W: &str = "pnet.decoder.out.weight";
const OUT_B: &str = "pnet.decoder.out.bias";

impl PNet {
    pub const PREFIX: &'static str = "pnet";

    pub fn new(config: PNetConfig) -> Result<Self> {
        let backbone = Backbone::new(Self::PREFIX, config.backbone.clone())?;
        let attention = Attention::new(
            Self::PREFIX,
            AttentionConfig { in_dim: config.backbone.out_channels(), attended_dim: config.attended_dim },
        );
        Ok(PNet { config, backbone, attention })
    }

    pub fn init<F: Scalar>(&self, store: &mut ParamStore<F>, rng: &mut impl Rng) -> Result<()> {
        self.backbone.init(store, rng)?;
        self.attention.init(store, rng)?;
        let c = &self.config;
        let (d, e, h, m) = (c.attended_dim, c.embed_dim, c.hidden_dim, c.vocab_size);
        store.insert(PROJ_W, scaled_normal([d, e], d, 1.0, rng))?;
        store.insert(PROJ_B, Tensor::zeros([e]))?;
        store.insert(EMBED, scaled_normal([m, e], 1, 1.0, rng))?;
        store.insert(LSTM_WI, scaled_normal([e, 4 * h], e, 1.0, rng))?;
        store.insert(LSTM_WH, scaled_normal([h, 4 * h], h, 1.0, rng))?;
        store.insert(LSTM_B, Tensor::from_fn([4 * h], |i| if (h..2 * h).contains(&i) { F::one() } else { F::zero() }))?;
        store.insert(OUT_W, scaled_normal([h, m], h, 1.0, rng))?;
        store.insert(OUT_B, Tensor::zeros([m]))?;
        Ok(())
    }

    /// Teacher-forced decoding. Every caption must start with BOS; shorter
    /// captions are padded with PAD up to the longest one.
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        bound: &Bound,
        images: Var,
        captions: &[Vec<usize>],
    ) -> Result<PNetOutput> {
        let n = tape.shape(images)[0];
        let steps = self.check_captions(captions, n)?;
        let features = self.backbone.forward(tape, bound, images)?;
        let attention = attention_forward(tape, features, &self.attention.params(bound)?)?;

        let lstm = LstmParams {
            w_input: bound.get(LSTM_WI)?,
            w_hidden: bound.get(LSTM_WH)?,
            bias: bound.get(LSTM_B)?,
        };
        let (embed, out_w, out_b) = (bound.get(EMBED)?, bound.get(OUT_W)?, bound.get(OUT_B)?);
        let hidden = self.config.hidden_dim;
        let mut h = tape.constant(Tensor::zeros([n, hidden]));
        let mut c = tape.constant(Tensor::zeros([n, hidden]));
        let mut step_logits = Vec::with_capacity(steps);
        for t in 0..steps {
            let x = if t == 0 {
                tape.affine(attention.global, bound.get(PROJ_W)?, Some(bound.get(PROJ_B)?))?
            } else {
                let ids: Vec<usize> = captions.iter().map(|cap| cap.get(t).copied().unwrap_or(PAD)).collect();
                tape.gather_rows(embed, &ids)?
            };
            (h, c) = lstm_step(tape, x, h, c, &lstm)?;
            step_logits.push(tape.affine(h, out_w, Some(out_b))?);
        }
        Ok(PNetOutput { step_logits, saliency: attention.saliency, attention })
    }

    /// The coarse map alone, without the decoder.
    pub fn saliency<F: Scalar>(&self, tape: &mut Tape<F>, bound: &Bound, images: Var) -> Result<Var> {
        let features = self.backbone.forward(tape, bound, images)?;
        region_saliency(tape, features, &self.attention.params(bound)?)
    }

    fn check_captions(&self, captions: &[Vec<usize>], n: usize) -> Result<usize> {
        if captions.len() != n {
            return Err(Error::Invalid(format!("{} captions for a batch of {n} images", captions.len())));
        }
        let m = self.config.vocab_size;
        for cap in captions {
            if cap.first() != Some(&BOS) || cap.len() < 2 {
                return Err(Error::Invalid(format!("caption {cap:?} must start with BOS and hold a target")));
            }
            if let Some(bad) = cap.iter().find(|&&id| id >= m) {
                return Err(Error::Invalid(format!("token id {bad} is out of range for a vocabulary of {m}")));
            }
        }
        Ok(captions.iter().map(Vec::len).max().unwrap_or(1) - 1)
    }
}
