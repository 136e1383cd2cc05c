//! Spatial attention pooling over a backbone feature map.
//!
//! Each grid cell `v_i` gets a saliency score `s_i = σ(w_s·v_i + b_s)`, an
//! attended feature `f_i = s_i (w_f·v_i + b_f)`, and a softmax weight over
//! `a_i = w_a·f_i + b_a`. The global feature is `g = Σ α_i f_i`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Result};
use crate::tensor::{Bound, ParamStore, Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AttentionConfig {
    /// Channels `D` of the incoming feature map.
    pub in_dim: usize,
    /// Channels `D'` of the attended features.
    pub attended_dim: usize,
}

/// Parameter handles for one forward pass. The 1x1 projections are stored
/// as convolution kernels: `w_s: [1, D, 1, 1]`, `w_f: [D', D, 1, 1]`,
/// `w_a: [1, D', 1, 1]`; biases are `[1]`, `[D']`, `[1]`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub w_s: Var,
    pub b_s: Var,
    pub w_f: Var,
    pub b_f: Var,
    pub w_a: Var,
    pub b_a: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    /// `[N, 1, H, W]`, every value in (0, 1).
    pub saliency: Var,
    /// `[N, D', H, W]`
    pub attended: Var,
    /// `[N, K]` with `K = H * W`, rows sum to one.
    pub weights: Var,
    /// `[N, D']`
    pub global: Var,
}

/// Attention module living under `<prefix>.attn.*` in a parameter store.
#[derive(Clone, Debug)]
pub struct Attention {
    prefix: String,
    pub config: AttentionConfig,
}

impl Attention {
    pub fn new(owner: &str, config: AttentionConfig) -> Self {
        Attention { prefix: format!("{owner}.attn"), config }
    }

    fn name(&self, field: &str) -> String {
        format!("{}.{field}", self.prefix)
    }

    pub fn init<F: Scalar>(&self, store: &mut ParamStore<F>, rng: &mut impl Rng) -> Result<()> {
        let (d, da) = (self.config.in_dim, self.config.attended_dim);
        let mut normal = |shape: [usize; 4], fan_in: usize| {
            let dist = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).unwrap();
            Tensor::from_fn(shape, |_| F::lit(dist.sample(rng)))
        };
        let w_s = normal([1, d, 1, 1], d);
        let w_f = normal([da, d, 1, 1], d);
        let w_a = normal([1, da, 1, 1], da);
        store.insert(self.name("w_s"), w_s)?;
        store.insert(self.name("b_s"), Tensor::zeros([1]))?;
        store.insert(self.name("w_f"), w_f)?;
        store.insert(self.name("b_f"), Tensor::zeros([da]))?;
        store.insert(self.name("w_a"), w_a)?;
        store.insert(self.name("b_a"), Tensor::zeros([1]))?;
        Ok(())
    }

    pub fn params(&self, bound: &Bound) -> Result<AttentionParams> {
        Ok(AttentionParams {
            w_s: bound.get(&self.name("w_s"))?,
            b_s: bound.get(&self.name("b_s"))?,
            w_f: bound.get(&self.name("w_f"))?,
            b_f: bound.get(&self.name("b_f"))?,
            w_a: bound.get(&self.name("w_a"))?,
            b_a: bound.get(&self.name("b_a"))?,
        })
    }

    /// Names of the two parameters that determine the saliency map.
    pub fn saliency_param_names(&self) -> [String; 2] {
        [self.name("w_s"), self.name("b_s")]
    }
}

fn feature_grid<F: Scalar>(tape: &Tape<F>, features: Var) -> Result<[usize; 4]> {
    match *tape.shape(features) {
        [n, d, h, w] => Ok([n, d, h, w]),
        ref s => shape_err(format!("attention expects [N, D, H, W] features, got {s:?}")),
    }
}

/// `s_i = σ(w_s·v_i + b_s)` as a 1x1 convolution; returns `[N, 1, H, W]`.
pub fn region_saliency<F: Scalar>(tape: &mut Tape<F>, features: Var, p: &AttentionParams) -> Result<Var> {
    feature_grid(tape, features)?;
    let logits = tape.conv2d(features, p.w_s, Some(p.b_s), 1, 0, 1)?;
    tape.sigmoid(logits)
}

/// `f_i = s_i (w_f·v_i + b_f)`; returns `[N, D', H, W]`.
pub fn attended_features<F: Scalar>(
    tape: &mut Tape<F>,
    features: Var,
    saliency: Var,
    p: &AttentionParams,
) -> Result<Var> {
    let [n, _, h, w] = feature_grid(tape, features)?;
    if tape.shape(saliency) != [n, 1, h, w] {
        return shape_err(format!("saliency {:?} does not match the {h}x{w} feature grid", tape.shape(saliency)));
    }
    let projected = tape.conv2d(features, p.w_f, Some(p.b_f), 1, 0, 1)?;
    let channels = tape.shape(projected)[1];
    let mask = tape.expand(saliency, 1, channels)?;
    tape.mul(projected, mask)
}

/// `α = softmax(w_a·f_i + b_a)` over the row-major flattened grid; `[N, K]`.
pub fn attention_weights<F: Scalar>(tape: &mut Tape<F>, attended: Var, p: &AttentionParams) -> Result<Var> {
    let [n, _, h, w] = feature_grid(tape, attended)?;
    let scores = tape.conv2d(attended, p.w_a, Some(p.b_a), 1, 0, 1)?;
    let flat = tape.reshape(scores, [n, h * w])?;
    tape.softmax(flat)
}

/// `g = Σ_i α_i f_i`; `[N, D']`.
pub fn global_feature<F: Scalar>(tape: &mut Tape<F>, attended: Var, weights: Var) -> Result<Var> {
    let [n, d, h, w] = feature_grid(tape, attended)?;
    if tape.shape(weights) != [n, h * w] {
        return shape_err(format!("weights {:?} do not cover {} regions", tape.shape(weights), h * w));
    }
    let regions = tape.reshape(attended, [n, d, h * w])?;
    let alpha = tape.reshape(weights, [n, 1, h * w])?;
    let alpha = tape.expand(alpha, 1, d)?;
    let weighted = tape.mul(regions, alpha)?;
    tape.sum_last(weighted)
}

pub fn attention_forward<F: Scalar>(tape: &mut Tape<F>, features: Var, p: &AttentionParams) -> Result<AttentionOutput> {
    let saliency = region_saliency(tape, features, p)?;
    let attended = attended_features(tape, features, saliency, p)?;
    let weights = attention_weights(tape, attended, p)?;
    let global = global_feature(tape, attended, weights)?;
    Ok(AttentionOutput { saliency, attended, weights, global })
}
