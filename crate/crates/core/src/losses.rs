//! Training objectives for the weakly supervised stage and for SNet.
//!
//! Per-image sums are averaged over the batch. Every log is taken through
//! [`Tape::safe_log`], so saturated maps give large but finite values.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight of the map-suppression regularizer in the two localization losses.
    pub beta: f64,
    /// Weight of the transfer and coherence losses.
    pub lambda: f64,
    /// Label trust in the bootstrapping loss.
    pub delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { beta: 0.005, lambda: 0.01, delta: 0.05 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("beta", self.beta), ("lambda", self.lambda), ("delta", self.delta)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("loss weight {name} = {v} is outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Salient (`>= 0.5`) and background region indices of a map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionIndexSets {
    pub positive: Vec<usize>,
    pub negative: Vec<usize>,
}

impl RegionIndexSets {
    pub fn from_map<F: Scalar>(values: &[F]) -> Self {
        let half = F::lit(0.5);
        let (positive, negative) = (0..values.len()).partition(|&i| values[i] >= half);
        RegionIndexSets { positive, negative }
    }
}

/// Which network produced the labels of a batch, and so which map teaches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceTag {
    Category,
    Caption,
}

/// A localization loss split into its two terms, both already batch-averaged.
#[derive(Clone, Copy, Debug)]
pub struct LocalizationLoss {
    pub total: Var,
    /// `-Σ log p(y | X)` part.
    pub likelihood: Var,
    /// `-β Σ log(1 - s)` part.
    pub regularizer: Var,
}

fn batch_size<F: Scalar>(tape: &Tape<F>, x: Var) -> Result<usize> {
    match tape.shape(x).first() {
        Some(&n) if n > 0 => Ok(n),
        _ => shape_err(format!("expected a batched tensor, got {:?}", tape.shape(x))),
    }
}

/// Elementwise `t log s + (1 - t) log(1 - s)` for a constant target `t`.
fn bernoulli_log_likelihood<F: Scalar>(tape: &mut Tape<F>, s: Var, target: Tensor<F>) -> Result<Var> {
    if tape.shape(s) != target.shape() {
        return shape_err(format!("map {:?} and target {:?} differ", tape.shape(s), target.shape()));
    }
    let complement = target.map(|t| F::one() - t);
    let log_s = tape.safe_log(s)?;
    let not_s = tape.one_minus(s)?;
    let log_not_s = tape.safe_log(not_s)?;
    let t = tape.constant(target);
    let c = tape.constant(complement);
    let pos = tape.mul(t, log_s)?;
    let neg = tape.mul(c, log_not_s)?;
    tape.add(pos, neg)
}

/// `-β Σ log(1 - s)` summed over the map and averaged over the batch.
fn suppression<F: Scalar>(tape: &mut Tape<F>, saliency: Var, beta: f64) -> Result<Var> {
    let n = batch_size(tape, saliency)?;
    let not_s = tape.one_minus(saliency)?;
    let log = tape.safe_log(not_s)?;
    let total = tape.sum(log);
    Ok(tape.scale(total, F::lit(-beta / n as f64)))
}

fn localization<F: Scalar>(tape: &mut Tape<F>, log_likelihood: Var, n: usize, saliency: Var, beta: f64) -> Result<LocalizationLoss> {
    if batch_size(tape, saliency)? != n {
        return shape_err(format!("saliency batch {:?} does not match {n} samples", tape.shape(saliency)));
    }
    let likelihood = tape.scale(log_likelihood, F::lit(-1.0 / n as f64));
    let regularizer = suppression(tape, saliency, beta)?;
    let total = tape.add(likelihood, regularizer)?;
    Ok(LocalizationLoss { total, likelihood, regularizer })
}

/// Multi-label category loss with per-class sigmoid likelihoods.
/// `logits: [N, C]`, `labels: [N, C]` in `{0, 1}`, `saliency: [N, ...]`.
pub fn category_localization_loss<F: Scalar>(
    tape: &mut Tape<F>,
    logits: Var,
    labels: &Tensor<F>,
    saliency: Var,
    beta: f64,
) -> Result<LocalizationLoss> {
    if tape.shape(logits) != labels.shape() || labels.ndim() != 2 {
        return shape_err(format!("logits {:?} and labels {:?} differ", tape.shape(logits), labels.shape()));
    }
    if labels.data().iter().any(|&y| y != F::zero() && y != F::one()) {
        return Err(Error::Invalid("category labels must be 0 or 1".into()));
    }
    let p = tape.sigmoid(logits)?;
    let ll = bernoulli_log_likelihood(tape, p, labels.clone())?;
    let ll = tape.sum(ll);
    localization(tape, ll, labels.shape()[0], saliency, beta)
}

/// Teacher-forced caption loss. `captions[n]` is `[BOS, w_1 .. w_T, EOS]`
/// and step `t` of `step_logits` is scored against `captions[n][t + 1]`;
/// PAD targets past the end of shorter captions are ignored.
pub fn caption_localization_loss<F: Scalar>(
    tape: &mut Tape<F>,
    step_logits: &[Var],
    captions: &[Vec<usize>],
    saliency: Var,
    beta: f64,
) -> Result<LocalizationLoss> {
    let n = captions.len();
    let longest = captions.iter().map(Vec::len).max().unwrap_or(0);
    if n == 0 || longest < 2 || step_logits.len() != longest - 1 {
        return Err(Error::Invalid(format!(
            "{} logit steps for captions of up to {longest} tokens",
            step_logits.len()
        )));
    }
    let mut ll: Option<Var> = None;
    for (t, &logits) in step_logits.iter().enumerate() {
        if tape.shape(logits).len() != 2 || tape.shape(logits)[0] != n {
            return shape_err(format!("step {t} logits {:?} for {n} captions", tape.shape(logits)));
        }
        let targets: Vec<Option<usize>> = captions.iter().map(|c| c.get(t + 1).copied()).collect();
        let ids: Vec<usize> = targets.iter().map(|id| id.unwrap_or(0)).collect();
        let logp = tape.log_softmax(logits)?;
        let mut picked = tape.pick(logp, &ids)?;
        if targets.iter().any(Option::is_none) {
            let mask = Tensor::from_fn([n], |i| if targets[i].is_some() { F::one() } else { F::zero() });
            let mask = tape.constant(mask);
            picked = tape.mul(picked, mask)?;
        }
        let step = tape.sum(picked);
        ll = Some(match ll {
            None => step,
            Some(acc) => tape.add(acc, step)?,
        });
    }
    localization(tape, ll.expect("at least one step"), n, saliency, beta)
}

/// Cross-entropy of `student` against the thresholded values of `teacher`.
/// Gradients never reach the teacher.
pub fn attention_transfer_loss<F: Scalar>(tape: &mut Tape<F>, teacher: Var, student: Var) -> Result<Var> {
    let n = batch_size(tape, student)?;
    let half = F::lit(0.5);
    let target = tape.value(teacher).map(|t| if t >= half { F::one() } else { F::zero() });
    let ll = bernoulli_log_likelihood(tape, student, target)?;
    let total = tape.sum(ll);
    Ok(tape.scale(total, F::lit(-1.0 / n as f64)))
}

/// Picks teacher and student by the label source: category batches teach
/// the caption map with the category map, caption batches the reverse.
pub fn attention_transfer<F: Scalar>(tape: &mut Tape<F>, s_c: Var, s_p: Var, source: SourceTag) -> Result<Var> {
    match source {
        SourceTag::Category => attention_transfer_loss(tape, s_c, s_p),
        SourceTag::Caption => attention_transfer_loss(tape, s_p, s_c),
    }
}

/// Coherence of both maps with ranking targets. `targets[n]` holds one
/// flag per region of image `n`, or `None` when the ranking found no
/// salient region; such images add nothing but still count in the mean.
pub fn attention_coherence_loss<F: Scalar>(
    tape: &mut Tape<F>,
    s_c: Var,
    s_p: Var,
    targets: &[Option<Vec<bool>>],
) -> Result<Var> {
    let shape = tape.shape(s_c).to_vec();
    if tape.shape(s_p) != shape.as_slice() {
        return shape_err(format!("maps {shape:?} and {:?} differ", tape.shape(s_p)));
    }
    let n = batch_size(tape, s_c)?;
    let k = shape.iter().product::<usize>() / n;
    if targets.len() != n {
        return Err(Error::Invalid(format!("{} target sets for {n} images", targets.len())));
    }
    let mut target = vec![F::zero(); n * k];
    let mut weight = vec![F::zero(); n * k];
    for (i, t) in targets.iter().enumerate() {
        let Some(t) = t else { continue };
        if t.len() != k {
            return shape_err(format!("image {i} has {} targets for {k} regions", t.len()));
        }
        for (j, &pos) in t.iter().enumerate() {
            target[i * k + j] = if pos { F::one() } else { F::zero() };
            weight[i * k + j] = F::one();
        }
    }
    let target = Tensor::new(shape.clone(), target)?;
    let weight = tape.constant(Tensor::new(shape, weight)?);
    let from_c = bernoulli_log_likelihood(tape, s_c, target.clone())?;
    let from_p = bernoulli_log_likelihood(tape, s_p, target)?;
    let both = tape.add(from_c, from_p)?;
    let masked = tape.mul(both, weight)?;
    let total = tape.sum(masked);
    Ok(tape.scale(total, F::lit(-1.0 / n as f64)))
}

/// The terms present in one batch; missing terms count as zero.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms {
    pub category: Option<Var>,
    pub caption: Option<Var>,
    pub transfer: Option<Var>,
    pub coherence: Option<Var>,
}

/// `L_c + L_p + λ L_at + λ L_ac`, or `None` when no term is present.
pub fn combined_loss<F: Scalar>(tape: &mut Tape<F>, terms: &LossTerms, weights: &LossWeights) -> Result<Option<Var>> {
    let lambda = F::lit(weights.lambda);
    let mut parts = Vec::new();
    parts.extend(terms.category);
    parts.extend(terms.caption);
    for v in [terms.transfer, terms.coherence].into_iter().flatten() {
        parts.push(tape.scale(v, lambda));
    }
    let mut acc: Option<Var> = None;
    for p in parts {
        acc = Some(match acc {
            None => p,
            Some(a) => tape.add(a, p)?,
        });
    }
    Ok(acc)
}

/// Bootstrapped cross-entropy of a predicted map against a binary pseudo
/// label, averaged over all pixels of the batch. The self-label
/// `b = [s >= 0.5]` is read from the forward value.
pub fn bootstrapping_loss<F: Scalar>(tape: &mut Tape<F>, saliency: Var, labels: &Tensor<F>, delta: f64) -> Result<Var> {
    if tape.shape(saliency) != labels.shape() {
        return shape_err(format!("map {:?} and labels {:?} differ", tape.shape(saliency), labels.shape()));
    }
    if labels.data().iter().any(|&y| y != F::zero() && y != F::one()) {
        return Err(Error::Invalid("pseudo labels must be binary".into()));
    }
    let (d, half) = (F::lit(delta), F::lit(0.5));
    let s = tape.value(saliency);
    let target = Tensor::new(
        labels.shape().to_vec(),
        labels
            .data()
            .iter()
            .zip(s.data())
            .map(|(&y, &s)| d * y + (F::one() - d) * if s >= half { F::one() } else { F::zero() })
            .collect(),
    )?;
    let count = labels.numel();
    let ll = bernoulli_log_likelihood(tape, saliency, target)?;
    let total = tape.sum(ll);
    Ok(tape.scale(total, F::lit(-1.0 / count as f64)))
}
