//! Two-stage training, pseudo-label generation, evaluation and inference.

mod dataset;
mod pipeline;
mod snet;
mod weak;

pub use dataset::{load_samples, resize_mask, Sample};
pub use pipeline::{
    coarse_maps, evaluate, evaluate_coarse, gen_pseudo, infer, load_snet, load_weak, predict_snet, CoarseEval, CoarseKind,
    PseudoSummary, WeakBundle,
};
pub use snet::{SnetStepLog, SnetTrainer, SNET_CHECKPOINT, SNET_LOG};
pub use weak::{WeakHyper, WeakModels, WeakStepLog, WeakTrainer, WEAK_CHECKPOINT, WEAK_LOG};

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{checkpoint, Adam, AdamState, ParamStore, Tensor};

/// Independent random stream for one training step.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Companion file holding the optimizer moments of a checkpoint.
pub fn optimizer_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".adam");
    PathBuf::from(s)
}

fn save_optimizer(path: &Path, store: &ParamStore<f32>, adam: &Adam<f32>, step: usize) -> Result<()> {
    let mut moments = ParamStore::new();
    let mut counts = Vec::with_capacity(store.len());
    for (i, (name, t)) in store.iter().enumerate() {
        match adam.state(i) {
            Some(s) => {
                moments.insert(format!("{name}.m"), Tensor::new(t.shape().to_vec(), s.m.clone())?)?;
                moments.insert(format!("{name}.v"), Tensor::new(t.shape().to_vec(), s.v.clone())?)?;
                counts.push(s.t);
            }
            None => counts.push(0),
        }
    }
    let meta = serde_json::json!({ "step": step, "adam": adam.config, "counts": counts });
    checkpoint::save(&optimizer_path(path), &moments, meta)
}

/// Restores optimizer moments; returns the step the checkpoint was taken at.
fn load_optimizer(path: &Path, store: &ParamStore<f32>, adam: &mut Adam<f32>) -> Result<usize> {
    let ckpt = checkpoint::load(&optimizer_path(path))?;
    let meta = &ckpt.sidecar.hyperparameters;
    let bad = || Error::Checkpoint(format!("malformed optimizer state in {}", optimizer_path(path).display()));
    let step = meta["step"].as_u64().ok_or_else(bad)? as usize;
    let counts: Vec<u64> = serde_json::from_value(meta["counts"].clone()).map_err(|_| bad())?;
    if counts.len() != store.len() {
        return Err(bad());
    }
    for (i, name) in store.names().enumerate() {
        if counts[i] == 0 {
            continue;
        }
        let (Some(m), Some(v)) = (ckpt.tensors.get(&format!("{name}.m")), ckpt.tensors.get(&format!("{name}.v"))) else {
            return Err(bad());
        };
        adam.set_state(i, AdamState { m: m.data().to_vec(), v: v.data().to_vec(), t: counts[i] });
    }
    Ok(step)
}

fn scalar_of(tape: &crate::tensor::Tape<f32>, v: crate::tensor::Var) -> f64 {
    tape.value(v).data()[0] as f64
}
