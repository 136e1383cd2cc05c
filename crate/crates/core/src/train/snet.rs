use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{AugmentPlan, SnetTrainConfig};
use crate::error::{Error, Result};
use crate::imaging::{image_batch, mask_batch, Mask, RgbImage};
use crate::losses::bootstrapping_loss;
use crate::networks::{SNet, BN_MOMENTUM};
use crate::pseudo::read_pseudo_manifest;
use crate::tensor::{checkpoint, Adam, AdamConfig, ParamStore, Tape, Tensor};

use super::{load_optimizer, resize_mask, save_optimizer, scalar_of, step_rng};

#[derive(Clone, Debug, PartialEq)]
pub struct SnetStepLog {
    pub step: usize,
    pub loss: f64,
}

/// Distills pseudo labels into SNet with the bootstrapping loss.
pub struct SnetTrainer {
    pub config: SnetTrainConfig,
    pub snet: SNet,
    pub store: ParamStore<f32>,
    adam: Adam<f32>,
    pub step: usize,
    pairs: Vec<(RgbImage, Mask)>,
}

pub const SNET_CHECKPOINT: &str = "snet.ckpt";
pub const SNET_LOG: &str = "snet_loss.csv";

fn load_pairs(pseudo_manifest: &Path, size: usize) -> Result<Vec<(RgbImage, Mask)>> {
    let root = pseudo_manifest.parent().unwrap_or(Path::new("."));
    let mut pairs = Vec::new();
    for (id, entry) in read_pseudo_manifest(pseudo_manifest)? {
        let loaded = RgbImage::load(Path::new(&entry.image))
            .and_then(|img| Ok((img, Mask::load_binary_png(&root.join(&entry.label))?)));
        match loaded {
            Ok((img, mask)) => pairs.push((img.resize(size, size), resize_mask(&mask, size, size))),
            Err(e) => log::warn!("skipping pseudo label {id}: {e}"),
        }
    }
    if pairs.is_empty() {
        return Err(Error::Invalid(format!("no usable pseudo labels in {}", pseudo_manifest.display())));
    }
    Ok(pairs)
}

impl SnetTrainer {
    pub fn new(config: SnetTrainConfig, pseudo_manifest: &Path) -> Result<Self> {
        config.validate()?;
        let snet = SNet::new(config.snet.clone())?;
        let mut store = ParamStore::new();
        snet.init(&mut store, &mut ChaCha8Rng::seed_from_u64(config.seed))?;
        let pairs = load_pairs(pseudo_manifest, config.image_size)?;
        log::info!("{} pseudo-labelled images", pairs.len());
        let adam = Adam::new(AdamConfig { lr: config.lr, ..AdamConfig::default() });
        Ok(SnetTrainer { config, snet, store, adam, step: 0, pairs })
    }

    pub fn resume(path: &Path, pseudo_manifest: &Path) -> Result<Self> {
        let ckpt = checkpoint::load(path)?;
        let config: SnetTrainConfig = serde_json::from_value(ckpt.sidecar.hyperparameters)?;
        let mut trainer = Self::new(config, pseudo_manifest)?;
        trainer.store = ckpt.tensors;
        trainer.step = load_optimizer(path, &trainer.store, &mut trainer.adam)?;
        Ok(trainer)
    }

    /// Augmented images and labels drawn for `step`.
    pub fn batch(&self, step: usize) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let mut rng = step_rng(self.config.seed, step as u64);
        let mut images = Vec::with_capacity(self.config.batch_size);
        let mut masks = Vec::with_capacity(self.config.batch_size);
        for _ in 0..self.config.batch_size {
            let (img, mask) = &self.pairs[rng.random_range(0..self.pairs.len())];
            let plan = AugmentPlan::sample(&mut rng, &self.config.augment);
            images.push(plan.apply_image(img));
            masks.push(plan.apply_mask(mask));
        }
        Ok((image_batch(&images.iter().collect::<Vec<_>>())?, mask_batch(&masks.iter().collect::<Vec<_>>())?))
    }

    pub fn train_step(&mut self) -> Result<SnetStepLog> {
        let step = self.step;
        self.step += 1;
        let (images, labels) = self.batch(step)?;
        let mut tape = Tape::<f32>::new();
        let bound = self.store.bind(&mut tape, true);
        let x = tape.constant(images);
        let s = self.snet.forward(&mut tape, &bound, x)?;
        let loss = bootstrapping_loss(&mut tape, s, &labels, self.config.delta)?;
        tape.backward(loss)?;
        let grads = self.store.gradients(&tape, &bound);
        self.adam.step(&mut self.store, &grads);
        self.store.update_running_stats(tape.batch_stats(), BN_MOMENTUM)?;
        let loss = scalar_of(&tape, loss);
        if !loss.is_finite() {
            return Err(Error::Domain(format!("non-finite loss at step {step}")));
        }
        Ok(SnetStepLog { step, loss })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.store, serde_json::to_value(&self.config)?)?;
        save_optimizer(path, &self.store, &self.adam, self.step)
    }

    /// Trains until `config.steps`, logging to `<out_dir>/snet_loss.csv`.
    pub fn run(&mut self, out_dir: &Path) -> Result<Vec<SnetStepLog>> {
        std::fs::create_dir_all(out_dir)?;
        let ckpt = out_dir.join(SNET_CHECKPOINT);
        let log_path = out_dir.join(SNET_LOG);
        let fresh = self.step == 0 || !log_path.exists();
        let mut csv = std::fs::OpenOptions::new().create(true).append(!fresh).write(true).truncate(fresh).open(&log_path)?;
        if fresh {
            writeln!(csv, "step,l_b")?;
        }
        let mut logs = Vec::new();
        while self.step < self.config.steps {
            let entry = self.train_step()?;
            writeln!(csv, "{},{:.6}", entry.step, entry.loss)?;
            if entry.step % 100 == 0 {
                log::info!("snet step {} loss {:.4}", entry.step, entry.loss);
            }
            logs.push(entry);
            if self.config.checkpoint_every > 0 && self.step % self.config.checkpoint_every == 0 {
                self.save(&ckpt)?;
            }
        }
        self.save(&ckpt)?;
        Ok(logs)
    }
}
