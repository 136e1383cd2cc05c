use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{AugmentPlan, Manifest, Source, WeakConfig, WeakNetworks};
use crate::error::{Error, Result};
use crate::imaging::{image_batch, Map, RgbImage};
use crate::losses::{
    attention_coherence_loss, attention_transfer, caption_localization_loss, category_localization_loss, combined_loss,
    LossTerms, SourceTag,
};
use crate::networks::{CNet, CNetConfig, PNet, PNetConfig, VocabIndex, BN_MOMENTUM};
use crate::superpixel::{downsample_majority, rank_image};
use crate::tensor::{checkpoint, Adam, AdamConfig, Bound, ParamStore, Tape, Tensor, Var};

use super::{load_optimizer, load_samples, save_optimizer, scalar_of, step_rng, Sample};

/// Everything needed to rebuild the weak-stage networks from a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeakHyper {
    pub config: WeakConfig,
    pub classes: usize,
    pub vocab: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct WeakModels {
    pub cnet: Option<CNet>,
    pub pnet: Option<PNet>,
}

impl WeakModels {
    pub fn new(hyper: &WeakHyper) -> Result<Self> {
        let cfg = &hyper.config;
        let cnet = match cfg.networks {
            WeakNetworks::PnetOnly => None,
            _ => Some(CNet::new(CNetConfig {
                backbone: cfg.backbone.clone(),
                attended_dim: cfg.attended_dim,
                classes: hyper.classes,
            })?),
        };
        let pnet = match cfg.networks {
            WeakNetworks::CnetOnly => None,
            _ => Some(PNet::new(PNetConfig {
                backbone: cfg.backbone.clone(),
                attended_dim: cfg.attended_dim,
                vocab_size: hyper.vocab.len(),
                embed_dim: cfg.embed_dim,
                hidden_dim: cfg.hidden_dim,
            })?),
        };
        Ok(WeakModels { cnet, pnet })
    }

    pub fn init(&self, store: &mut ParamStore<f32>, rng: &mut impl Rng) -> Result<()> {
        if let Some(c) = &self.cnet {
            c.init(store, rng)?;
        }
        if let Some(p) = &self.pnet {
            p.init(store, rng)?;
        }
        Ok(())
    }

    /// Coarse maps `(S_c, S_p)` of whichever networks exist.
    pub fn saliency(&self, tape: &mut Tape<f32>, bound: &Bound, images: Var) -> Result<(Option<Var>, Option<Var>)> {
        let s_c = self.cnet.as_ref().map(|c| c.saliency(tape, bound, images)).transpose()?;
        let s_p = self.pnet.as_ref().map(|p| p.saliency(tape, bound, images)).transpose()?;
        Ok((s_c, s_p))
    }
}

/// Loss values of one step; absent terms were not computed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeakStepLog {
    pub step: usize,
    pub source: Option<Source>,
    pub category: Option<f64>,
    pub caption: Option<f64>,
    pub transfer: Option<f64>,
    pub coherence: Option<f64>,
    pub total: Option<f64>,
    /// Parameter tensors changed by the optimizer.
    pub updated: usize,
}

impl WeakStepLog {
    pub const CSV_HEADER: &'static str = "step,source,l_c,l_p,l_at,l_ac,l_total,updated";

    pub fn csv_row(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.source.map(Source::name).unwrap_or(""),
            f(self.category),
            f(self.caption),
            f(self.transfer),
            f(self.coherence),
            f(self.total),
            self.updated
        )
    }
}

/// Joint CNet/PNet training over round-robin source batches.
pub struct WeakTrainer {
    pub hyper: WeakHyper,
    pub models: WeakModels,
    pub store: ParamStore<f32>,
    adam: Adam<f32>,
    /// Next step to run.
    pub step: usize,
    schedule: Vec<Source>,
    pools: BTreeMap<Source, Vec<Sample>>,
    /// Token ids exchanged when a caption image is mirrored.
    mirror: Option<(usize, usize)>,
}

fn category_classes(manifest: &Manifest) -> Option<usize> {
    manifest.records.iter().find_map(|r| r.labels.as_ref().map(Vec::len))
}

impl WeakTrainer {
    pub fn new(config: WeakConfig, manifest: &Manifest, vocab: &VocabIndex) -> Result<Self> {
        config.validate()?;
        let classes = category_classes(manifest).unwrap_or_else(|| {
            log::warn!("no category records; sizing the classifier for a single class");
            1
        });
        let hyper = WeakHyper { config, classes, vocab: vocab.tokens().to_vec() };
        let models = WeakModels::new(&hyper)?;
        let mut store = ParamStore::new();
        models.init(&mut store, &mut ChaCha8Rng::seed_from_u64(hyper.config.seed))?;
        Self::assemble(hyper, models, store, manifest)
    }

    /// Continues from a checkpoint written by [`WeakTrainer::save`].
    pub fn resume(path: &Path, manifest: &Manifest) -> Result<Self> {
        let ckpt = checkpoint::load(path)?;
        let hyper: WeakHyper = serde_json::from_value(ckpt.sidecar.hyperparameters)?;
        let models = WeakModels::new(&hyper)?;
        let mut trainer = Self::assemble(hyper, models, ckpt.tensors, manifest)?;
        trainer.step = load_optimizer(path, &trainer.store, &mut trainer.adam)?;
        Ok(trainer)
    }

    fn assemble(hyper: WeakHyper, models: WeakModels, store: ParamStore<f32>, manifest: &Manifest) -> Result<Self> {
        let cfg = &hyper.config;
        for (i, w) in hyper.vocab.iter().enumerate() {
            if w.is_empty() {
                return Err(Error::Config(format!("empty vocabulary token {i}")));
            }
        }
        let usable = |s: Source| match (cfg.networks, s) {
            (WeakNetworks::Both, _) => true,
            (WeakNetworks::CnetOnly, s) => s == Source::Category,
            (WeakNetworks::PnetOnly, s) => s == Source::Caption,
        };
        let mut pools = BTreeMap::new();
        let mut schedule = Vec::new();
        for &s in &cfg.schedule {
            if !usable(s) {
                continue;
            }
            if !pools.contains_key(&s) {
                let pool = load_samples(manifest, &manifest.by_source(s), Some(cfg.image_size), false);
                if pool.is_empty() {
                    log::warn!("no usable {} records; training continues without that source", s.name());
                    continue;
                }
                log::info!("{} {} records", pool.len(), s.name());
                pools.insert(s, pool);
            }
            schedule.push(s);
        }
        if schedule.is_empty() {
            return Err(Error::Config("no training source left in the schedule".into()));
        }
        let pos = |w: &str| hyper.vocab.iter().position(|t| t == w);
        let mirror = pos("left").zip(pos("right"));
        let adam = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
        Ok(WeakTrainer { hyper, models, store, adam, step: 0, schedule, pools, mirror })
    }

    pub fn schedule(&self) -> &[Source] {
        &self.schedule
    }

    fn draw(&self, source: Source, rng: &mut ChaCha8Rng) -> (Vec<RgbImage>, Vec<&Sample>, Vec<AugmentPlan>) {
        let pool = &self.pools[&source];
        let cfg = &self.hyper.config;
        let picks: Vec<&Sample> = (0..cfg.batch_size).map(|_| &pool[rng.random_range(0..pool.len())]).collect();
        let plans: Vec<AugmentPlan> = picks.iter().map(|_| AugmentPlan::sample(rng, &cfg.augment)).collect();
        let images = picks.iter().zip(&plans).map(|(s, p)| p.apply_image(&s.image)).collect();
        (images, picks, plans)
    }

    fn mirrored(&self, tokens: &[usize], flip: bool) -> Vec<usize> {
        match (flip, self.mirror) {
            (true, Some((l, r))) => tokens.iter().map(|&t| if t == l { r } else if t == r { l } else { t }).collect(),
            _ => tokens.to_vec(),
        }
    }

    /// Runs one optimizer step on the next scheduled source.
    pub fn train_step(&mut self) -> Result<WeakStepLog> {
        let step = self.step;
        self.step += 1;
        let source = self.schedule[step % self.schedule.len()];
        let mut rng = step_rng(self.hyper.config.seed, step as u64);
        let (images, picks, plans) = self.draw(source, &mut rng);
        let weights = self.hyper.config.weights;
        let coupled = weights.lambda > 0.0
            && step >= self.hyper.config.coupling_warmup
            && self.models.cnet.is_some()
            && self.models.pnet.is_some();
        let mut log = WeakStepLog { step, source: Some(source), ..Default::default() };
        if source == Source::Unlabelled && !coupled {
            return Ok(log);
        }

        let mut tape = Tape::<f32>::new();
        let bound = self.store.bind(&mut tape, true);
        let refs: Vec<&RgbImage> = images.iter().collect();
        let x = tape.constant(image_batch(&refs)?);
        let beta = weights.beta;
        let mut terms = LossTerms::default();
        match source {
            Source::Category => {
                let cnet = self.models.cnet.as_ref().expect("category batches need CNet");
                let classes = self.hyper.classes;
                let mut labels = Vec::with_capacity(picks.len() * classes);
                for s in &picks {
                    let l = s.labels.as_ref().filter(|l| l.len() == classes).ok_or_else(|| {
                        Error::Invalid(format!("record {} needs {classes} labels", s.id))
                    })?;
                    labels.extend(l.iter().map(|&v| v as f32));
                }
                let labels = Tensor::new([picks.len(), classes], labels)?;
                let out = cnet.forward(&mut tape, &bound, x)?;
                let l = category_localization_loss(&mut tape, out.logits, &labels, out.saliency, beta)?;
                terms.category = Some(l.total);
                if coupled {
                    let s_p = self.models.pnet.as_ref().unwrap().saliency(&mut tape, &bound, x)?;
                    terms.transfer = Some(attention_transfer(&mut tape, out.saliency, s_p, SourceTag::Category)?);
                }
            }
            Source::Caption => {
                let pnet = self.models.pnet.as_ref().expect("caption batches need PNet");
                let captions: Vec<Vec<usize>> = picks
                    .iter()
                    .zip(&plans)
                    .map(|(s, p)| {
                        s.tokens
                            .as_ref()
                            .map(|t| self.mirrored(t, p.flip))
                            .ok_or_else(|| Error::Invalid(format!("record {} has no tokens", s.id)))
                    })
                    .collect::<Result<_>>()?;
                let out = pnet.forward(&mut tape, &bound, x, &captions)?;
                let l = caption_localization_loss(&mut tape, &out.step_logits, &captions, out.saliency, beta)?;
                terms.caption = Some(l.total);
                if coupled {
                    let s_c = self.models.cnet.as_ref().unwrap().saliency(&mut tape, &bound, x)?;
                    terms.transfer = Some(attention_transfer(&mut tape, s_c, out.saliency, SourceTag::Caption)?);
                }
            }
            Source::Unlabelled => {
                let (Some(s_c), Some(s_p)) = self.models.saliency(&mut tape, &bound, x)? else {
                    unreachable!("coupled training has both networks")
                };
                let maps_c = Map::from_batch(tape.value(s_c))?;
                let maps_p = Map::from_batch(tape.value(s_p))?;
                let (gw, gh) = (maps_c[0].width, maps_c[0].height);
                let mut targets = Vec::with_capacity(images.len());
                for ((img, c), p) in images.iter().zip(&maps_c).zip(&maps_p) {
                    let (_, ranked) = rank_image(img, c, p, &self.hyper.config.ranking)?;
                    targets.push(if ranked.positive.count() == 0 {
                        None
                    } else {
                        Some(downsample_majority(&ranked.positive, gw, gh)?)
                    });
                }
                terms.coherence = Some(attention_coherence_loss(&mut tape, s_c, s_p, &targets)?);
            }
        }
        let total = combined_loss(&mut tape, &terms, &weights)?.expect("every branch adds a term");
        tape.backward(total)?;
        let grads = self.store.gradients(&tape, &bound);
        log.updated = self.adam.step(&mut self.store, &grads);
        self.store.update_running_stats(tape.batch_stats(), BN_MOMENTUM)?;
        log.category = terms.category.map(|v| scalar_of(&tape, v));
        log.caption = terms.caption.map(|v| scalar_of(&tape, v));
        log.transfer = terms.transfer.map(|v| scalar_of(&tape, v));
        log.coherence = terms.coherence.map(|v| scalar_of(&tape, v));
        log.total = Some(scalar_of(&tape, total));
        if log.total.is_some_and(|t| !t.is_finite()) {
            return Err(Error::Domain(format!("non-finite loss at step {step}")));
        }
        Ok(log)
    }

    /// Writes the parameters, their sidecar and the optimizer state.
    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.store, serde_json::to_value(&self.hyper)?)?;
        save_optimizer(path, &self.store, &self.adam, self.step)
    }

    /// Trains until `config.steps`, appending to `<out_dir>/weak_loss.csv`
    /// and checkpointing to `<out_dir>/weak.ckpt`.
    pub fn run(&mut self, out_dir: &Path) -> Result<Vec<WeakStepLog>> {
        std::fs::create_dir_all(out_dir)?;
        let ckpt = out_dir.join(WEAK_CHECKPOINT);
        let log_path = out_dir.join(WEAK_LOG);
        let fresh = self.step == 0 || !log_path.exists();
        let mut csv = std::fs::OpenOptions::new().create(true).append(!fresh).write(true).truncate(fresh).open(&log_path)?;
        if fresh {
            writeln!(csv, "{}", WeakStepLog::CSV_HEADER)?;
        }
        let cfg = self.hyper.config.clone();
        let mut logs = Vec::new();
        while self.step < cfg.steps {
            let entry = self.train_step()?;
            writeln!(csv, "{}", entry.csv_row())?;
            if entry.step % 100 == 0 {
                log::info!("weak step {} {}", entry.step, entry.csv_row());
            }
            logs.push(entry);
            if cfg.checkpoint_every > 0 && self.step % cfg.checkpoint_every == 0 {
                self.save(&ckpt)?;
            }
        }
        self.save(&ckpt)?;
        Ok(logs)
    }
}

pub const WEAK_CHECKPOINT: &str = "weak.ckpt";
pub const WEAK_LOG: &str = "weak_loss.csv";

