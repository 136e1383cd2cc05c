use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::networks::{BackboneConfig, SNetConfig};
use crate::pseudo::Refiner;
use crate::superpixel::RankingConfig;

use super::manifest::Source;

/// Which networks the weak stage trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeakNetworks {
    Both,
    CnetOnly,
    PnetOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Reflection padding before the random crop back to full size.
    pub crop_pad: usize,
    pub flip: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { crop_pad: 8, flip: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeakConfig {
    pub image_size: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub networks: WeakNetworks,
    /// Round-robin order of batch sources; repeat a source to raise its share.
    pub schedule: Vec<Source>,
    pub weights: LossWeights,
    /// Steps before the transfer and coherence terms switch on; unlabelled
    /// batches drawn earlier produce no update.
    pub coupling_warmup: usize,
    pub backbone: BackboneConfig,
    pub attended_dim: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub ranking: RankingConfig,
    pub augment: AugmentConfig,
    pub checkpoint_every: usize,
}

impl Default for WeakConfig {
    fn default() -> Self {
        WeakConfig {
            image_size: 96,
            batch_size: 8,
            steps: 2000,
            lr: 1e-3,
            seed: 0,
            networks: WeakNetworks::Both,
            schedule: Source::ALL.to_vec(),
            weights: LossWeights::default(),
            coupling_warmup: 600,
            backbone: BackboneConfig::stride16(),
            attended_dim: 64,
            embed_dim: 64,
            hidden_dim: 128,
            ranking: RankingConfig::default(),
            augment: AugmentConfig::default(),
            checkpoint_every: 500,
        }
    }
}

impl WeakConfig {
    /// The settings of the original large-scale training run.
    pub fn full_scale() -> Self {
        WeakConfig { image_size: 256, batch_size: 36, lr: 1e-4, coupling_warmup: 0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.weights.validate()?;
        if self.image_size == 0 || self.image_size % self.backbone.output_stride != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be a positive multiple of the output stride {}",
                self.image_size, self.backbone.output_stride
            )));
        }
        if self.batch_size == 0 || self.schedule.is_empty() || !(self.lr > 0.0) {
            return Err(Error::Config("batch_size, schedule and lr must be positive/non-empty".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SnetTrainConfig {
    pub image_size: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub delta: f64,
    pub snet: SNetConfig,
    pub augment: AugmentConfig,
    pub checkpoint_every: usize,
}

impl Default for SnetTrainConfig {
    fn default() -> Self {
        SnetTrainConfig {
            image_size: 96,
            batch_size: 8,
            steps: 2000,
            lr: 1e-3,
            seed: 0,
            delta: LossWeights::default().delta,
            snet: SNetConfig::default(),
            augment: AugmentConfig::default(),
            checkpoint_every: 500,
        }
    }
}

impl SnetTrainConfig {
    /// The settings of the original large-scale training run.
    pub fn full_scale() -> Self {
        SnetTrainConfig { image_size: 256, batch_size: 26, lr: 1e-4, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.snet.backbone.validate()?;
        if self.image_size == 0 || self.image_size % self.snet.backbone.output_stride != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be a positive multiple of the output stride {}",
                self.image_size, self.snet.backbone.output_stride
            )));
        }
        if self.batch_size == 0 || !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.delta) {
            return Err(Error::Config("batch_size and lr must be positive and delta in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PseudoConfig {
    pub refiner: Refiner,
    pub threshold: f32,
    pub sources: Vec<Source>,
}

impl Default for PseudoConfig {
    fn default() -> Self {
        PseudoConfig { refiner: Refiner::default(), threshold: 0.5, sources: vec![Source::Unlabelled] }
    }
}

fn merge(base: &mut toml::Value, overlay: toml::Value) {
    match (base, overlay) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses a `--set` value as a TOML literal, falling back to a string.
fn parse_literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Defaults, then the TOML file, then `key.path=value` overrides.
pub fn load_config<T: Serialize + DeserializeOwned + Default>(file: Option<&Path>, overrides: &[String]) -> Result<T> {
    let mut value = toml::Value::try_from(T::default()).map_err(|e| Error::Config(e.to_string()))?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)?;
        let table: toml::Table =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        merge(&mut value, toml::Value::Table(table));
    }
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
        let mut overlay = parse_literal(raw.trim());
        for part in key.trim().split('.').rev() {
            let mut t = toml::Table::new();
            t.insert(part.to_string(), overlay);
            overlay = toml::Value::Table(t);
        }
        merge(&mut value, overlay);
    }
    value.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
}
