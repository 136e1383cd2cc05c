#![allow(dead_code)]

use std::path::Path;

use weaksal::data::{load_manifest, synth_dataset, Manifest, SnetTrainConfig, SynthConfig, WeakConfig};
use weaksal::networks::{Activation, BackboneConfig, SNetConfig, VocabIndex};

pub fn tiny_backbone(output_stride: usize, blocks: usize) -> BackboneConfig {
    BackboneConfig { in_channels: 3, widths: vec![6; blocks], output_stride, activation: Activation::Relu, batch_norm: true }
}

/// A small synthetic dataset written under `dir`.
pub fn tiny_data(dir: &Path, per_source: usize, eval: usize) -> (Manifest, Manifest, VocabIndex) {
    let cfg = SynthConfig { size: 32, per_source, eval, seed: 3, ..SynthConfig::default() };
    let s = synth_dataset(dir, &cfg).unwrap();
    (load_manifest(&s.train_manifest).unwrap(), load_manifest(&s.eval_manifest).unwrap(), VocabIndex::load(&s.vocab).unwrap())
}

pub fn tiny_weak() -> WeakConfig {
    let mut cfg = WeakConfig {
        image_size: 32,
        batch_size: 4,
        steps: 12,
        backbone: tiny_backbone(8, 3),
        attended_dim: 8,
        embed_dim: 8,
        hidden_dim: 12,
        coupling_warmup: 0,
        checkpoint_every: 0,
        ..WeakConfig::default()
    };
    cfg.ranking.slic.n_segments = 30;
    cfg
}

pub fn tiny_snet() -> SnetTrainConfig {
    SnetTrainConfig {
        image_size: 32,
        batch_size: 4,
        steps: 10,
        snet: SNetConfig { backbone: tiny_backbone(4, 2), rates: vec![1, 2] },
        checkpoint_every: 0,
        ..SnetTrainConfig::default()
    }
}
