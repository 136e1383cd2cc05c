//! Manifests, synthetic data, run configuration and augmentation.

pub mod augment;
pub mod config;
pub mod manifest;
pub mod synth;

pub use augment::AugmentPlan;
pub use config::{load_config, AugmentConfig, PseudoConfig, SnetTrainConfig, WeakConfig, WeakNetworks};
pub use manifest::{load_manifest, write_manifest, Manifest, SampleRecord, Source};
pub use synth::{synth_dataset, synth_vocab, SynthConfig, SynthSummary};
