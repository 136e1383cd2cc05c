//! Saliency detection trained from several weak supervision sources.
//!
//! Two attention networks learn from category labels ([`networks::CNet`]) and
//! captions ([`networks::PNet`]); their coarse maps are tied together by
//! transfer and coherence losses, refined into pseudo labels, and distilled
//! into a dilated-convolution predictor ([`networks::SNet`]).

pub mod attention;
pub mod data;
pub mod error;
pub mod imaging;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod pseudo;
pub mod superpixel;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
