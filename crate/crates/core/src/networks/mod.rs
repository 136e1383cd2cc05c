//! The three networks and their shared convolutional backbone.

mod backbone;
mod cnet;
mod pnet;
mod snet;
mod vocab;

pub use backbone::{Activation, Backbone, BackboneConfig, BN_EPS, BN_MOMENTUM};
pub use cnet::{CNet, CNetConfig, CNetOutput};
pub use pnet::{PNet, PNetConfig, PNetOutput};
pub use snet::{SNet, SNetConfig};
pub use vocab::{VocabIndex, BOS, EOS, PAD};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Scalar, Tensor};

/// Zero-mean normal weights with variance `gain / fan_in`.
pub(crate) fn scaled_normal<F: Scalar>(
    shape: impl Into<Vec<usize>>,
    fan_in: usize,
    gain: f64,
    rng: &mut impl Rng,
) -> Tensor<F> {
    let dist = Normal::new(0.0, (gain / fan_in.max(1) as f64).sqrt()).expect("finite std");
    Tensor::from_fn(shape, |_| F::lit(dist.sample(rng)))
}

#[cfg(test)]
mod tests;
