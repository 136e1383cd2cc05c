//! Superpixel segmentation and graph ranking that turn two coarse maps
//! into pixel-accurate targets for unlabelled images.

mod color;
mod graph;
mod ranking;
mod slic;

pub use color::{normalize_lab, srgb_to_lab};
pub use graph::{affinity, boundary_segments, build_affinity_graph, region_adjacency, AffinityGraph};
pub use ranking::{
    coherence_targets, downsample_majority, manifold_rank, manifold_rank_with, rank_image, salient_seeds, write_debug, RankingConfig,
    RankingResult, RankSolver, DENSE_LIMIT,
};
pub use slic::{slic_segment, SlicConfig, SuperpixelLabels};

#[cfg(test)]
mod tests;
