use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::imaging::{Map, Mask, RgbImage};

/// Random connected graph: a random spanning tree plus extra edges.
fn random_graph(rng: &mut impl Rng, n: usize) -> AffinityGraph {
    let mut edges = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for m in 1..n {
        let parent = rng.random_range(0..m);
        seen.insert((parent, m));
        edges.push((parent, m, rng.random_range(0.01..1.0)));
    }
    for _ in 0..n {
        let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
        let key = (a.min(b), a.max(b));
        if a != b && seen.insert(key) {
            edges.push((key.0, key.1, rng.random_range(1e-4..1.0)));
        }
    }
    AffinityGraph::from_edges(n, &edges, vec![]).unwrap()
}

fn dense_oracle(g: &AffinityGraph, z: &[f64], mu: f64) -> Vec<f64> {
    let n = g.len();
    let gamma = 1.0 / (1.0 + mu);
    let w = DMatrix::from_row_slice(n, n, &g.dense());
    let d = DMatrix::from_diagonal(&DVector::from_iterator(n, g.degree.iter().map(|d| 1.0 / d.sqrt())));
    let l = &d * w * &d;
    let a = DMatrix::identity(n, n) - l * gamma;
    let inv = a.try_inverse().unwrap();
    (inv * DVector::from_column_slice(z)).iter().copied().collect()
}

fn fixed_point_residual(g: &AffinityGraph, h: &[f64], z: &[f64], mu: f64) -> f64 {
    let gamma = 1.0 / (1.0 + mu);
    (0..g.len())
        .map(|m| {
            let lh: f64 = g.edges[m].iter().map(|&(k, w)| w / (g.degree[m] * g.degree[k]).sqrt() * h[k]).sum();
            (h[m] - gamma * lh - z[m]).abs()
        })
        .fold(0.0, f64::max)
}

#[test]
fn ranking_matches_dense_inverse_on_random_graphs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let n = rng.random_range(2..=50);
        let g = random_graph(&mut rng, n);
        let z: Vec<f64> = (0..n).map(|_| rng.random_range(0..2) as f64).collect();
        let h = manifold_rank(&g, &z, 0.01).unwrap();
        let oracle = dense_oracle(&g, &z, 0.01);
        let err = h.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-8, "n = {n}: {err:e}");
        assert!(fixed_point_residual(&g, &h, &z, 0.01) < 1e-8);
    }
}

#[test]
fn iterative_solver_agrees_with_cholesky() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let g = random_graph(&mut rng, 300);
    let z: Vec<f64> = (0..300).map(|i| (i % 7 == 0) as u8 as f64).collect();
    let a = manifold_rank_with(&g, &z, 0.01, RankSolver::Cholesky).unwrap();
    let b = manifold_rank_with(&g, &z, 0.01, RankSolver::ConjugateGradient).unwrap();
    let err = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(err < 1e-8, "{err:e}");
}

#[test]
fn ranking_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let g = random_graph(&mut rng, 10);
    assert!(manifold_rank(&g, &[0.0; 10], 0.01).unwrap().iter().all(|&v| v == 0.0));

    // Nodes 1 and 2 are interchangeable around the seeded node 0.
    let g = AffinityGraph::from_edges(3, &[(0, 1, 0.5), (0, 2, 0.5)], vec![]).unwrap();
    let h = manifold_rank(&g, &[1.0, 0.0, 0.0], 0.01).unwrap();
    assert_eq!(h[1], h[2]);

    let path = AffinityGraph::from_edges(3, &[(0, 1, 1.0), (1, 2, 1.0)], vec![]).unwrap();
    let h = manifold_rank(&path, &[1.0, 0.0, 0.0], 0.01).unwrap();
    let gamma = 1.0 / 1.01;
    let c = gamma / 2f64.sqrt();
    let a = DMatrix::from_row_slice(3, 3, &[1.0, -c, 0.0, -c, 1.0, -c, 0.0, -c, 1.0]);
    let want = a.try_inverse().unwrap().column(0).clone_owned();
    for i in 0..3 {
        assert!((h[i] - want[i]).abs() < 1e-8);
    }
}

#[test]
fn adding_a_seed_never_lowers_scores() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..30 {
        let n = rng.random_range(3..=40);
        let g = random_graph(&mut rng, n);
        let mut z: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() < 0.3) as u8 as f64).collect();
        let before = manifold_rank(&g, &z, 0.01).unwrap();
        let Some(flip) = z.iter().position(|&v| v == 0.0) else { continue };
        z[flip] = 1.0;
        let after = manifold_rank(&g, &z, 0.01).unwrap();
        for (b, a) in before.iter().zip(&after) {
            assert!(*a >= *b - 1e-12);
        }
    }
}

#[test]
fn isolated_node_is_rejected() {
    let g = AffinityGraph::from_edges(3, &[(0, 1, 1.0)], vec![]).unwrap();
    assert!(manifold_rank(&g, &[1.0, 0.0, 0.0], 0.01).is_err());
}

/// Four vertical stripes, 4 pixels each, on a 16x4 image.
fn stripes() -> SuperpixelLabels {
    let raw: Vec<usize> = (0..64).map(|p| (p % 16) / 4).collect();
    SuperpixelLabels::from_labels(16, 4, &raw, &vec![[0.5; 3]; 64]).unwrap()
}

fn stripe_map(values: [f32; 4]) -> Map {
    Map::new(16, 4, (0..64).map(|p| values[(p % 16) / 4]).collect()).unwrap()
}

#[test]
fn seed_examples() {
    let seg = stripes();
    let flat = Map::constant(16, 4, 0.4);
    assert_eq!(salient_seeds(&flat, &flat, &seg).unwrap(), vec![0.0; 4]);

    let bright = stripe_map([0.1, 0.9, 0.1, 0.1]);
    assert_eq!(salient_seeds(&bright, &bright, &seg).unwrap(), vec![0.0, 1.0, 0.0, 0.0]);

    let a = stripe_map([0.9, 0.1, 0.1, 0.1]);
    let b = stripe_map([0.1, 0.1, 0.1, 0.9]);
    assert_eq!(salient_seeds(&a, &b, &seg).unwrap(), vec![0.0; 4]);
}

#[test]
fn coherence_target_examples() {
    let seg = stripes();
    assert_eq!(coherence_targets(&[0.3; 4], &seg).unwrap().count(), 0);
    let m = coherence_targets(&[0.1, 0.1, 5.0, 0.1], &seg).unwrap();
    assert!(m.data.iter().enumerate().all(|(p, &on)| on == ((p % 16) / 4 == 2)));
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let h: Vec<f64> = (0..4).map(|_| rng.random()).collect();
    let m = coherence_targets(&h, &seg).unwrap();
    let neg = m.data.iter().filter(|&&b| !b).count();
    assert_eq!(m.count() + neg, 64);
}

#[test]
fn majority_downsampling() {
    let mut data = vec![false; 16];
    // Top-left 2x2 cell: 3 of 4 on; top-right: exactly half.
    for p in [0, 1, 4, 2, 7] {
        data[p] = true;
    }
    let mask = Mask::new(4, 4, data).unwrap();
    assert_eq!(downsample_majority(&mask, 2, 2).unwrap(), vec![true, false, false, false]);
    assert!(downsample_majority(&mask, 3, 2).is_err());
}

#[test]
fn ranking_recovers_a_colored_object() {
    let inside = |x: usize, y: usize| (20..52).contains(&x) && (24..56).contains(&y);
    let img = RgbImage::from_fn(80, 80, |x, y| {
        let noise = ((x * 31 + y * 17) % 7) as f32 * 0.01;
        if inside(x, y) {
            [0.85 + noise, 0.2, 0.15]
        } else {
            [0.35 + noise, 0.45, 0.4]
        }
    });
    // Coarse 5x5 maps, bright around the object's centre.
    let coarse = Map::new(5, 5, (0..25).map(|i| if [11, 12, 16, 17].contains(&i) { 0.9 } else { 0.1 }).collect()).unwrap();
    let (_, result) = rank_image(&img, &coarse, &coarse, &RankingConfig::default()).unwrap();
    let truth = Mask::new(80, 80, (0..6400).map(|p| inside(p % 80, p / 80)).collect()).unwrap();
    let iou = result.positive.iou(&truth).unwrap();
    assert!(iou > 0.8, "iou {iou}");
}

#[test]
fn debug_dump_round_trips() {
    let seg = stripes();
    let dir = tempfile::tempdir().unwrap();
    write_debug(dir.path(), "x", &seg, &[0.5, 1.0, 0.0, 2.0]).unwrap();
    let img = image::open(dir.path().join("x_segments.png")).unwrap().to_luma16();
    assert_eq!(img.get_pixel(13, 2).0[0], 3);
    let csv = std::fs::read_to_string(dir.path().join("x_scores.csv")).unwrap();
    assert_eq!(csv.lines().nth(4), Some("3,2"));
}
