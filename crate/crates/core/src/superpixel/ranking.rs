use std::path::Path;

use image::{ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::imaging::{Map, Mask, RgbImage};

use super::{build_affinity_graph, slic_segment, AffinityGraph, SlicConfig, SuperpixelLabels};

/// Graphs up to this size are solved by dense Cholesky, larger ones by CG.
pub const DENSE_LIMIT: usize = 1000;
const RESIDUAL_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingConfig {
    pub slic: SlicConfig,
    /// Color scale of the edge weights.
    pub sigma: f64,
    /// Fitting weight; the propagation factor is `γ = 1 / (1 + μ)`.
    pub mu: f64,
}

impl Default for RankingConfig {
    fn default() -> Self {
        RankingConfig { slic: SlicConfig::default(), sigma: 0.1, mu: 0.01 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankingResult {
    /// 0/1 seed indicator per segment.
    pub seeds: Vec<f64>,
    pub scores: Vec<f64>,
    /// Pixels of segments scoring above the mean score.
    pub positive: Mask,
}

fn check_map(map: &Map, seg: &SuperpixelLabels) -> Result<()> {
    if (map.width, map.height) != (seg.width, seg.height) {
        return shape_err(format!(
            "{}x{} map for a {}x{} segmentation",
            map.width, map.height, seg.width, seg.height
        ));
    }
    Ok(())
}

fn segment_means(map: &Map, seg: &SuperpixelLabels) -> Vec<f64> {
    seg.pixels
        .iter()
        .map(|px| px.iter().map(|&p| map.data[p] as f64).sum::<f64>() / px.len() as f64)
        .collect()
}

/// Segments whose mean value exceeds the map-wide mean in both maps.
pub fn salient_seeds(s_c: &Map, s_p: &Map, seg: &SuperpixelLabels) -> Result<Vec<f64>> {
    check_map(s_c, seg)?;
    check_map(s_p, seg)?;
    let (mc, mp) = (s_c.mean(), s_p.mean());
    let (ac, ap) = (segment_means(s_c, seg), segment_means(s_p, seg));
    Ok(ac.iter().zip(&ap).map(|(&c, &p)| if c > mc && p > mp { 1.0 } else { 0.0 }).collect())
}

/// Applies `I - γ D^{-1/2} W D^{-1/2}` to `x`.
fn apply_operator(g: &AffinityGraph, inv_sqrt_d: &[f64], gamma: f64, x: &[f64]) -> Vec<f64> {
    g.edges
        .iter()
        .enumerate()
        .map(|(m, list)| {
            let lx: f64 = list.iter().map(|&(n, w)| w * inv_sqrt_d[n] * x[n]).sum();
            x[m] - gamma * inv_sqrt_d[m] * lx
        })
        .collect()
}

fn cholesky(a: &mut [f64], n: usize) -> Result<()> {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > 0.0) {
            return Err(Error::Solver(format!("ranking system is not positive definite (pivot {j} = {d:e})")));
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    Ok(())
}

fn cholesky_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut y = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            y[i] -= l[i * n + k] * y[k];
        }
        y[i] /= l[i * n + i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            y[i] -= l[k * n + i] * y[k];
        }
        y[i] /= l[i * n + i];
    }
    y
}

fn conjugate_gradient(g: &AffinityGraph, inv_sqrt_d: &[f64], gamma: f64, z: &[f64]) -> Vec<f64> {
    let n = z.len();
    let mut x = vec![0.0; n];
    let mut r = z.to_vec();
    let mut p = r.clone();
    let mut rr: f64 = r.iter().map(|v| v * v).sum();
    for _ in 0..10 * n.max(100) {
        if rr.sqrt() < RESIDUAL_TOL * 1e-2 {
            break;
        }
        let ap = apply_operator(g, inv_sqrt_d, gamma, &p);
        let alpha = rr / p.iter().zip(&ap).map(|(a, b)| a * b).sum::<f64>();
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let next: f64 = r.iter().map(|v| v * v).sum();
        let beta = next / rr;
        rr = next;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
    }
    x
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RankSolver {
    /// Dense Cholesky up to [`DENSE_LIMIT`] nodes, CG beyond.
    Auto,
    Cholesky,
    ConjugateGradient,
}

/// Solves `(I - γ L) h = z` with `L = D^{-1/2} W D^{-1/2}` and `γ = 1 / (1 + μ)`.
pub fn manifold_rank(g: &AffinityGraph, z: &[f64], mu: f64) -> Result<Vec<f64>> {
    manifold_rank_with(g, z, mu, RankSolver::Auto)
}

pub fn manifold_rank_with(g: &AffinityGraph, z: &[f64], mu: f64, solver: RankSolver) -> Result<Vec<f64>> {
    let n = g.len();
    if z.len() != n {
        return shape_err(format!("{} seeds for {n} nodes", z.len()));
    }
    if !(mu > 0.0) {
        return Err(Error::Invalid(format!("mu must be positive, got {mu}")));
    }
    if let Some(m) = g.degree.iter().position(|&d| !(d > 0.0)) {
        return Err(Error::Solver(format!("node {m} has no edges")));
    }
    let gamma = 1.0 / (1.0 + mu);
    let inv_sqrt_d: Vec<f64> = g.degree.iter().map(|d| 1.0 / d.sqrt()).collect();
    let residual = |h: &[f64]| -> Vec<f64> {
        apply_operator(g, &inv_sqrt_d, gamma, h).iter().zip(z).map(|(a, b)| b - a).collect()
    };
    let dense = match solver {
        RankSolver::Auto => n <= DENSE_LIMIT,
        RankSolver::Cholesky => true,
        RankSolver::ConjugateGradient => false,
    };
    let h = if dense {
        let mut a = vec![0.0; n * n];
        for m in 0..n {
            a[m * n + m] = 1.0;
            for &(k, w) in &g.edges[m] {
                a[m * n + k] = -gamma * w * inv_sqrt_d[m] * inv_sqrt_d[k];
            }
        }
        cholesky(&mut a, n)?;
        let mut h = cholesky_solve(&a, n, z);
        let r = residual(&h);
        for (hi, di) in h.iter_mut().zip(cholesky_solve(&a, n, &r)) {
            *hi += di;
        }
        h
    } else {
        conjugate_gradient(g, &inv_sqrt_d, gamma, z)
    };
    let worst = residual(&h).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if !(worst < RESIDUAL_TOL) {
        return Err(Error::Solver(format!("ranking residual {worst:e} exceeds {RESIDUAL_TOL:e}")));
    }
    Ok(h)
}

/// Pixels of segments whose score is strictly above the mean score.
pub fn coherence_targets(scores: &[f64], seg: &SuperpixelLabels) -> Result<Mask> {
    if scores.len() != seg.count {
        return shape_err(format!("{} scores for {} segments", scores.len(), seg.count));
    }
    let mean = scores.iter().sum::<f64>() / scores.len().max(1) as f64;
    let data = seg.labels.iter().map(|&l| scores[l] > mean).collect();
    Mask::new(seg.width, seg.height, data)
}

/// Reduces a pixel mask to a `grid_w x grid_h` grid; a cell is positive
/// when more than half of its pixels are.
pub fn downsample_majority(mask: &Mask, grid_w: usize, grid_h: usize) -> Result<Vec<bool>> {
    if grid_w == 0 || grid_h == 0 || mask.width % grid_w != 0 || mask.height % grid_h != 0 {
        return shape_err(format!("{}x{} mask does not tile a {grid_w}x{grid_h} grid", mask.width, mask.height));
    }
    let (cw, ch) = (mask.width / grid_w, mask.height / grid_h);
    let mut out = Vec::with_capacity(grid_w * grid_h);
    for gy in 0..grid_h {
        for gx in 0..grid_w {
            let mut on = 0;
            for y in gy * ch..(gy + 1) * ch {
                for x in gx * cw..(gx + 1) * cw {
                    on += mask.data[y * mask.width + x] as usize;
                }
            }
            out.push(2 * on > cw * ch);
        }
    }
    Ok(out)
}

/// Full per-image pipeline: segment, pick seeds from both coarse maps
/// (resized to the image), rank, and threshold the scores.
pub fn rank_image(image: &RgbImage, s_c: &Map, s_p: &Map, cfg: &RankingConfig) -> Result<(SuperpixelLabels, RankingResult)> {
    let seg = slic_segment(image, &cfg.slic)?;
    let s_c = s_c.resize(image.width, image.height);
    let s_p = s_p.resize(image.width, image.height);
    let seeds = salient_seeds(&s_c, &s_p, &seg)?;
    let graph = build_affinity_graph(&seg, cfg.sigma)?;
    let scores = manifold_rank(&graph, &seeds, cfg.mu)?;
    let positive = coherence_targets(&scores, &seg)?;
    Ok((seg, RankingResult { seeds, scores, positive }))
}

/// Writes `<stem>_segments.png` (16-bit ids) and `<stem>_scores.csv`.
pub fn write_debug(dir: &Path, stem: &str, seg: &SuperpixelLabels, scores: &[f64]) -> Result<()> {
    if seg.count > u16::MAX as usize + 1 {
        return Err(Error::Invalid(format!("{} segments do not fit 16-bit ids", seg.count)));
    }
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_fn(seg.width as u32, seg.height as u32, |x, y| {
            Luma([seg.labels[y as usize * seg.width + x as usize] as u16])
        });
    buf.save(dir.join(format!("{stem}_segments.png")))?;
    let mut csv = String::from("segment,score\n");
    for (i, s) in scores.iter().enumerate() {
        csv.push_str(&format!("{i},{s}\n"));
    }
    std::fs::write(dir.join(format!("{stem}_scores.csv")), csv)?;
    Ok(())
}
