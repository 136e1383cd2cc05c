use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::RgbImage;

use super::color::{normalize_lab, srgb_to_lab};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlicConfig {
    pub n_segments: usize,
    pub compactness: f64,
    pub iterations: usize,
}

impl Default for SlicConfig {
    fn default() -> Self {
        SlicConfig { n_segments: 200, compactness: 10.0, iterations: 10 }
    }
}

/// Dense segmentation of an image into 4-connected segments.
#[derive(Clone, Debug, PartialEq)]
pub struct SuperpixelLabels {
    pub width: usize,
    pub height: usize,
    /// Row-major segment id of every pixel, dense in `0..count`.
    pub labels: Vec<usize>,
    pub count: usize,
    /// Mean normalized Lab color of each segment.
    pub colors: Vec<[f64; 3]>,
    /// Row-major pixel indices of each segment.
    pub pixels: Vec<Vec<usize>>,
}

impl SuperpixelLabels {
    /// Renumbers arbitrary ids densely in order of first appearance and
    /// gathers per-segment statistics from per-pixel normalized Lab colors.
    pub fn from_labels(width: usize, height: usize, raw: &[usize], lab: &[[f64; 3]]) -> Result<Self> {
        let n = width * height;
        if raw.len() != n || lab.len() != n || n == 0 {
            return Err(Error::Shape(format!("{} labels and {} colors for {width}x{height}", raw.len(), lab.len())));
        }
        let mut remap = std::collections::HashMap::new();
        let labels: Vec<usize> = raw
            .iter()
            .map(|&l| {
                let next = remap.len();
                *remap.entry(l).or_insert(next)
            })
            .collect();
        let count = remap.len();
        let mut pixels = vec![Vec::new(); count];
        let mut sums = vec![[0.0; 3]; count];
        for (i, &l) in labels.iter().enumerate() {
            pixels[l].push(i);
            for c in 0..3 {
                sums[l][c] += lab[i][c];
            }
        }
        let colors = sums.iter().zip(&pixels).map(|(s, p)| s.map(|v| v / p.len() as f64)).collect();
        Ok(SuperpixelLabels { width, height, labels, count, colors, pixels })
    }
}

/// SLIC: k-means in joint Lab and image-plane space on a grid of seeds
/// with spacing `S = sqrt(HW / n)`, followed by a pass that absorbs small
/// disconnected fragments into a neighbouring segment.
pub fn slic_segment(image: &RgbImage, cfg: &SlicConfig) -> Result<SuperpixelLabels> {
    let (w, h) = (image.width, image.height);
    let n = w * h;
    if cfg.n_segments < 2 {
        return Err(Error::Invalid(format!("SLIC needs at least 2 segments, got {}", cfg.n_segments)));
    }
    if n < cfg.n_segments {
        return Err(Error::Invalid(format!(
            "a {w}x{h} image is smaller than one segment cell for {} segments",
            cfg.n_segments
        )));
    }
    let lab: Vec<[f64; 3]> = (0..n).map(|i| srgb_to_lab(image.pixel(i % w, i / w))).collect();
    let s = (n as f64 / cfg.n_segments as f64).sqrt();
    let nx = ((w as f64 / s).round() as usize).max(1);
    let ny = ((h as f64 / s).round() as usize).max(1);
    let (step_x, step_y) = (w as f64 / nx as f64, h as f64 / ny as f64);

    let gradient = |x: usize, y: usize| {
        let at = |x: usize, y: usize| lab[y * w + x];
        let (l, r) = (at(x.saturating_sub(1), y), at((x + 1).min(w - 1), y));
        let (u, d) = (at(x, y.saturating_sub(1)), at(x, (y + 1).min(h - 1)));
        (0..3).map(|c| (r[c] - l[c]).powi(2) + (d[c] - u[c]).powi(2)).sum::<f64>()
    };

    // Centre: [L, a, b, x, y].
    let mut centres: Vec<[f64; 5]> = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let cx = (((i as f64 + 0.5) * step_x) as usize).min(w - 1);
            let cy = (((j as f64 + 0.5) * step_y) as usize).min(h - 1);
            let (mut bx, mut by, mut best) = (cx, cy, f64::INFINITY);
            for y in cy.saturating_sub(1)..=(cy + 1).min(h - 1) {
                for x in cx.saturating_sub(1)..=(cx + 1).min(w - 1) {
                    let g = gradient(x, y);
                    if g < best {
                        (bx, by, best) = (x, y, g);
                    }
                }
            }
            let c = lab[by * w + bx];
            centres.push([c[0], c[1], c[2], bx as f64, by as f64]);
        }
    }

    let mut labels: Vec<usize> = (0..n)
        .map(|p| {
            let i = (((p % w) as f64 / step_x) as usize).min(nx - 1);
            let j = (((p / w) as f64 / step_y) as usize).min(ny - 1);
            j * nx + i
        })
        .collect();
    let spatial = (cfg.compactness / s).powi(2);
    let reach = s.ceil() as i64;
    let mut dist = vec![f64::INFINITY; n];
    for _ in 0..cfg.iterations {
        dist.fill(f64::INFINITY);
        for (k, c) in centres.iter().enumerate() {
            let (cx, cy) = (c[3].round() as i64, c[4].round() as i64);
            for y in (cy - reach).max(0)..(cy + reach + 1).min(h as i64) {
                for x in (cx - reach).max(0)..(cx + reach + 1).min(w as i64) {
                    let p = y as usize * w + x as usize;
                    let q = lab[p];
                    let dc = (q[0] - c[0]).powi(2) + (q[1] - c[1]).powi(2) + (q[2] - c[2]).powi(2);
                    let ds = (x as f64 - c[3]).powi(2) + (y as f64 - c[4]).powi(2);
                    let d = dc + ds * spatial;
                    if d < dist[p] {
                        dist[p] = d;
                        labels[p] = k;
                    }
                }
            }
        }
        let mut sums = vec![[0.0f64; 6]; centres.len()];
        for (p, &k) in labels.iter().enumerate() {
            let q = lab[p];
            let acc = &mut sums[k];
            acc[0] += q[0];
            acc[1] += q[1];
            acc[2] += q[2];
            acc[3] += (p % w) as f64;
            acc[4] += (p / w) as f64;
            acc[5] += 1.0;
        }
        for (c, acc) in centres.iter_mut().zip(&sums) {
            if acc[5] > 0.0 {
                for d in 0..5 {
                    c[d] = acc[d] / acc[5];
                }
            }
        }
    }

    let min_size = (n / centres.len() / 4).max(1);
    let connected = enforce_connectivity(&labels, w, h, min_size);
    let normalized: Vec<[f64; 3]> = lab.into_iter().map(normalize_lab).collect();
    SuperpixelLabels::from_labels(w, h, &connected, &normalized)
}

fn neighbours(p: usize, w: usize, h: usize) -> impl Iterator<Item = usize> {
    let (x, y) = (p % w, p / w);
    [
        (x > 0).then(|| p - 1),
        (x + 1 < w).then(|| p + 1),
        (y > 0).then(|| p - w),
        (y + 1 < h).then(|| p + w),
    ]
    .into_iter()
    .flatten()
}

/// Splits every label into its 4-connected components and merges
/// components of at most `min_size` pixels into an adjacent one.
fn enforce_connectivity(labels: &[usize], w: usize, h: usize, min_size: usize) -> Vec<usize> {
    const UNSET: usize = usize::MAX;
    let mut out = vec![UNSET; labels.len()];
    let mut next = 0;
    let mut queue = VecDeque::new();
    let mut component = Vec::new();
    for start in 0..labels.len() {
        if out[start] != UNSET {
            continue;
        }
        let adjacent = neighbours(start, w, h).map(|q| out[q]).find(|&l| l != UNSET);
        component.clear();
        out[start] = next;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            component.push(p);
            for q in neighbours(p, w, h) {
                if out[q] == UNSET && labels[q] == labels[start] {
                    out[q] = next;
                    queue.push_back(q);
                }
            }
        }
        match adjacent {
            Some(target) if component.len() <= min_size => {
                for &p in &component {
                    out[p] = target;
                }
            }
            _ => next += 1,
        }
    }
    out
}
