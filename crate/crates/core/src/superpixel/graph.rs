use std::collections::BTreeSet;

use crate::error::{Error, Result};

use super::SuperpixelLabels;

/// Symmetric sparse affinity graph over segments.
#[derive(Clone, Debug, PartialEq)]
pub struct AffinityGraph {
    /// Neighbour lists sorted by neighbour id; no self loops.
    pub edges: Vec<Vec<(usize, f64)>>,
    /// `d_m = Σ_n w_mn`.
    pub degree: Vec<f64>,
    /// Segments touching the image border.
    pub boundary: Vec<usize>,
}

impl AffinityGraph {
    /// Builds a graph from undirected weighted edges; duplicates are rejected.
    pub fn from_edges(n: usize, edges: &[(usize, usize, f64)], boundary: Vec<usize>) -> Result<Self> {
        let mut lists = vec![Vec::new(); n];
        for &(a, b, w) in edges {
            if a == b || a >= n || b >= n || !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Invalid(format!("bad edge ({a}, {b}, {w}) for {n} nodes")));
            }
            lists[a].push((b, w));
            lists[b].push((a, w));
        }
        for list in &mut lists {
            list.sort_by_key(|&(m, _)| m);
            if list.windows(2).any(|p| p[0].0 == p[1].0) {
                return Err(Error::Invalid("duplicate edge".into()));
            }
        }
        let degree = lists.iter().map(|l| l.iter().map(|&(_, w)| w).sum()).collect();
        Ok(AffinityGraph { edges: lists, degree, boundary })
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn weight(&self, m: usize, n: usize) -> f64 {
        match self.edges[m].binary_search_by_key(&n, |&(k, _)| k) {
            Ok(i) => self.edges[m][i].1,
            Err(_) => 0.0,
        }
    }

    /// Row-major dense `W`.
    pub fn dense(&self) -> Vec<f64> {
        let n = self.len();
        let mut w = vec![0.0; n * n];
        for (m, list) in self.edges.iter().enumerate() {
            for &(k, v) in list {
                w[m * n + k] = v;
            }
        }
        w
    }
}

/// `exp(-‖a - b‖ / σ²)` with the plain Euclidean distance.
pub fn affinity(a: [f64; 3], b: [f64; 3], sigma: f64) -> f64 {
    let d = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    (-d / (sigma * sigma)).exp()
}

/// Segments sharing a 4-connected pixel border.
pub fn region_adjacency(seg: &SuperpixelLabels) -> Vec<BTreeSet<usize>> {
    let (w, h) = (seg.width, seg.height);
    let mut adj = vec![BTreeSet::new(); seg.count];
    for y in 0..h {
        for x in 0..w {
            let a = seg.labels[y * w + x];
            for (nx, ny) in [(x + 1, y), (x, y + 1)] {
                if nx < w && ny < h {
                    let b = seg.labels[ny * w + nx];
                    if a != b {
                        adj[a].insert(b);
                        adj[b].insert(a);
                    }
                }
            }
        }
    }
    adj
}

pub fn boundary_segments(seg: &SuperpixelLabels) -> Vec<usize> {
    let (w, h) = (seg.width, seg.height);
    let mut set = BTreeSet::new();
    for x in 0..w {
        set.insert(seg.labels[x]);
        set.insert(seg.labels[(h - 1) * w + x]);
    }
    for y in 0..h {
        set.insert(seg.labels[y * w]);
        set.insert(seg.labels[y * w + w - 1]);
    }
    set.into_iter().collect()
}

/// Edges join each segment to its neighbours and their neighbours, and
/// all border segments to one another.
pub fn build_affinity_graph(seg: &SuperpixelLabels, sigma: f64) -> Result<AffinityGraph> {
    if seg.count < 2 {
        return Err(Error::Invalid("ranking needs at least two segments".into()));
    }
    let adj = region_adjacency(seg);
    let mut links: Vec<BTreeSet<usize>> = adj.clone();
    for (m, near) in adj.iter().enumerate() {
        for &n in near {
            links[m].extend(adj[n].iter().copied());
        }
    }
    let boundary = boundary_segments(seg);
    for &a in &boundary {
        links[a].extend(boundary.iter().copied());
    }
    let mut edges = Vec::new();
    for (m, set) in links.iter().enumerate() {
        for &n in set.range(m + 1..) {
            edges.push((m, n, affinity(seg.colors[m], seg.colors[n], sigma)));
        }
    }
    AffinityGraph::from_edges(seg.count, &edges, boundary)
}
