//! Nearest-neighbor graph construction over hypothesis clouds.
//!
//! The flow network aggregates evidence along a directed kNN graph in
//! Euclidean space. Exhaustive mode compares every pair of points and
//! is the correctness oracle; windowed mode exploits the cloud's image
//! structure by searching only the hypotheses of pixels inside a small
//! window around each point's source pixel, which is linear in the
//! point count. Ties are broken toward the lower linear point index so
//! both modes are bit-deterministic.

use ndarray::Array2;

use crate::config::KnnMode;
use crate::error::{Error, Result};

use super::HypothesisCloud;

/// Directed k-nearest-neighbor lists, one per hypothesis point.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnGraph {
    k: usize,
    neighbors: Vec<usize>,
}

impl KnnGraph {
    pub fn k(&self) -> usize {
        self.k
    }

    /// Number of points in the graph.
    pub fn len(&self) -> usize {
        self.neighbors.len() / self.k
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    /// The k neighbor indices of point `i`, nearest first.
    pub fn neighbors_of(&self, i: usize) -> &[usize] {
        &self.neighbors[i * self.k..(i + 1) * self.k]
    }

    /// All neighbor indices, point-major.
    pub fn flat(&self) -> &[usize] {
        &self.neighbors
    }

    /// Assemble a graph from raw parts, for tests that need hand-built
    /// neighbor lists.
    #[cfg(test)]
    pub(crate) fn from_parts(k: usize, neighbors: Vec<usize>) -> Self {
        assert_eq!(neighbors.len() % k, 0);
        KnnGraph { k, neighbors }
    }
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Select the `k` nearest candidates to point `i`, excluding `i`
/// itself, breaking distance ties toward the lower index.
fn select_k(
    positions: &[[f64; 3]],
    i: usize,
    candidates: impl Iterator<Item = usize>,
    k: usize,
) -> Vec<usize> {
    let mut scored: Vec<(f64, usize)> = candidates
        .filter(|&j| j != i)
        .map(|j| (dist2(&positions[i], &positions[j]), j))
        .collect();
    scored.sort_unstable_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    scored.truncate(k);
    scored.into_iter().map(|(_, j)| j).collect()
}

/// Build the directed kNN graph over all hypothesis points.
///
/// Windowed mode considers the hypotheses of pixels within the
/// `window`×`window` neighborhood of each point's source pixel (the
/// full 2m+1 stack of every such pixel); points whose window holds
/// fewer than `k` candidates fall back to the full point set so every
/// list still has exactly `k` entries.
pub fn build_knn_graph(
    cloud: &HypothesisCloud,
    k: usize,
    mode: KnnMode,
    window: usize,
) -> Result<KnnGraph> {
    let n = cloud.num_hypotheses();
    if k == 0 {
        return Err(Error::config("neighbor count k must be positive"));
    }
    if n < k + 1 {
        return Err(Error::data(format!(
            "kNN needs at least {} points for k = {k}, got {n}",
            k + 1
        )));
    }
    if mode == KnnMode::Windowed && window % 2 == 0 {
        return Err(Error::config(format!(
            "kNN window must be odd, got {window}"
        )));
    }
    let positions: Vec<[f64; 3]> = (0..n)
        .map(|i| {
            let p = cloud.hypothesis_flat(i).position;
            [p.x, p.y, p.z]
        })
        .collect();

    let mut neighbors = Vec::with_capacity(n * k);
    match mode {
        KnnMode::Exhaustive => {
            for i in 0..n {
                neighbors.extend(select_k(&positions, i, 0..n, k));
            }
        }
        KnnMode::Windowed => {
            let (h, w) = cloud.resolution();
            let mut base_at = Array2::<Option<usize>>::from_elem((h, w), None);
            for (p, &(y, x)) in cloud.pixels().iter().enumerate() {
                base_at[(y, x)] = Some(p);
            }
            let radius = window / 2;
            let per_base = cloud.hypotheses_per_point();
            for i in 0..n {
                let (y, x) = cloud.pixels()[i / per_base];
                let mut candidates = Vec::new();
                for wy in y.saturating_sub(radius)..=(y + radius).min(h - 1) {
                    for wx in x.saturating_sub(radius)..=(x + radius).min(w - 1) {
                        if let Some(base) = base_at[(wy, wx)] {
                            candidates.extend(base * per_base..(base + 1) * per_base);
                        }
                    }
                }
                let list = if candidates.len() > k {
                    select_k(&positions, i, candidates.into_iter(), k)
                } else {
                    select_k(&positions, i, 0..n, k)
                };
                neighbors.extend(list);
            }
        }
    }
    Ok(KnnGraph { k, neighbors })
}
