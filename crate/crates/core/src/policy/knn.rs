use std::cmp::Ordering;
use std::collections::BinaryHeap;

use super::{Entry, NeighborDatabase};
use crate::error::{invalid, Error, Result};
use crate::recorder::Domain;

/// Kernel offset in `w = m / (d + ε)`.
pub const KERNEL_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
    /// Normalized weight; the neighbor weights sum to 1.
    pub weight: f64,
}

#[derive(PartialEq)]
struct Candidate {
    dist2: f64,
    index: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2.total_cmp(&other.dist2).then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// The `k` nearest entries, closest first, ties to the lower index, with
/// inverse-distance weights scaled by `domain_weight` on teleoperated
/// entries.
pub fn nearest(db: &NeighborDatabase, query: &[f64], k: usize, domain_weight: f64) -> Result<Vec<Neighbor>> {
    nearest_with_eps(db, query, k, domain_weight, KERNEL_EPS)
}

/// [`nearest`] with an explicit kernel offset.
pub fn nearest_with_eps(db: &NeighborDatabase, query: &[f64], k: usize, domain_weight: f64, eps: f64) -> Result<Vec<Neighbor>> {
    if db.entries.is_empty() {
        return Err(Error::State("neighbor database is empty".into()));
    }
    if k == 0 || k > db.entries.len() {
        return Err(invalid(format!("k must be in 1..={}, got {k}", db.entries.len())));
    }
    if query.len() != db.feature_dim {
        return Err(invalid(format!("query has {} dims, database {}", query.len(), db.feature_dim)));
    }
    if !(domain_weight > 0.0) {
        return Err(invalid(format!("domain weight must be > 0, got {domain_weight}")));
    }
    let mut heap = BinaryHeap::with_capacity(k + 1);
    for (index, e) in db.entries.iter().enumerate() {
        let c = Candidate { dist2: squared_distance(&e.feature, query), index };
        if heap.len() < k {
            heap.push(c);
        } else if c < *heap.peek().expect("heap holds k items") {
            heap.pop();
            heap.push(c);
        }
    }
    let picked = heap.into_sorted_vec();
    Ok(weigh(&db.entries, picked.iter().map(|c| (c.index, c.dist2.sqrt())), domain_weight, eps))
}

/// Normalized kernel weights for neighbors given as `(index, distance)`.
pub fn weigh(entries: &[Entry], picked: impl Iterator<Item = (usize, f64)>, domain_weight: f64, eps: f64) -> Vec<Neighbor> {
    let mut out: Vec<Neighbor> = picked
        .map(|(index, distance)| {
            let m = match entries[index].domain {
                Domain::Teleoperated => domain_weight,
                Domain::InTheWild => 1.0,
            };
            Neighbor { index, distance, weight: m / (distance + eps) }
        })
        .collect();
    let total: f64 = out.iter().map(|n| n.weight).sum();
    out.iter_mut().for_each(|n| n.weight /= total);
    out
}

/// Weighted elementwise average of the neighbors' chunks.
pub fn blend_chunks(entries: &[Entry], neighbors: &[Neighbor]) -> Vec<Vec<f64>> {
    let first = &entries[neighbors[0].index].chunk;
    let mut out = vec![vec![0.0; first[0].len()]; first.len()];
    for n in neighbors {
        for (row, src) in out.iter_mut().zip(&entries[n.index].chunk) {
            for (o, v) in row.iter_mut().zip(src) {
                *o += n.weight * v;
            }
        }
    }
    out
}

pub fn knn_predict(db: &NeighborDatabase, query: &[f64], k: usize, domain_weight: f64) -> Result<Vec<Vec<f64>>> {
    knn_predict_with_eps(db, query, k, domain_weight, KERNEL_EPS)
}

pub fn knn_predict_with_eps(
    db: &NeighborDatabase,
    query: &[f64],
    k: usize,
    domain_weight: f64,
    eps: f64,
) -> Result<Vec<Vec<f64>>> {
    let neighbors = nearest_with_eps(db, query, k, domain_weight, eps)?;
    Ok(blend_chunks(&db.entries, &neighbors))
}
