//! Exact and inverted-file nearest-neighbour indexes over `f32` vectors with
//! squared-L2 distance.
//!
//! Distances are accumulated in `f64` in storage order, so the flat index and
//! an exhaustively probed IVF index return bit-identical distances. Hits are
//! sorted by distance with ties broken by the smaller id.

mod ivf;
mod kmeans;

use std::collections::HashSet;

use thiserror::Error;

pub use ivf::{IvfFlatIndex, IvfHeader, IvfParams, DEFAULT_MAX_ITERS, DEFAULT_NPROBE};
pub use kmeans::{kmeans, KMeansResult};

#[derive(Debug, Error)]
pub enum AnnError {
    #[error("index is not trained")]
    NotTrained,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("id {0} already present")]
    DuplicateId(u64),
    #[error("bad parameters: {0}")]
    BadParams(String),
    #[error("too few vectors: {n} vectors for {nlist} cells")]
    TooFewVectors { n: usize, nlist: usize },
    #[error("corrupt index file: {0}")]
    Corrupt(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, AnnError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchHit {
    pub id: u64,
    /// Squared L2 distance.
    pub distance: f64,
    /// 1-based position in the result list.
    pub rank: usize,
}

/// Squared L2 distance accumulated in `f64`.
pub fn l2_squared(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum()
}

/// Sorts candidates by `(distance, id)`, keeps the first `k` and ranks them.
pub(crate) fn top_k(mut candidates: Vec<(f64, u64)>, k: usize) -> Vec<SearchHit> {
    let cmp = |a: &(f64, u64), b: &(f64, u64)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if candidates.len() > k {
        candidates.select_nth_unstable_by(k - 1, cmp);
        candidates.truncate(k);
    }
    candidates.sort_unstable_by(cmp);
    candidates.into_iter().enumerate().map(|(i, (distance, id))| SearchHit { id, distance, rank: i + 1 }).collect()
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(AnnError::DimensionMismatch { expected, got });
    }
    Ok(())
}

/// Exhaustive-scan index.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatIndex {
    dim: usize,
    vectors: Vec<f32>,
    ids: Vec<u64>,
    id_set: HashSet<u64>,
}

impl FlatIndex {
    pub fn new(dim: usize) -> Self {
        Self { dim, vectors: Vec::new(), ids: Vec::new(), id_set: HashSet::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn add(&mut self, id: u64, vector: &[f32]) -> Result<()> {
        check_dim(self.dim, vector.len())?;
        if !self.id_set.insert(id) {
            return Err(AnnError::DuplicateId(id));
        }
        self.ids.push(id);
        self.vectors.extend_from_slice(vector);
        Ok(())
    }

    pub fn search(&self, query: &[f32], k: usize) -> Result<Vec<SearchHit>> {
        check_dim(self.dim, query.len())?;
        if k == 0 {
            return Err(AnnError::BadParams("k must be at least 1".into()));
        }
        let candidates = self
            .ids
            .iter()
            .zip(self.vectors.chunks_exact(self.dim.max(1)))
            .map(|(id, v)| (l2_squared(query, v), *id))
            .collect();
        Ok(top_k(candidates, k))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_arithmetic() {
        let mut idx = FlatIndex::new(2);
        idx.add(0, &[0.0, 0.0]).unwrap();
        idx.add(1, &[1.0, 0.0]).unwrap();
        idx.add(2, &[0.0, 1.0]).unwrap();
        let hits = idx.search(&[0.1, 0.0], 1).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].id, 0);
        assert_eq!(hits[0].rank, 1);
        assert!((hits[0].distance - 0.01).abs() < 1e-7);
    }

    #[test]
    fn k_larger_than_store_and_ties() {
        let mut idx = FlatIndex::new(1);
        for (id, v) in [(5u64, 1.0f32), (3, -1.0), (9, 0.0)] {
            idx.add(id, &[v]).unwrap();
        }
        let hits = idx.search(&[0.0], 10).unwrap();
        let ids: Vec<u64> = hits.iter().map(|h| h.id).collect();
        assert_eq!(ids, vec![9, 3, 5]);
        assert_eq!(hits.iter().map(|h| h.rank).collect::<Vec<_>>(), vec![1, 2, 3]);
    }

    #[test]
    fn empty_and_errors() {
        let mut idx = FlatIndex::new(3);
        assert!(idx.search(&[0.0; 3], 4).unwrap().is_empty());
        assert!(matches!(idx.add(1, &[0.0; 2]), Err(AnnError::DimensionMismatch { expected: 3, got: 2 })));
        idx.add(1, &[0.0; 3]).unwrap();
        assert!(matches!(idx.add(1, &[0.0; 3]), Err(AnnError::DuplicateId(1))));
        assert!(matches!(idx.search(&[0.0; 3], 0), Err(AnnError::BadParams(_))));
        assert!(matches!(idx.search(&[0.0; 4], 1), Err(AnnError::DimensionMismatch { .. })));
    }

    #[test]
    fn self_query_is_exact_zero() {
        let mut idx = FlatIndex::new(4);
        idx.add(7, &[0.3, -1.2, 5.5, 1e-3]).unwrap();
        idx.add(8, &[0.0; 4]).unwrap();
        let hits = idx.search(&[0.3, -1.2, 5.5, 1e-3], 1).unwrap();
        assert_eq!((hits[0].id, hits[0].distance), (7, 0.0));
    }
}
