use std::time::Instant;

use super::{check_k, dot, normalized_query, BackendKind, BuildStats, Neighbor, SearchIndex, TopK, VectorSet};
use crate::error::{Error, Result};

/// Exact top-k by scanning every row. Rows of `vectors` must already be unit
/// norm (see [`VectorSet::normalized`]); the query is normalized here.
pub fn brute_force_search(vectors: &VectorSet, query: &[f32], k: usize) -> Result<Vec<Neighbor>> {
    check_k(k)?;
    let q = normalized_query(query, vectors.dim())?;
    Ok(scan(vectors, &q, k))
}

pub(super) fn scan(vectors: &VectorSet, q: &[f32], k: usize) -> Vec<Neighbor> {
    let mut top = TopK::new(k);
    for (id, row) in vectors.rows() {
        top.push(Neighbor { id, score: dot(q, row) });
    }
    top.into_sorted()
}

/// Flat index; the exact oracle for recall measurement.
pub struct BruteForceIndex {
    vectors: VectorSet,
    stats: BuildStats,
}

impl BruteForceIndex {
    pub fn build(mut vectors: VectorSet) -> Result<Self> {
        let start = Instant::now();
        vectors.normalize_rows()?;
        let memory_bytes = vectors.memory_bytes();
        Ok(Self {
            vectors,
            stats: BuildStats {
                wall_seconds: start.elapsed().as_secs_f64(),
                memory_bytes,
            },
        })
    }
}

impl SearchIndex for BruteForceIndex {
    fn search(&self, query: &[f32], k: usize) -> Result<Vec<Neighbor>> {
        brute_force_search(&self.vectors, query, k)
    }

    fn search_normalized(&self, query: &[f32], k: usize) -> Result<Vec<Neighbor>> {
        check_k(k)?;
        if query.len() != self.vectors.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.vectors.dim(),
                actual: query.len(),
            });
        }
        Ok(scan(&self.vectors, query, k))
    }

    fn vectors(&self) -> &VectorSet {
        &self.vectors
    }

    fn stats(&self) -> &BuildStats {
        &self.stats
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Exact
    }
}
