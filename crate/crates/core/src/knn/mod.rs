//! KNN backends behind a common [`SearchIndex`] interface.
//!
//! Similarity is cosine throughout: vectors are L2-normalized at ingest and
//! queries are normalized on entry, so every score is a plain dot product.
//! Results are ordered by descending score with ties to the lower id.

mod brute;
mod ivf;
mod kmeans;
mod vecfile;

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

pub use brute::{brute_force_search, BruteForceIndex};
pub use ivf::{ivf_build, IvfIndex, IvfParams};
pub use kmeans::kmeans;
pub use vecfile::{read_vec1, write_vec1};

use crate::error::{Error, Result};

/// Row-major f32 vectors with one external id per row.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorSet {
    dim: usize,
    ids: Vec<u64>,
    data: Vec<f32>,
}

impl VectorSet {
    /// Validates shape, finiteness and id uniqueness. Values are kept as given.
    pub fn new(dim: usize, ids: Vec<u64>, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidInput("vector dimension must be ≥ 1".into()));
        }
        if data.len() != ids.len() * dim {
            return Err(Error::InvalidInput(format!(
                "{} values do not form {} rows of dimension {dim}",
                data.len(),
                ids.len()
            )));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite value in row {}", i / dim)));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        if let Some(dup) = ids.iter().find(|id| !seen.insert(**id)) {
            return Err(Error::InvalidInput(format!("duplicate vector id {dup}")));
        }
        Ok(Self { dim, ids, data })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            ids: Vec::new(),
            data: Vec::new(),
        }
    }

    /// Same as [`VectorSet::new`] followed by L2 normalization of every row.
    pub fn normalized(dim: usize, ids: Vec<u64>, data: Vec<f32>) -> Result<Self> {
        let mut set = Self::new(dim, ids, data)?;
        set.normalize_rows()?;
        Ok(set)
    }

    pub fn normalize_rows(&mut self) -> Result<()> {
        for (i, row) in self.data.chunks_exact_mut(self.dim).enumerate() {
            if !normalize(row) {
                return Err(Error::InvalidInput(format!("row {i} (id {}) has zero norm", self.ids[i])));
            }
        }
        Ok(())
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

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn id(&self, row: usize) -> u64 {
        self.ids[row]
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.data[row * self.dim..(row + 1) * self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn rows(&self) -> impl Iterator<Item = (u64, &[f32])> {
        self.ids.iter().copied().zip(self.data.chunks_exact(self.dim))
    }

    /// New set holding the given rows, in the given order.
    pub fn subset(&self, rows: &[usize]) -> VectorSet {
        let mut ids = Vec::with_capacity(rows.len());
        let mut data = Vec::with_capacity(rows.len() * self.dim);
        for &r in rows {
            ids.push(self.ids[r]);
            data.extend_from_slice(self.row(r));
        }
        VectorSet {
            dim: self.dim,
            ids,
            data,
        }
    }

    pub fn memory_bytes(&self) -> usize {
        self.data.len() * 4 + self.ids.len() * 8
    }
}

/// Scales `v` to unit L2 norm in place. Returns false for a zero vector.
/// Vectors already within rounding of unit norm are left untouched, which
/// makes repeated normalization bit-for-bit idempotent.
pub fn normalize(v: &mut [f32]) -> bool {
    let norm = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return false;
    }
    if (norm - 1.0).abs() <= 1e-6 {
        return true;
    }
    let inv = (1.0 / norm) as f32;
    v.iter_mut().for_each(|x| *x *= inv);
    true
}

/// Unit-norm copy of a query, or an error for zero / non-finite input.
pub fn normalized_query(q: &[f32], dim: usize) -> Result<Vec<f32>> {
    if q.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: q.len(),
        });
    }
    if q.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("query has non-finite values".into()));
    }
    let mut v = q.to_vec();
    if !normalize(&mut v) {
        return Err(Error::InvalidInput("query has zero norm".into()));
    }
    Ok(v)
}

/// Dot product with a fixed 8-lane accumulation order, so every caller gets
/// bit-identical scores for the same pair of vectors.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0f32;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub id: u64,
    pub score: f32,
}

/// Best-first ordering: higher score first, then lower id.
pub fn rank_order(a: &Neighbor, b: &Neighbor) -> Ordering {
    b.score.total_cmp(&a.score).then(a.id.cmp(&b.id))
}

/// Heap entry whose maximum is the worst kept neighbor.
struct Worst(Neighbor);

impl PartialEq for Worst {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Worst {}
impl PartialOrd for Worst {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Worst {
    fn cmp(&self, other: &Self) -> Ordering {
        rank_order(&self.0, &other.0)
    }
}

/// Bounded collector keeping the k best neighbors seen.
pub struct TopK {
    k: usize,
    heap: BinaryHeap<Worst>,
}

impl TopK {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    #[inline]
    pub fn push(&mut self, n: Neighbor) {
        if self.heap.len() < self.k {
            self.heap.push(Worst(n));
        } else if let Some(top) = self.heap.peek() {
            if rank_order(&n, &top.0) == Ordering::Less {
                self.heap.pop();
                self.heap.push(Worst(n));
            }
        }
    }

    pub fn into_sorted(self) -> Vec<Neighbor> {
        self.heap.into_sorted_vec().into_iter().map(|w| w.0).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BuildStats {
    pub wall_seconds: f64,
    pub memory_bytes: usize,
}

/// Which backend to build, with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum BackendKind {
    Exact,
    Ivf(IvfParams),
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendKind::Exact => write!(f, "exact"),
            BackendKind::Ivf(p) => write!(
                f,
                "ivf:nlist={},nprobe={},iters={},seed={}",
                p.nlist, p.nprobe, p.iterations, p.seed
            ),
        }
    }
}

impl FromStr for BackendKind {
    type Err = Error;

    /// `exact`, `ivf`, or `ivf:nlist=64,nprobe=8,iters=20,seed=0` (any subset of keys).
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidInput(format!("unknown backend {s:?}"));
        match s.split_once(':') {
            None if s == "exact" || s == "brute" => Ok(BackendKind::Exact),
            None if s == "ivf" => Ok(BackendKind::Ivf(IvfParams::default())),
            Some(("ivf", rest)) => {
                let mut p = IvfParams::default();
                for kv in rest.split(',').filter(|x| !x.is_empty()) {
                    let (k, v) = kv.split_once('=').ok_or_else(bad)?;
                    match k {
                        "nlist" => p.nlist = v.parse().map_err(|_| bad())?,
                        "nprobe" => p.nprobe = v.parse().map_err(|_| bad())?,
                        "iters" => p.iterations = v.parse().map_err(|_| bad())?,
                        "seed" => p.seed = v.parse().map_err(|_| bad())?,
                        _ => return Err(bad()),
                    }
                }
                Ok(BackendKind::Ivf(p))
            }
            _ => Err(bad()),
        }
    }
}

/// A built, immutable KNN index over unit-normalized vectors.
pub trait SearchIndex: Send + Sync {
    /// Top `min(k, len)` neighbors of `query` (normalized internally), best first.
    fn search(&self, query: &[f32], k: usize) -> Result<Vec<Neighbor>>;

    /// Same as [`SearchIndex::search`] for a query that is already unit norm.
    fn search_normalized(&self, query: &[f32], k: usize) -> Result<Vec<Neighbor>>;

    fn vectors(&self) -> &VectorSet;

    fn stats(&self) -> &BuildStats;

    fn kind(&self) -> BackendKind;

    fn len(&self) -> usize {
        self.vectors().len()
    }

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dim(&self) -> usize {
        self.vectors().dim()
    }

    /// Writes backend-specific structures next to the vector file, using
    /// `stem` as the file-name prefix inside `dir`. Flat indexes have none.
    fn save_structures(&self, _dir: &Path, _stem: &str) -> Result<()> {
        Ok(())
    }
}

/// Inverse of [`SearchIndex::save_structures`]: rebuilds an index of `kind`
/// over `vectors` from the files under `dir`/`stem`.
pub fn load_index(kind: &BackendKind, vectors: VectorSet, dir: &Path, stem: &str) -> Result<Box<dyn SearchIndex>> {
    Ok(match kind {
        BackendKind::Exact => Box::new(BruteForceIndex::build(vectors)?),
        BackendKind::Ivf(p) => {
            let p = p.clamped_to(vectors.len());
            Box::new(IvfIndex::load(
                vectors,
                dir.join(format!("{stem}.ivfc")),
                dir.join(format!("{stem}.ivfl")),
                p,
            )?)
        }
    })
}

/// Builds the requested backend over `vectors` (normalized at ingest). For
/// IVF, `nlist` and `nprobe` are clamped to the vector count so that small
/// partitions still get an index.
pub fn build_index(kind: &BackendKind, vectors: VectorSet) -> Result<Box<dyn SearchIndex>> {
    Ok(match kind {
        BackendKind::Exact => Box::new(BruteForceIndex::build(vectors)?),
        BackendKind::Ivf(p) => {
            let p = p.clamped_to(vectors.len());
            Box::new(ivf_build(vectors, &p)?)
        }
    })
}

pub(crate) fn check_k(k: usize) -> Result<()> {
    if k < 1 {
        return Err(Error::InvalidInput("k must be ≥ 1".into()));
    }
    Ok(())
}
