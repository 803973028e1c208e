//! Partitioned nearest neighbor search.
//!
//! The corpus is split by cluster and each cluster gets its own backend
//! index. A query is routed to the clusters the router deems most likely,
//! each probed cluster returns its own top k, and the merged list is cut
//! back to the global top k.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::knn::{build_index, load_index, normalized_query, read_vec1, write_vec1, BackendKind, IvfParams, Neighbor, SearchIndex, TopK, VectorSet};
use crate::router::{top_clusters, RouterModel};

/// Cumulative router probability at which probing stops by default.
pub const DEFAULT_CUTOFF: f64 = 0.99;

pub struct PartitionedIndex {
    clusters: Vec<Box<dyn SearchIndex>>,
    router: RouterModel,
    backend: BackendKind,
    dim: usize,
    build_seconds: Vec<f64>,
}

/// Result of one routed query.
#[derive(Clone, Debug, PartialEq)]
pub struct PnnsResult {
    pub neighbors: Vec<Neighbor>,
    /// Clusters actually searched, in probe order.
    pub probed: Vec<u32>,
}

fn backend_for_cluster(backend: &BackendKind, cluster: usize) -> BackendKind {
    match backend {
        BackendKind::Exact => BackendKind::Exact,
        BackendKind::Ivf(p) => BackendKind::Ivf(IvfParams {
            seed: p.seed.wrapping_add(cluster as u64),
            ..p.clone()
        }),
    }
}

/// Splits `corpus` by `assignment` (cluster of each row) and builds one
/// backend index per cluster on a pool of `jobs` threads. Per-cluster build
/// wall times are recorded for the scheduler.
pub fn build_partitioned(
    corpus: VectorSet,
    assignment: &[u32],
    router: RouterModel,
    backend: &BackendKind,
    jobs: usize,
) -> Result<PartitionedIndex> {
    let r = router.num_clusters();
    if assignment.len() != corpus.len() {
        return Err(Error::InvalidInput(format!(
            "{} cluster labels for {} corpus vectors",
            assignment.len(),
            corpus.len()
        )));
    }
    if let Some(&c) = assignment.iter().find(|&&c| c as usize >= r) {
        return Err(Error::InvalidInput(format!("cluster {c} outside router range [0, {r})")));
    }
    if router.input_dim() != corpus.dim() {
        return Err(Error::DimensionMismatch {
            expected: corpus.dim(),
            actual: router.input_dim(),
        });
    }
    let dim = corpus.dim();
    let mut corpus = corpus;
    corpus.normalize_rows()?;
    let mut rows = vec![Vec::new(); r];
    for (i, &c) in assignment.iter().enumerate() {
        rows[c as usize].push(i);
    }
    let parts: Vec<VectorSet> = rows.iter().map(|rs| corpus.subset(rs)).collect();
    drop(corpus);

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
    let built: Vec<Result<(Box<dyn SearchIndex>, f64)>> = pool.install(|| {
        parts
            .into_par_iter()
            .enumerate()
            .map(|(c, part)| {
                let start = Instant::now();
                let index = build_index(&backend_for_cluster(backend, c), part)?;
                Ok((index, start.elapsed().as_secs_f64()))
            })
            .collect()
    });
    let mut clusters = Vec::with_capacity(r);
    let mut build_seconds = Vec::with_capacity(r);
    for b in built {
        let (index, secs) = b?;
        clusters.push(index);
        build_seconds.push(secs);
    }
    Ok(PartitionedIndex {
        clusters,
        router,
        backend: backend.clone(),
        dim,
        build_seconds,
    })
}

impl PartitionedIndex {
    pub fn num_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.clusters.iter().map(|c| c.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cluster(&self, c: usize) -> &dyn SearchIndex {
        self.clusters[c].as_ref()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        self.clusters.iter().map(|c| c.len()).collect()
    }

    pub fn router(&self) -> &RouterModel {
        &self.router
    }

    pub fn backend(&self) -> &BackendKind {
        &self.backend
    }

    /// Wall seconds spent building each cluster index (zero after [`PartitionedIndex::load`]).
    pub fn build_seconds(&self) -> &[f64] {
        &self.build_seconds
    }

    pub fn memory_bytes(&self) -> usize {
        self.clusters.iter().map(|c| c.stats().memory_bytes).sum()
    }

    fn route(&self, q: &[f32], d: usize, t: f64) -> Result<(Vec<f32>, Vec<u32>)> {
        if d == 0 {
            return Err(Error::InvalidInput("probe count must be ≥ 1".into()));
        }
        let q = normalized_query(q, self.dim)?;
        let probs = self.router.predict(&q)?;
        Ok((q, top_clusters(&probs, d, t)))
    }

    /// Top `k` over the clusters chosen by the router (at most `d`, stopping
    /// once their probability mass reaches `t`). Clusters are searched one
    /// after another.
    pub fn query(&self, q: &[f32], k: usize, d: usize, t: f64) -> Result<PnnsResult> {
        let (q, probed) = self.route(q, d, t)?;
        let mut top = TopK::new(k);
        for &c in &probed {
            let index = &self.clusters[c as usize];
            if index.is_empty() {
                continue;
            }
            for n in index.search_normalized(&q, k)? {
                top.push(n);
            }
        }
        Ok(PnnsResult {
            neighbors: top.into_sorted(),
            probed,
        })
    }

    /// Same result as [`PartitionedIndex::query`], with the probed clusters
    /// searched concurrently.
    pub fn query_parallel(&self, q: &[f32], k: usize, d: usize, t: f64) -> Result<PnnsResult> {
        let (q, probed) = self.route(q, d, t)?;
        let per_cluster: Vec<Result<Vec<Neighbor>>> = probed
            .par_iter()
            .map(|&c| {
                let index = &self.clusters[c as usize];
                if index.is_empty() {
                    Ok(Vec::new())
                } else {
                    index.search_normalized(&q, k)
                }
            })
            .collect();
        let mut top = TopK::new(k);
        for part in per_cluster {
            for n in part? {
                top.push(n);
            }
        }
        Ok(PnnsResult {
            neighbors: top.into_sorted(),
            probed,
        })
    }

    /// Index directory: `meta.tsv`, `cluster_<i>.vec` (plus backend files),
    /// `router.rtr`, and `build_times.tsv` with the measured build seconds.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = dir.join("meta.tsv");
        let io = |e| Error::io(&meta, e);
        let mut out = BufWriter::new(File::create(&meta).map_err(io)?);
        writeln!(out, "#backend={} dim={} r={}", self.backend, self.dim, self.clusters.len()).map_err(io)?;
        writeln!(out, "cluster\tdocs\tbackend").map_err(io)?;
        for (c, index) in self.clusters.iter().enumerate() {
            writeln!(out, "{c}\t{}\t{}", index.len(), index.kind()).map_err(io)?;
            let stem = format!("cluster_{c}");
            write_vec1(dir.join(format!("{stem}.vec")), index.vectors())?;
            index.save_structures(dir, &stem)?;
        }
        out.flush().map_err(io)?;
        self.router.save(dir.join("router.rtr"))?;

        let times = dir.join("build_times.tsv");
        let io = |e| Error::io(&times, e);
        let mut out = BufWriter::new(File::create(&times).map_err(io)?);
        writeln!(out, "cluster\tbuild_seconds").map_err(io)?;
        for (c, s) in self.build_seconds.iter().enumerate() {
            writeln!(out, "{c}\t{s:.6}").map_err(io)?;
        }
        out.flush().map_err(io)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta = dir.join("meta.tsv");
        let file = File::open(&meta).map_err(|e| Error::io(&meta, e))?;
        let mut lines = BufReader::new(file).lines();
        let header = lines
            .next()
            .transpose()
            .map_err(|e| Error::io(&meta, e))?
            .ok_or_else(|| Error::parse(&meta, 1, "missing header"))?;
        let (mut backend, mut dim, mut r) = (None, None, None);
        for kv in header.trim_start_matches('#').split_whitespace() {
            match kv.split_once('=') {
                Some(("backend", v)) => backend = Some(v.parse::<BackendKind>()?),
                Some(("dim", v)) => dim = v.parse::<usize>().ok(),
                Some(("r", v)) => r = v.parse::<usize>().ok(),
                _ => return Err(Error::parse(&meta, 1, format!("unexpected header field {kv}"))),
            }
        }
        let (Some(backend), Some(dim), Some(r)) = (backend, dim, r) else {
            return Err(Error::parse(&meta, 1, "header needs backend, dim and r"));
        };
        let router = RouterModel::load(dir.join("router.rtr"))?;
        if router.num_clusters() != r || router.input_dim() != dim {
            return Err(Error::Format("router shape does not match meta.tsv".into()));
        }
        let mut clusters = Vec::with_capacity(r);
        for c in 0..r {
            let stem = format!("cluster_{c}");
            let vectors = read_vec1(dir.join(format!("{stem}.vec")))?;
            if !vectors.is_empty() && vectors.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: vectors.dim(),
                });
            }
            let vectors = if vectors.is_empty() { VectorSet::empty(dim) } else { vectors };
            clusters.push(load_index(&backend_for_cluster(&backend, c), vectors, dir, &stem)?);
        }
        Ok(Self {
            clusters,
            router,
            backend,
            dim,
            build_seconds: vec![0.0; r],
        })
    }
}

/// |exact ∩ approx| / |exact|.
pub fn recall_at_k(approx: &[u64], exact: &[u64]) -> Result<f64> {
    if exact.is_empty() {
        return Err(Error::InvalidInput("recall needs a nonempty exact result".into()));
    }
    let found: std::collections::HashSet<u64> = approx.iter().copied().collect();
    let hit = exact.iter().filter(|id| found.contains(id)).count();
    Ok(hit as f64 / exact.len() as f64)
}
