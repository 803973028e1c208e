//! Negative sampling for training batches.
//!
//! [`GraphNegatives`] mines hard negatives: each query picks one cluster
//! uniformly from the `w` clusters with the highest affinity to its own
//! cluster, then draws ⌈t/n⌉ documents uniformly (with replacement) from it.
//! [`RandomNegatives`] is the uniform baseline with the same per-query count.
//! Both reject known positive pairs, so no emitted pair is a training positive.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{AffinityMatrix, BipartiteGraph};
use crate::partition::Partitioning;

/// Redraws allowed for one negative before its cluster is given up on.
const MAX_REJECTIONS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ClusterChoice {
    #[default]
    Uniform,
    /// Probability proportional to affinity within the window.
    AffinityProportional,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    /// Number of top-affinity clusters to choose from (w).
    pub window: usize,
    /// Negatives per batch (t); each of n queries gets ⌈t/n⌉.
    pub budget: usize,
    pub seed: u64,
    pub choice: ClusterChoice,
    /// Fraction of negatives drawn uniformly from the whole corpus instead.
    pub random_mix: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            window: 2,
            budget: 256,
            seed: 0,
            choice: ClusterChoice::Uniform,
            random_mix: 0.0,
        }
    }
}

impl SamplerConfig {
    fn validate(&self) -> Result<()> {
        if self.window == 0 || self.budget == 0 {
            return Err(Error::InvalidInput("window and sample budget must be ≥ 1".into()));
        }
        if !(0.0..=1.0).contains(&self.random_mix) {
            return Err(Error::InvalidInput(format!("random mix {} not in [0, 1]", self.random_mix)));
        }
        Ok(())
    }
}

/// The `w` clusters with the largest affinity to `c`, excluding `c`, ties to
/// the lower cluster id. Zero-affinity clusters pad the list in id order and
/// `w` is clamped to r−1.
pub fn top_affinity_clusters(affinity: &AffinityMatrix, c: usize, w: usize) -> Vec<u32> {
    let row = affinity.row(c);
    let mut others: Vec<u32> = (0..affinity.r() as u32).filter(|&j| j as usize != c).collect();
    others.sort_by(|&a, &b| row[b as usize].cmp(&row[a as usize]).then(a.cmp(&b)));
    others.truncate(w);
    others
}

/// Anything that can supply labeled-negative (query, doc) pairs for a batch.
pub trait NegativeSource {
    /// Negatives for the given query indices, ⌈t/n⌉ per query, grouped by query in input order.
    fn negatives(&mut self, queries: &[u32]) -> Result<Vec<(u32, u32)>>;
}

fn per_query(budget: usize, n: usize) -> usize {
    budget.div_ceil(n.max(1))
}

/// Draws one non-positive document for `q` uniformly from `pool`.
fn draw_from(graph: &BipartiteGraph, q: u32, pool: &[u32], rng: &mut ChaCha8Rng) -> Option<u32> {
    if pool.is_empty() {
        return None;
    }
    for _ in 0..MAX_REJECTIONS {
        let d = pool[rng.gen_range(0..pool.len())];
        if !graph.has_edge(q, d) {
            return Some(d);
        }
    }
    None
}

/// Hard negative mining over a graph partitioning.
pub struct GraphNegatives<'a> {
    graph: &'a BipartiteGraph,
    partitioning: &'a Partitioning,
    docs_by_cluster: Vec<Vec<u32>>,
    all_docs: Vec<u32>,
    windows: Vec<Vec<u32>>,
    window_weights: Vec<Vec<u64>>,
    cfg: SamplerConfig,
    rng: ChaCha8Rng,
}

impl<'a> GraphNegatives<'a> {
    pub fn new(
        graph: &'a BipartiteGraph,
        partitioning: &'a Partitioning,
        affinity: &AffinityMatrix,
        cfg: SamplerConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        partitioning.check_covers(graph)?;
        if affinity.r() != partitioning.r() {
            return Err(Error::InvalidInput(format!(
                "affinity is {}×{} but the partitioning has r={}",
                affinity.r(),
                affinity.r(),
                partitioning.r()
            )));
        }
        let windows: Vec<Vec<u32>> = (0..affinity.r())
            .map(|c| top_affinity_clusters(affinity, c, cfg.window))
            .collect();
        let window_weights = windows
            .iter()
            .enumerate()
            .map(|(c, w)| w.iter().map(|&j| affinity.get(c, j as usize)).collect())
            .collect();
        Ok(Self {
            graph,
            partitioning,
            docs_by_cluster: partitioning.docs_by_cluster(graph),
            all_docs: (0..graph.num_docs() as u32).collect(),
            windows,
            window_weights,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
        })
    }

    pub fn window(&self, cluster: usize) -> &[u32] {
        &self.windows[cluster]
    }

    /// Picks the cluster a query's negatives come from, or `None` when no
    /// candidate remains.
    fn choose_cluster(&mut self, candidates: &[(u32, u64)]) -> Option<u32> {
        if candidates.is_empty() {
            return None;
        }
        let total: u64 = candidates.iter().map(|c| c.1).sum();
        let i = match self.cfg.choice {
            ClusterChoice::AffinityProportional if total > 0 => {
                let dist = WeightedIndex::new(candidates.iter().map(|c| c.1)).ok()?;
                dist.sample(&mut self.rng)
            }
            _ => self.rng.gen_range(0..candidates.len()),
        };
        Some(candidates[i].0)
    }

    fn negatives_for(&mut self, q: u32, count: usize, out: &mut Vec<(u32, u32)>) -> Result<()> {
        let own = self.partitioning.cluster_of(q) as usize;
        let mut candidates: Vec<(u32, u64)> = self.windows[own]
            .iter()
            .zip(&self.window_weights[own])
            .filter(|(&j, _)| !self.docs_by_cluster[j as usize].is_empty())
            .map(|(&j, &w)| (j, w))
            .collect();
        let no_negatives = || Error::NoNegatives {
            query: self.graph.queries().id(q).to_owned(),
        };
        let mut cluster = self.choose_cluster(&candidates).ok_or_else(no_negatives)?;
        let mut produced = 0;
        while produced < count {
            let from_corpus = self.cfg.random_mix > 0.0 && self.rng.gen_bool(self.cfg.random_mix);
            let drawn = if from_corpus {
                draw_from(self.graph, q, &self.all_docs, &mut self.rng)
            } else {
                draw_from(self.graph, q, &self.docs_by_cluster[cluster as usize], &mut self.rng)
            };
            match drawn {
                Some(d) => {
                    out.push((q, d));
                    produced += 1;
                }
                None if from_corpus => return Err(no_negatives()),
                None => {
                    // cluster is (effectively) all positives for q
                    candidates.retain(|c| c.0 != cluster);
                    cluster = self.choose_cluster(&candidates).ok_or_else(no_negatives)?;
                }
            }
        }
        Ok(())
    }
}

impl NegativeSource for GraphNegatives<'_> {
    fn negatives(&mut self, queries: &[u32]) -> Result<Vec<(u32, u32)>> {
        let count = per_query(self.cfg.budget, queries.len());
        let mut out = Vec::with_capacity(count * queries.len());
        for &q in queries {
            self.negatives_for(q, count, &mut out)?;
        }
        Ok(out)
    }
}

/// One-shot form of [`GraphNegatives`] for a single batch.
pub fn sample_negatives(
    graph: &BipartiteGraph,
    partitioning: &Partitioning,
    affinity: &AffinityMatrix,
    queries: &[u32],
    cfg: &SamplerConfig,
) -> Result<Vec<(u32, u32)>> {
    GraphNegatives::new(graph, partitioning, affinity, cfg.clone())?.negatives(queries)
}

/// Uniform negatives from the whole corpus.
pub struct RandomNegatives<'a> {
    graph: &'a BipartiteGraph,
    docs: Vec<u32>,
    budget: usize,
    rng: ChaCha8Rng,
}

impl<'a> RandomNegatives<'a> {
    pub fn new(graph: &'a BipartiteGraph, budget: usize, seed: u64) -> Result<Self> {
        if budget == 0 {
            return Err(Error::InvalidInput("sample budget must be ≥ 1".into()));
        }
        Ok(Self {
            graph,
            docs: (0..graph.num_docs() as u32).collect(),
            budget,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }
}

impl NegativeSource for RandomNegatives<'_> {
    fn negatives(&mut self, queries: &[u32]) -> Result<Vec<(u32, u32)>> {
        let count = per_query(self.budget, queries.len());
        let mut out = Vec::with_capacity(count * queries.len());
        for &q in queries {
            for _ in 0..count {
                let d = draw_from(self.graph, q, &self.docs, &mut self.rng).ok_or_else(|| Error::NoNegatives {
                    query: self.graph.queries().id(q).to_owned(),
                })?;
                out.push((q, d));
            }
        }
        Ok(out)
    }
}

/// Supplies no negatives at all.
pub struct NoNegatives;

impl NegativeSource for NoNegatives {
    fn negatives(&mut self, _queries: &[u32]) -> Result<Vec<(u32, u32)>> {
        Ok(Vec::new())
    }
}

/// Dumps pairs as `query_id<TAB>doc_id<TAB>0`.
pub fn write_negatives(path: impl AsRef<Path>, graph: &BipartiteGraph, pairs: &[(u32, u32)]) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    for &(q, d) in pairs {
        writeln!(out, "{}\t{}\t0", graph.queries().id(q), graph.docs().id(d)).map_err(io)?;
    }
    out.flush().map_err(io)
}
