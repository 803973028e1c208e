//! Recall / latency benchmark for partitioned search.
//!
//! Recall is always measured against exact brute-force neighbors over the
//! whole corpus. Queries run one at a time; the first few queries of every
//! configuration are a warmup and do not count toward latency.

use std::fmt::Write as _;
use std::ops::AddAssign;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::knn::{brute_force_search, build_index, BackendKind, VectorSet};
use crate::pnns::{build_partitioned, recall_at_k, PartitionedIndex};
use crate::router::RouterModel;
use crate::schedule::simulate_build;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub probes: Vec<usize>,
    pub cutoff: f64,
    pub k: usize,
    pub warmup: usize,
    /// Machine counts for the simulated multi-machine build.
    pub machines: Vec<usize>,
    pub jobs: usize,
    /// Also benchmark each backend over the unpartitioned corpus.
    pub global_baseline: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            probes: vec![1, 2, 4, 8, 16],
            cutoff: crate::pnns::DEFAULT_CUTOFF,
            k: 100,
            warmup: 10,
            machines: vec![1, 2, 4, 8],
            jobs: 1,
            global_baseline: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    /// `pnns` or `global`.
    pub mode: String,
    pub backend: String,
    pub probes: Option<usize>,
    pub cutoff: Option<f64>,
    /// Mean number of clusters actually searched per query.
    pub mean_probes: f64,
    pub recall: f64,
    pub latency_mean_ms: f64,
    pub latency_p50_ms: f64,
    pub latency_p99_ms: f64,
    pub build_seconds: f64,
    pub makespans: Vec<(usize, f64)>,
}

/// Effective probe count of one query under one configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeRecord {
    pub backend: String,
    pub query: u64,
    pub max_probes: usize,
    pub probed: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BenchReport {
    pub k: usize,
    pub queries: usize,
    pub rows: Vec<BenchRow>,
    pub probe_log: Vec<ProbeRecord>,
}

const COLUMNS: [&str; 11] = [
    "mode",
    "backend",
    "probes",
    "cutoff",
    "mean_probes",
    "recall_at_k",
    "latency_mean_ms",
    "latency_p50_ms",
    "latency_p99_ms",
    "build_seconds",
    "makespans",
];

impl BenchReport {
    /// Columns holding wall-clock measurements; everything else is a pure
    /// function of the inputs and seeds.
    pub const TIMING_COLUMNS: [&'static str; 5] = [
        "latency_mean_ms",
        "latency_p50_ms",
        "latency_p99_ms",
        "build_seconds",
        "makespans",
    ];

    fn cells(row: &BenchRow) -> [String; 11] {
        let makespans = row
            .makespans
            .iter()
            .map(|(m, s)| format!("{m}:{s:.6}"))
            .collect::<Vec<_>>()
            .join(",");
        [
            row.mode.clone(),
            row.backend.clone(),
            row.probes.map_or("all".into(), |d| d.to_string()),
            row.cutoff.map_or("-".into(), |t| format!("{t}")),
            format!("{:.3}", row.mean_probes),
            format!("{:.6}", row.recall),
            format!("{:.4}", row.latency_mean_ms),
            format!("{:.4}", row.latency_p50_ms),
            format!("{:.4}", row.latency_p99_ms),
            format!("{:.6}", row.build_seconds),
            if makespans.is_empty() { "-".into() } else { makespans },
        ]
    }

    pub fn to_tsv(&self) -> String {
        let mut s = COLUMNS.join("\t");
        s.push('\n');
        for row in &self.rows {
            s.push_str(&Self::cells(row).join("\t"));
            s.push('\n');
        }
        s
    }

    /// Aligned plain-text table.
    pub fn to_text(&self) -> String {
        let rows: Vec<[String; 11]> = self.rows.iter().map(Self::cells).collect();
        let mut width: Vec<usize> = COLUMNS.iter().map(|c| c.len()).collect();
        for r in &rows {
            for (w, c) in width.iter_mut().zip(r) {
                *w = (*w).max(c.len());
            }
        }
        let mut s = format!("recall@{} over {} queries (exact brute-force oracle)\n", self.k, self.queries);
        let line = |cells: Vec<&str>, s: &mut String| {
            let parts: Vec<String> = cells.iter().zip(&width).map(|(c, w)| format!("{c:<w$}")).collect();
            let _ = writeln!(s, "{}", parts.join("  ").trim_end());
        };
        line(COLUMNS.to_vec(), &mut s);
        for r in &rows {
            line(r.iter().map(String::as_str).collect(), &mut s);
        }
        s
    }

    pub fn write_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_string(path.as_ref(), &self.to_tsv())
    }

    pub fn write_text(&self, path: impl AsRef<Path>) -> Result<()> {
        write_string(path.as_ref(), &self.to_text())
    }

    /// `backend, query, max_probes, probed` per query and configuration.
    pub fn write_probe_log(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |e| Error::io(path, e);
        let mut out = BufWriter::new(File::create(path).map_err(io)?);
        writeln!(out, "backend\tquery\tmax_probes\tprobed").map_err(io)?;
        for p in &self.probe_log {
            writeln!(out, "{}\t{}\t{}\t{}", p.backend, p.query, p.max_probes, p.probed).map_err(io)?;
        }
        out.flush().map_err(io)
    }
}

fn write_string(path: &Path, s: &str) -> Result<()> {
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Exact top-k ids per query. `corpus` must be unit-normalized.
pub fn exact_neighbors(corpus: &VectorSet, queries: &VectorSet, k: usize) -> Result<Vec<Vec<u64>>> {
    queries
        .rows()
        .map(|(_, q)| Ok(brute_force_search(corpus, q, k)?.iter().map(|n| n.id).collect()))
        .collect()
}

struct Latency {
    mean: f64,
    p50: f64,
    p99: f64,
}

/// Nearest-rank percentiles over the samples after the warmup.
fn latency_stats(ms: &[f64], warmup: usize) -> Latency {
    let skip = warmup.min(ms.len().saturating_sub(1));
    let mut v: Vec<f64> = ms[skip..].to_vec();
    v.sort_by(f64::total_cmp);
    let pct = |p: f64| v[((p * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1];
    Latency {
        mean: v.iter().sum::<f64>() / v.len() as f64,
        p50: pct(0.5),
        p99: pct(0.99),
    }
}

fn check_inputs(corpus: &VectorSet, queries: &VectorSet, cfg: &BenchConfig) -> Result<()> {
    if queries.is_empty() {
        return Err(Error::InvalidInput("benchmark needs at least one query".into()));
    }
    if queries.dim() != corpus.dim() {
        return Err(Error::DimensionMismatch {
            expected: corpus.dim(),
            actual: queries.dim(),
        });
    }
    if cfg.k == 0 || cfg.probes.contains(&0) {
        return Err(Error::InvalidInput("k and probe counts must be ≥ 1".into()));
    }
    Ok(())
}

fn makespans(times: &[f64], machines: &[usize]) -> Result<Vec<(usize, f64)>> {
    if machines.is_empty() {
        return Ok(Vec::new());
    }
    // sub-resolution timings would otherwise be rejected as non-positive costs
    let costs: Vec<f64> = times.iter().map(|&t| t.max(1e-9)).collect();
    simulate_build(&costs, machines)
}

/// Rows for one built partitioned index, one per probe count.
pub fn bench_partitioned(
    index: &PartitionedIndex,
    queries: &VectorSet,
    exact: &[Vec<u64>],
    cfg: &BenchConfig,
    report: &mut BenchReport,
) -> Result<()> {
    let backend = index.backend().to_string();
    let build: f64 = index.build_seconds().iter().sum();
    let spans = makespans(index.build_seconds(), &cfg.machines)?;
    for &d in &cfg.probes {
        let mut ms = Vec::with_capacity(queries.len());
        let mut recall = 0.0;
        let mut probes = 0usize;
        for ((id, q), truth) in queries.rows().zip(exact) {
            let start = Instant::now();
            let res = index.query(q, cfg.k, d, cfg.cutoff)?;
            ms.push(start.elapsed().as_secs_f64() * 1e3);
            let got: Vec<u64> = res.neighbors.iter().map(|n| n.id).collect();
            recall += recall_at_k(&got, truth)?;
            probes += res.probed.len();
            report.probe_log.push(ProbeRecord {
                backend: backend.clone(),
                query: id,
                max_probes: d,
                probed: res.probed.len(),
            });
        }
        let lat = latency_stats(&ms, cfg.warmup);
        let n = queries.len() as f64;
        report.rows.push(BenchRow {
            mode: "pnns".into(),
            backend: backend.clone(),
            probes: Some(d),
            cutoff: Some(cfg.cutoff),
            mean_probes: probes as f64 / n,
            recall: recall / n,
            latency_mean_ms: lat.mean,
            latency_p50_ms: lat.p50,
            latency_p99_ms: lat.p99,
            build_seconds: build,
            makespans: spans.clone(),
        });
    }
    Ok(())
}

/// One row for `backend` built over the whole corpus.
pub fn bench_global(
    backend: &BackendKind,
    corpus: &VectorSet,
    queries: &VectorSet,
    exact: &[Vec<u64>],
    cfg: &BenchConfig,
    report: &mut BenchReport,
) -> Result<()> {
    let start = Instant::now();
    let index = build_index(backend, corpus.clone())?;
    let build = start.elapsed().as_secs_f64();
    let mut ms = Vec::with_capacity(queries.len());
    let mut recall = 0.0;
    for ((_, q), truth) in queries.rows().zip(exact) {
        let start = Instant::now();
        let res = index.search(q, cfg.k)?;
        ms.push(start.elapsed().as_secs_f64() * 1e3);
        let got: Vec<u64> = res.iter().map(|n| n.id).collect();
        recall += recall_at_k(&got, truth)?;
    }
    let lat = latency_stats(&ms, cfg.warmup);
    report.rows.push(BenchRow {
        mode: "global".into(),
        backend: backend.to_string(),
        probes: None,
        cutoff: None,
        mean_probes: 1.0,
        recall: recall / queries.len() as f64,
        latency_mean_ms: lat.mean,
        latency_p50_ms: lat.p50,
        latency_p99_ms: lat.p99,
        build_seconds: build,
        makespans: makespans(&[build], &cfg.machines)?,
    });
    Ok(())
}

/// Builds a partitioned index per backend from `assignment` and `router`,
/// then benchmarks every probe count (plus the global baseline if enabled).
pub fn run_bench(
    corpus: &VectorSet,
    queries: &VectorSet,
    assignment: &[u32],
    router: &RouterModel,
    backends: &[BackendKind],
    cfg: &BenchConfig,
) -> Result<BenchReport> {
    check_inputs(corpus, queries, cfg)?;
    let mut normalized = corpus.clone();
    normalized.normalize_rows()?;
    let exact = exact_neighbors(&normalized, queries, cfg.k)?;
    let mut report = BenchReport {
        k: cfg.k,
        queries: queries.len(),
        ..Default::default()
    };
    for backend in backends {
        let index = build_partitioned(corpus.clone(), assignment, router.clone(), backend, cfg.jobs)?;
        bench_partitioned(&index, queries, &exact, cfg, &mut report)?;
        if cfg.global_baseline {
            bench_global(backend, &normalized, queries, &exact, cfg, &mut report)?;
        }
    }
    Ok(report)
}

/// Report over an already built index (no global baseline).
pub fn run_bench_on_index(
    index: &PartitionedIndex,
    corpus: &VectorSet,
    queries: &VectorSet,
    cfg: &BenchConfig,
) -> Result<BenchReport> {
    check_inputs(corpus, queries, cfg)?;
    let mut normalized = corpus.clone();
    normalized.normalize_rows()?;
    let exact = exact_neighbors(&normalized, queries, cfg.k)?;
    let mut report = BenchReport {
        k: cfg.k,
        queries: queries.len(),
        ..Default::default()
    };
    bench_partitioned(index, queries, &exact, cfg, &mut report)?;
    Ok(report)
}

/// Best recall any router could reach with `d` probes: per query, the share
/// of its exact neighbors held by the `d` clusters containing the most of
/// them. The gap to measured recall is routing error; the rest is the
/// partitioning. `assignment[i]` is the cluster of `corpus_ids[i]`.
pub fn oracle_probe_recall(
    corpus_ids: &[u64],
    assignment: &[u32],
    r: usize,
    exact: &[Vec<u64>],
    probes: &[usize],
) -> Result<Vec<(usize, f64)>> {
    if corpus_ids.len() != assignment.len() {
        return Err(Error::InvalidInput(format!(
            "{} cluster labels for {} corpus ids",
            assignment.len(),
            corpus_ids.len()
        )));
    }
    if exact.is_empty() {
        return Err(Error::InvalidInput("no queries".into()));
    }
    let cluster: std::collections::HashMap<u64, u32> = corpus_ids.iter().copied().zip(assignment.iter().copied()).collect();
    let mut sums = vec![0.0; probes.len()];
    let mut counts = vec![0usize; r];
    for truth in exact {
        counts.iter_mut().for_each(|c| *c = 0);
        for id in truth {
            let c = *cluster
                .get(id)
                .ok_or_else(|| Error::InvalidInput(format!("neighbor {id} has no cluster")))?;
            counts
                .get_mut(c as usize)
                .ok_or_else(|| Error::InvalidInput(format!("cluster {c} outside [0, {r})")))?
                .add_assign(1);
        }
        let mut sorted = counts.clone();
        sorted.sort_unstable_by(|a, b| b.cmp(a));
        for (s, &d) in sums.iter_mut().zip(probes) {
            let held: usize = sorted.iter().take(d).sum();
            *s += if truth.is_empty() { 1.0 } else { held as f64 / truth.len() as f64 };
        }
    }
    Ok(probes.iter().copied().zip(sums.into_iter().map(|s| s / exact.len() as f64)).collect())
}

pub fn write_oracle_recall(path: impl AsRef<Path>, rows: &[(usize, f64)]) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::from("probes\toracle_recall\n");
    for (d, r) in rows {
        let _ = writeln!(s, "{d}\t{r:.6}");
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}
