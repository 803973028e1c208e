//! End-to-end runs and the file-level stages behind each CLI subcommand.
//!
//! Every artifact is a pure function of the inputs and seeds except the
//! wall-clock measurements, which live in [`TIMING_FILES`] and in the
//! [`BenchReport::TIMING_COLUMNS`] of the benchmark table.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::bench::{
    bench_global, bench_partitioned, exact_neighbors, oracle_probe_recall, write_oracle_recall, BenchConfig, BenchReport,
};
use crate::dataset::{
    assign_corpus, embed_rows, fit_vocab, relevance, router_examples, split_records, tokenize_all, train_data, Texts,
};
use crate::embed::{evaluate_matching, train, MatchingMetrics, ModelParams, TokenVocab, TrainConfig, TrainReport, VocabConfig};
use crate::error::{Error, Result};
use crate::graph::{build_graph_with, cluster_affinity, load_interactions, write_interactions, AffinityMatrix, BipartiteGraph, GraphOptions, InteractionRecord};
use crate::knn::{write_vec1, BackendKind, IvfParams, VectorSet};
use crate::partition::{balance_factor, edge_cut, partition, Partitioning};
use crate::pnns::build_partitioned;
use crate::router::{top_k_coverage, train_router, RouterConfig, RouterModel};
use crate::sampler::{GraphNegatives, NegativeSource, NoNegatives, RandomNegatives, SamplerConfig};
use crate::schedule::{simulate_build, write_makespans};
use crate::synth::{generate, read_texts, write_texts, SynthConfig};

pub const INTERACTIONS: &str = "interactions.tsv";
pub const TRAIN_INTERACTIONS: &str = "train_interactions.tsv";
pub const TEST_INTERACTIONS: &str = "test_interactions.tsv";
pub const QUERY_TEXTS: &str = "query_texts.tsv";
pub const DOC_TEXTS: &str = "doc_texts.tsv";
pub const LABELS: &str = "labels.tsv";
pub const PARTITION: &str = "partition.tsv";
pub const AFFINITY: &str = "affinity.tsv";
pub const PARTITION_STATS: &str = "partition_stats.tsv";
pub const VOCAB: &str = "vocab.tsv";
pub const TRAIN_LOG: &str = "train_log.tsv";
pub const MATCHING: &str = "matching.tsv";
pub const DOC_VECS: &str = "docs.vec";
pub const QUERY_VECS: &str = "queries.vec";
pub const TRAIN_QUERY_VECS: &str = "train_queries.vec";
pub const ROUTER: &str = "router.rtr";
pub const ROUTER_STATS: &str = "router.tsv";
pub const DOC_CLUSTERS: &str = "doc_clusters.tsv";
pub const INDEX_DIR: &str = "index";
pub const BENCH_TSV: &str = "bench.tsv";
pub const BENCH_TXT: &str = "bench.txt";
pub const PROBES: &str = "probes.tsv";
pub const ORACLE_RECALL: &str = "oracle_recall.tsv";
pub const SCHEDULE: &str = "schedule.tsv";
pub const TIMINGS: &str = "timings.tsv";
pub const MANIFEST: &str = "manifest.tsv";

/// Artifacts (relative to the output directory) that hold wall-clock values.
pub const TIMING_FILES: [&str; 4] = [TIMINGS, SCHEDULE, BENCH_TXT, "index/build_times.tsv"];

fn model_file(arm: NegativeArm) -> String {
    format!("model_{}.emb", arm.name())
}

/// Where a training run gets its y = 0 pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NegativeArm {
    Graph,
    Random,
    None,
}

impl NegativeArm {
    pub fn name(self) -> &'static str {
        match self {
            NegativeArm::Graph => "graph",
            NegativeArm::Random => "random",
            NegativeArm::None => "none",
        }
    }
}

impl std::str::FromStr for NegativeArm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "graph" => Ok(NegativeArm::Graph),
            "random" => Ok(NegativeArm::Random),
            "none" => Ok(NegativeArm::None),
            _ => Err(Error::InvalidInput(format!("unknown negative source {s:?} (graph | random | none)"))),
        }
    }
}

fn write_file(path: &Path, s: &str) -> Result<()> {
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Interactions (already split) plus entity texts.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub train: Vec<InteractionRecord>,
    pub test: Vec<InteractionRecord>,
    pub queries: Texts,
    pub docs: Texts,
}

impl Corpus {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        Ok(Self {
            train: load_interactions(dir.join(TRAIN_INTERACTIONS))?,
            test: load_interactions(dir.join(TEST_INTERACTIONS))?,
            queries: Texts::new(read_texts(dir.join(QUERY_TEXTS))?)?,
            docs: Texts::new(read_texts(dir.join(DOC_TEXTS))?)?,
        })
    }

    pub fn train_graph(&self, opts: GraphOptions) -> Result<BipartiteGraph> {
        build_graph_with(&self.train, opts)
    }
}

/// Generates a synthetic dataset into `dir`: all interactions, the
/// train/test split by query, entity texts and planted topic labels.
pub fn stage_gen(cfg: &SynthConfig, test_fraction: f64, dir: impl AsRef<Path>) -> Result<Corpus> {
    let dir = dir.as_ref();
    create_dir(dir)?;
    let data = generate(cfg)?;
    let (train, test) = split_records(&data.records, test_fraction, cfg.seed)?;
    write_interactions(dir.join(INTERACTIONS), &data.records)?;
    write_interactions(dir.join(TRAIN_INTERACTIONS), &train)?;
    write_interactions(dir.join(TEST_INTERACTIONS), &test)?;
    write_texts(dir.join(QUERY_TEXTS), &data.queries)?;
    write_texts(dir.join(DOC_TEXTS), &data.docs)?;
    data.write_labels(dir.join(LABELS))?;
    Ok(Corpus {
        train,
        test,
        queries: Texts::from_entities(&data.queries)?,
        docs: Texts::from_entities(&data.docs)?,
    })
}

pub fn write_affinity(path: impl AsRef<Path>, a: &AffinityMatrix) -> Result<()> {
    let mut s = String::new();
    for i in 0..a.r() {
        let row: Vec<String> = a.row(i).iter().map(u64::to_string).collect();
        s.push_str(&row.join("\t"));
        s.push('\n');
    }
    write_file(path.as_ref(), &s)
}

/// Partitions `graph` and writes the partition, its affinity matrix and a
/// small stats table into `dir`.
pub fn stage_partition(graph: &BipartiteGraph, r: usize, eps: f64, seed: u64, dir: impl AsRef<Path>) -> Result<Partitioning> {
    let dir = dir.as_ref();
    let p = partition(graph, r, eps, seed)?;
    p.save(dir.join(PARTITION), graph)?;
    let a = cluster_affinity(graph, &p)?;
    write_affinity(dir.join(AFFINITY), &a)?;
    let sizes: Vec<String> = p.cluster_sizes().iter().map(usize::to_string).collect();
    write_file(
        &dir.join(PARTITION_STATS),
        &format!(
            "key\tvalue\nclusters\t{r}\neps\t{eps}\nseed\t{seed}\nvertices\t{}\nedges\t{}\nedge_cut\t{}\nbalance_factor\t{:.6}\ncluster_sizes\t{}\n",
            graph.num_vertices(),
            graph.num_edges(),
            edge_cut(graph, &p)?,
            balance_factor(&p),
            sizes.join(",")
        ),
    )?;
    Ok(p)
}

/// Everything a training run needs, derived once from the corpus.
pub struct TrainSetup<'a> {
    pub corpus: &'a Corpus,
    pub graph: &'a BipartiteGraph,
    pub partitioning: &'a Partitioning,
    pub affinity: AffinityMatrix,
    pub vocab: TokenVocab,
    pub query_tokens: Vec<Vec<u32>>,
    pub doc_tokens: Vec<Vec<u32>>,
    pub data: crate::embed::TrainData,
    /// Held-out (query tokens, relevant doc rows).
    pub eval: Vec<(Vec<u32>, Vec<u32>)>,
    pub eval_rows: Vec<usize>,
}

impl<'a> TrainSetup<'a> {
    pub fn new(
        corpus: &'a Corpus,
        graph: &'a BipartiteGraph,
        partitioning: &'a Partitioning,
        vocab_cfg: VocabConfig,
    ) -> Result<Self> {
        partitioning.check_covers(graph)?;
        let vocab = fit_vocab(graph, &corpus.queries, &corpus.docs, vocab_cfg)?;
        let query_tokens = tokenize_all(&vocab, &corpus.queries);
        let doc_tokens = tokenize_all(&vocab, &corpus.docs);
        let data = train_data(graph, vocab.size(), &corpus.queries, &query_tokens, &corpus.docs, &doc_tokens)?;
        let rel = relevance(&corpus.test, &corpus.queries, &corpus.docs)?;
        let eval = rel.iter().map(|(q, r)| (query_tokens[*q].clone(), r.clone())).collect();
        Ok(Self {
            affinity: cluster_affinity(graph, partitioning)?,
            corpus,
            graph,
            partitioning,
            vocab,
            query_tokens,
            doc_tokens,
            data,
            eval,
            eval_rows: rel.into_iter().map(|(q, _)| q).collect(),
        })
    }

    /// Trains one arm; graph and random arms draw the same negative budget.
    pub fn train(&self, arm: NegativeArm, cfg: &TrainConfig, sampler: &SamplerConfig) -> Result<(ModelParams, TrainReport)> {
        let mut source: Box<dyn NegativeSource + '_> = match arm {
            NegativeArm::Graph => Box::new(GraphNegatives::new(self.graph, self.partitioning, &self.affinity, sampler.clone())?),
            NegativeArm::Random => Box::new(RandomNegatives::new(self.graph, sampler.budget, sampler.seed)?),
            NegativeArm::None => Box::new(NoNegatives),
        };
        train(&self.data, cfg, source.as_mut())
    }

    /// Matching MAP / recall at `k` on the held-out queries against every document.
    pub fn evaluate(&self, params: &ModelParams, k: usize) -> Result<MatchingMetrics> {
        evaluate_matching(params, &self.eval, &self.doc_tokens, k)
    }

    pub fn doc_vectors(&self, params: &ModelParams) -> Result<VectorSet> {
        embed_rows(params, &self.doc_tokens, &(0..self.doc_tokens.len()).collect::<Vec<_>>())
    }

    /// Embeddings of the training graph's queries, ids = query text rows.
    pub fn train_query_vectors(&self, params: &ModelParams) -> Result<VectorSet> {
        let rows = self
            .graph
            .queries()
            .ids()
            .iter()
            .map(|id| self.corpus.queries.row_of(id).ok_or_else(|| Error::InvalidInput(format!("query {id} has no text"))))
            .collect::<Result<Vec<_>>>()?;
        embed_rows(params, &self.query_tokens, &rows)
    }

    /// Embeddings of up to `limit` held-out queries, ids = query text rows.
    pub fn test_query_vectors(&self, params: &ModelParams, limit: usize) -> Result<VectorSet> {
        let rows: Vec<usize> = self.eval_rows.iter().copied().take(limit).collect();
        embed_rows(params, &self.query_tokens, &rows)
    }
}

pub fn write_train_log(path: impl AsRef<Path>, runs: &[(NegativeArm, &TrainReport)]) -> Result<()> {
    let mut s = String::from("arm\tepoch\tmean_loss\n");
    for (arm, rep) in runs {
        for (e, l) in rep.epoch_losses.iter().enumerate() {
            s.push_str(&format!("{}\t{e}\t{l:.9}\n", arm.name()));
        }
    }
    write_file(path.as_ref(), &s)
}

pub fn write_matching(path: impl AsRef<Path>, k: usize, runs: &[(NegativeArm, usize, MatchingMetrics)]) -> Result<()> {
    let mut s = format!("arm\tsteps\tmap_at_{k}\trecall_at_{k}\tevaluated\tskipped\n");
    for (arm, steps, m) in runs {
        s.push_str(&format!(
            "{}\t{steps}\t{:.6}\t{:.6}\t{}\t{}\n",
            arm.name(),
            m.map,
            m.recall,
            m.evaluated,
            m.skipped
        ));
    }
    write_file(path.as_ref(), &s)
}

pub fn write_doc_clusters(path: impl AsRef<Path>, corpus: &VectorSet, assignment: &[u32]) -> Result<()> {
    let mut s = String::from("doc\tcluster\n");
    for (id, c) in corpus.ids().iter().zip(assignment) {
        s.push_str(&format!("{id}\t{c}\n"));
    }
    write_file(path.as_ref(), &s)
}

/// Reads `doc<TAB>cluster` lines back into a per-row assignment for `corpus`.
pub fn read_doc_clusters(path: impl AsRef<Path>, corpus: &VectorSet) -> Result<Vec<u32>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut map = std::collections::HashMap::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let (d, c) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(path, i + 1, "expected doc<TAB>cluster"))?;
        let d: u64 = d.parse().map_err(|_| Error::parse(path, i + 1, "bad doc id"))?;
        let c: u32 = c.parse().map_err(|_| Error::parse(path, i + 1, "bad cluster"))?;
        map.insert(d, c);
    }
    corpus
        .ids()
        .iter()
        .map(|id| map.get(id).copied().ok_or_else(|| Error::InvalidInput(format!("document {id} has no cluster"))))
        .collect()
}

pub fn write_router_stats(path: impl AsRef<Path>, model: &RouterModel, accuracy: f64, examples: &[(Vec<f32>, u32)], ks: &[usize]) -> Result<()> {
    let mut s = format!("metric\tvalue\ntrain_accuracy\t{accuracy:.6}\n");
    for &k in ks {
        s.push_str(&format!("top_{k}_coverage\t{:.6}\n", top_k_coverage(model, examples, k)?));
    }
    write_file(path.as_ref(), &s)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub synth: SynthConfig,
    pub test_fraction: f64,
    pub clusters: usize,
    pub eps: f64,
    pub partition_seed: u64,
    pub ignore_weights: bool,
    pub vocab: VocabConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    /// Negative sources to train and compare; the first model serves
    /// retrieval. Graph negatives are skipped when `clusters` is 1.
    pub arms: Vec<NegativeArm>,
    pub router: RouterConfig,
    /// The first backend's index is persisted; all are benchmarked.
    pub backends: Vec<BackendKind>,
    pub bench: BenchConfig,
    pub bench_queries: usize,
    /// Cutoff for matching metrics.
    pub matching_k: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::with_seed(0)
    }
}

impl PipelineConfig {
    /// Defaults with every stage seeded from `seed`.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            synth: SynthConfig {
                seed,
                ..Default::default()
            },
            test_fraction: 0.2,
            clusters: 8,
            eps: crate::partition::DEFAULT_EPS,
            partition_seed: seed,
            ignore_weights: false,
            vocab: VocabConfig::default(),
            train: TrainConfig {
                seed,
                ..Default::default()
            },
            sampler: SamplerConfig {
                seed,
                ..Default::default()
            },
            arms: vec![NegativeArm::Graph, NegativeArm::Random],
            router: RouterConfig {
                seed,
                ..Default::default()
            },
            backends: vec![
                BackendKind::Exact,
                BackendKind::Ivf(IvfParams {
                    nlist: 8,
                    nprobe: 2,
                    seed,
                    ..Default::default()
                }),
            ],
            bench: BenchConfig::default(),
            bench_queries: 1000,
            matching_k: 100,
        }
    }

    /// `key<TAB>value` lines recording every setting and seed.
    pub fn manifest(&self) -> String {
        let s = &self.synth;
        let mut rows: Vec<(String, String)> = vec![
            ("version".into(), env!("CARGO_PKG_VERSION").into()),
            ("synth.seed".into(), s.seed.to_string()),
            ("synth.topics".into(), s.topics.to_string()),
            ("synth.groups".into(), s.groups.to_string()),
            ("synth.queries_per_topic".into(), s.queries_per_topic.to_string()),
            ("synth.docs_per_topic".into(), s.docs_per_topic.to_string()),
            ("synth.p_in".into(), s.p_in.to_string()),
            ("synth.p_group".into(), s.p_group.to_string()),
            ("synth.p_out".into(), s.p_out.to_string()),
            ("synth.topic_tokens".into(), s.topic_tokens.to_string()),
            ("synth.group_tokens".into(), s.group_tokens.to_string()),
            ("synth.noise_tokens".into(), s.noise_tokens.to_string()),
            ("synth.query_len".into(), s.query_len.to_string()),
            ("synth.doc_len".into(), s.doc_len.to_string()),
            ("synth.topic_token_prob".into(), s.topic_token_prob.to_string()),
            ("synth.group_token_prob".into(), s.group_token_prob.to_string()),
            ("split.test_fraction".into(), self.test_fraction.to_string()),
            ("partition.clusters".into(), self.clusters.to_string()),
            ("partition.eps".into(), self.eps.to_string()),
            ("partition.seed".into(), self.partition_seed.to_string()),
            ("graph.ignore_weights".into(), self.ignore_weights.to_string()),
            ("vocab.unigrams".into(), self.vocab.unigram_capacity.to_string()),
            ("vocab.oov_bins".into(), self.vocab.oov_bins.to_string()),
            ("vocab.bigram_bins".into(), self.vocab.bigram_bins.to_string()),
            ("vocab.trigram_bins".into(), self.vocab.trigram_bins.to_string()),
        ];
        let t = &self.train;
        rows.extend([
            ("train.seed".into(), t.seed.to_string()),
            ("train.dim".into(), t.dim.to_string()),
            ("train.batch_size".into(), t.batch_size.to_string()),
            ("train.epochs".into(), t.epochs.to_string()),
            ("train.lr".into(), t.lr.to_string()),
            ("train.beta1".into(), t.beta1.to_string()),
            ("train.beta2".into(), t.beta2.to_string()),
            ("train.adam_eps".into(), t.adam_eps.to_string()),
            ("train.t1".into(), t.t1.to_string()),
            ("train.t2".into(), t.t2.to_string()),
            ("sampler.seed".into(), self.sampler.seed.to_string()),
            ("sampler.window".into(), self.sampler.window.to_string()),
            ("sampler.budget".into(), self.sampler.budget.to_string()),
            ("sampler.choice".into(), format!("{:?}", self.sampler.choice)),
            ("sampler.random_mix".into(), self.sampler.random_mix.to_string()),
            ("train.arms".into(), self.arms.iter().map(|a| a.name()).collect::<Vec<_>>().join(",")),
            ("router.seed".into(), self.router.seed.to_string()),
            ("router.hidden".into(), self.router.hidden.to_string()),
            ("router.epochs".into(), self.router.epochs.to_string()),
            ("router.batch_size".into(), self.router.batch_size.to_string()),
            ("router.lr".into(), self.router.lr.to_string()),
        ]);
        for (i, b) in self.backends.iter().enumerate() {
            rows.push((format!("backend.{i}"), b.to_string()));
        }
        let probes: Vec<String> = self.bench.probes.iter().map(usize::to_string).collect();
        let machines: Vec<String> = self.bench.machines.iter().map(usize::to_string).collect();
        rows.extend([
            ("bench.probes".into(), probes.join(",")),
            ("bench.cutoff".into(), self.bench.cutoff.to_string()),
            ("bench.k".into(), self.bench.k.to_string()),
            ("bench.warmup".into(), self.bench.warmup.to_string()),
            ("bench.machines".into(), machines.join(",")),
            ("bench.jobs".into(), self.bench.jobs.to_string()),
            ("bench.queries".into(), self.bench_queries.to_string()),
            ("matching.k".into(), self.matching_k.to_string()),
        ]);
        let mut out = String::from("key\tvalue\n");
        for (k, v) in rows {
            out.push_str(&format!("{k}\t{v}\n"));
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct PipelineSummary {
    pub out_dir: PathBuf,
    pub edge_cut: u64,
    pub matching: Vec<(NegativeArm, MatchingMetrics)>,
    pub router_accuracy: f64,
    pub bench: BenchReport,
}

struct Timer {
    rows: Vec<(&'static str, f64)>,
}

impl Timer {
    fn run<T>(&mut self, stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        log::info!("stage {stage}");
        let start = Instant::now();
        let out = f().map_err(|e| e.in_stage(stage))?;
        self.rows.push((stage, start.elapsed().as_secs_f64()));
        Ok(out)
    }
}

/// generate → split → partition → train (graph and random negatives) →
/// train router → build partitioned index → benchmark → schedule, with all
/// artifacts under `out`.
pub fn run_pipeline(cfg: &PipelineConfig, out: impl AsRef<Path>) -> Result<PipelineSummary> {
    let out = out.as_ref();
    create_dir(out)?;
    let mut timer = Timer { rows: Vec::new() };
    write_file(&out.join(MANIFEST), &cfg.manifest())?;

    let corpus = timer.run("gen", || stage_gen(&cfg.synth, cfg.test_fraction, out))?;
    let graph = timer.run("graph", || {
        corpus.train_graph(GraphOptions {
            ignore_weights: cfg.ignore_weights,
        })
    })?;
    let partitioning = timer.run("partition", || stage_partition(&graph, cfg.clusters, cfg.eps, cfg.partition_seed, out))?;
    let setup = timer.run("tokenize", || {
        let s = TrainSetup::new(&corpus, &graph, &partitioning, cfg.vocab.clone())?;
        s.vocab.save(out.join(VOCAB))?;
        Ok(s)
    })?;

    if cfg.arms.is_empty() {
        return Err(Error::InvalidInput("no training arms configured".into()).in_stage("train"));
    }
    // a single cluster has no neighbors to mine negatives from
    let mut arms: Vec<NegativeArm> = cfg
        .arms
        .iter()
        .copied()
        .filter(|&a| cfg.clusters > 1 || a != NegativeArm::Graph)
        .collect();
    if arms.is_empty() {
        arms.push(NegativeArm::Random);
    }
    if arms.len() < cfg.arms.len() {
        log::warn!("r = 1: skipping graph-negative training");
    }
    let mut models = Vec::new();
    let mut matching = Vec::new();
    for &arm in &arms {
        let stage = match arm {
            NegativeArm::Graph => "train-graph",
            NegativeArm::Random => "train-random",
            NegativeArm::None => "train-none",
        };
        let (params, report, metrics) = timer.run(stage, || {
            let (params, report) = setup.train(arm, &cfg.train, &cfg.sampler)?;
            params.save(out.join(model_file(arm)))?;
            let metrics = setup.evaluate(&params, cfg.matching_k)?;
            Ok((params, report, metrics))
        })?;
        matching.push((arm, metrics));
        models.push((arm, params, report));
    }
    timer.run("report-training", || {
        write_train_log(out.join(TRAIN_LOG), &models.iter().map(|(a, _, r)| (*a, r)).collect::<Vec<_>>())?;
        let rows: Vec<_> = models
            .iter()
            .zip(&matching)
            .map(|((a, _, r), (_, m))| (*a, r.steps, *m))
            .collect();
        write_matching(out.join(MATCHING), cfg.matching_k, &rows)
    })?;

    let params = &models[0].1;
    let (docs, queries, train_queries) = timer.run("embed", || {
        let docs = setup.doc_vectors(params)?;
        let queries = setup.test_query_vectors(params, cfg.bench_queries)?;
        let train_queries = setup.train_query_vectors(params)?;
        write_vec1(out.join(DOC_VECS), &docs)?;
        write_vec1(out.join(QUERY_VECS), &queries)?;
        write_vec1(out.join(TRAIN_QUERY_VECS), &train_queries)?;
        Ok((docs, queries, train_queries))
    })?;

    let (router, router_accuracy) = timer.run("train-router", || {
        let examples = router_examples(&graph, &partitioning, &corpus.queries, &train_queries)?;
        let (model, report) = train_router(&examples, cfg.clusters, &cfg.router)?;
        model.save(out.join(ROUTER))?;
        // checkpoint precision is what downstream stages see
        let model = RouterModel::load(out.join(ROUTER))?;
        write_router_stats(out.join(ROUTER_STATS), &model, report.train_accuracy, &examples, &cfg.bench.probes)?;
        Ok((model, report.train_accuracy))
    })?;

    let assignment = timer.run("assign", || {
        let a = assign_corpus(&graph, &partitioning, &corpus.docs, &docs, &router)?;
        write_doc_clusters(out.join(DOC_CLUSTERS), &docs, &a)?;
        Ok(a)
    })?;

    let probes: Vec<usize> = {
        let mut p: Vec<usize> = cfg.bench.probes.iter().map(|&d| d.min(cfg.clusters)).collect();
        p.dedup();
        p
    };
    let bench_cfg = BenchConfig {
        probes,
        ..cfg.bench.clone()
    };
    let mut normalized = docs.clone();
    normalized.normalize_rows()?;
    let exact = timer.run("exact-oracle", || {
        let exact = exact_neighbors(&normalized, &queries, bench_cfg.k)?;
        let oracle = oracle_probe_recall(docs.ids(), &assignment, cfg.clusters, &exact, &bench_cfg.probes)?;
        write_oracle_recall(out.join(ORACLE_RECALL), &oracle)?;
        Ok(exact)
    })?;
    let mut report = BenchReport {
        k: bench_cfg.k,
        queries: queries.len(),
        ..Default::default()
    };
    let mut first_build_times = None;
    for (i, backend) in cfg.backends.iter().enumerate() {
        timer.run("build-index", || {
            let index = build_partitioned(docs.clone(), &assignment, router.clone(), backend, bench_cfg.jobs)?;
            if i == 0 {
                index.save(out.join(INDEX_DIR))?;
                first_build_times = Some(index.build_seconds().to_vec());
            }
            bench_partitioned(&index, &queries, &exact, &bench_cfg, &mut report)?;
            if bench_cfg.global_baseline {
                bench_global(backend, &normalized, &queries, &exact, &bench_cfg, &mut report)?;
            }
            Ok(())
        })?;
    }
    timer.run("report-bench", || {
        report.write_tsv(out.join(BENCH_TSV))?;
        report.write_text(out.join(BENCH_TXT))?;
        report.write_probe_log(out.join(PROBES))
    })?;
    if let Some(times) = first_build_times {
        timer.run("schedule", || {
            let costs: Vec<f64> = times.iter().map(|&t| t.max(1e-9)).collect();
            write_makespans(out.join(SCHEDULE), &simulate_build(&costs, &cfg.bench.machines)?)
        })?;
    }

    let mut t = String::from("stage\tseconds\n");
    for (stage, s) in &timer.rows {
        t.push_str(&format!("{stage}\t{s:.6}\n"));
    }
    write_file(&out.join(TIMINGS), &t)?;

    Ok(PipelineSummary {
        out_dir: out.to_path_buf(),
        edge_cut: edge_cut(&graph, &partitioning)?,
        matching: matching.clone(),
        router_accuracy,
        bench: report,
    })
}
