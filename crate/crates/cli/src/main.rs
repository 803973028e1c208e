use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pnns_core::bench::{run_bench, BenchConfig};
use pnns_core::embed::{TrainConfig, VocabConfig};
use pnns_core::graph::GraphOptions;
use pnns_core::knn::{read_vec1, BackendKind, IvfParams};
use pnns_core::partition::{Partitioning, DEFAULT_EPS};
use pnns_core::pipeline::{self as pl, Corpus, NegativeArm, PipelineConfig, TrainSetup};
use pnns_core::pnns::{build_partitioned, PartitionedIndex, DEFAULT_CUTOFF};
use pnns_core::router::{train_router, RouterConfig, RouterModel};
use pnns_core::sampler::SamplerConfig;
use pnns_core::schedule::{schedule_lpt, simulate_build, write_makespans};
use pnns_core::synth::SynthConfig;
use pnns_core::Error;

#[derive(Parser)]
#[command(name = "pnns", version, about = "Graph-partitioned negatives and partitioned nearest neighbor search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic planted-topic dataset
    Gen(GenArgs),
    /// Partition the training interaction graph
    Partition(PartitionArgs),
    /// Train the two-tower embedding model and embed the corpus
    Train(TrainArgs),
    /// Train the query-to-cluster router
    TrainRouter(RouterArgs),
    /// Assign documents to clusters and build the partitioned index
    BuildIndex(BuildArgs),
    /// Search a built index
    Query(QueryArgs),
    /// Recall / latency sweep against brute force
    Bench(BenchArgs),
    /// LPT makespans for per-cluster build times
    Schedule(ScheduleArgs),
    /// Run every stage end to end
    Pipeline(PipelineArgs),
}

#[derive(Args, Clone)]
struct SynthArgs {
    #[arg(long, default_value_t = 8)]
    topics: usize,
    #[arg(long, default_value_t = 1)]
    groups: usize,
    #[arg(long, default_value_t = 50)]
    queries_per_topic: usize,
    #[arg(long, default_value_t = 50)]
    docs_per_topic: usize,
    #[arg(long, default_value_t = 0.3)]
    p_in: f64,
    #[arg(long, default_value_t = 0.0)]
    p_group: f64,
    #[arg(long, default_value_t = 0.01)]
    p_out: f64,
    #[arg(long, default_value_t = 0.8)]
    topic_token_prob: f64,
    #[arg(long, default_value_t = 0.0)]
    group_token_prob: f64,
    /// Fraction of queries held out for evaluation
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
}

impl SynthArgs {
    fn config(&self, seed: u64) -> SynthConfig {
        SynthConfig {
            topics: self.topics,
            groups: self.groups,
            queries_per_topic: self.queries_per_topic,
            docs_per_topic: self.docs_per_topic,
            p_in: self.p_in,
            p_group: self.p_group,
            p_out: self.p_out,
            topic_token_prob: self.topic_token_prob,
            group_token_prob: self.group_token_prob,
            seed,
            ..Default::default()
        }
    }
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    synth: SynthArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PartitionArgs {
    /// Dataset directory written by `gen`
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 8)]
    clusters: usize,
    #[arg(long, default_value_t = DEFAULT_EPS)]
    eps: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Treat every interaction as weight 1
    #[arg(long)]
    ignore_weights: bool,
    /// Output directory (defaults to the dataset directory)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct NegArgs {
    /// Top-affinity clusters to draw negatives from
    #[arg(long, default_value_t = 2)]
    window: usize,
    /// Negatives per batch
    #[arg(long, default_value_t = 256)]
    neg_budget: usize,
    /// Fraction of negatives drawn uniformly instead
    #[arg(long, default_value_t = 0.0)]
    neg_mix: f64,
}

impl NegArgs {
    fn config(&self, seed: u64) -> SamplerConfig {
        SamplerConfig {
            window: self.window,
            budget: self.neg_budget,
            random_mix: self.neg_mix,
            seed,
            ..Default::default()
        }
    }
}

#[derive(Args, Clone)]
struct ModelArgs {
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
}

impl ModelArgs {
    fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            dim: self.dim,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed,
            ..Default::default()
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// partition.tsv from `partition`
    #[arg(long)]
    partition: PathBuf,
    /// graph | random | none
    #[arg(long, default_value = "graph")]
    negatives: NegativeArm,
    #[command(flatten)]
    neg: NegArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 100)]
    k: usize,
    /// Held-out queries to embed for benchmarking
    #[arg(long, default_value_t = 1000)]
    bench_queries: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RouterArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    partition: PathBuf,
    /// Training-query embeddings (train_queries.vec)
    #[arg(long)]
    vectors: PathBuf,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 0.003)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BuildArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    partition: PathBuf,
    #[arg(long)]
    router: PathBuf,
    /// Document embeddings (docs.vec)
    #[arg(long)]
    docs: PathBuf,
    #[arg(long, default_value = "exact")]
    backend: BackendKind,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Index directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 1)]
    probes: usize,
    #[arg(long, default_value_t = DEFAULT_CUTOFF)]
    cutoff: f64,
    /// Write results here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    docs: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    /// doc_clusters.tsv from `build-index`
    #[arg(long)]
    assignment: PathBuf,
    #[arg(long)]
    router: PathBuf,
    #[arg(long, default_value = "exact", num_args = 1..)]
    backend: Vec<BackendKind>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
    probes: Vec<usize>,
    #[arg(long, default_value_t = DEFAULT_CUTOFF)]
    cutoff: f64,
    #[arg(long, default_value_t = 100)]
    k: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    machines: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Skip the unpartitioned baseline rows
    #[arg(long)]
    no_global: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScheduleArgs {
    /// build_times.tsv from an index directory
    #[arg(long, conflicts_with = "costs", required_unless_present = "costs")]
    times: Option<PathBuf>,
    /// Explicit job costs
    #[arg(long, value_delimiter = ',')]
    costs: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    machines: Vec<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    #[command(flatten)]
    synth: SynthArgs,
    #[arg(long, default_value_t = 8)]
    clusters: usize,
    #[arg(long, default_value_t = DEFAULT_EPS)]
    eps: f64,
    #[command(flatten)]
    neg: NegArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Backends to benchmark; the first is saved under index/
    #[arg(long, num_args = 1.., default_values = ["exact", "ivf:nlist=8,nprobe=2"])]
    backend: Vec<BackendKind>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
    probes: Vec<usize>,
    #[arg(long, default_value_t = DEFAULT_CUTOFF)]
    cutoff: f64,
    #[arg(long, default_value_t = 100)]
    k: usize,
    #[arg(long, default_value_t = 1000)]
    bench_queries: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    machines: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn load_partition(data: &Path, partition: &Path) -> pnns_core::Result<(Corpus, pnns_core::graph::BipartiteGraph, Partitioning)> {
    let corpus = Corpus::load(data)?;
    let graph = corpus.train_graph(GraphOptions::default())?;
    let p = Partitioning::load(partition, &graph)?;
    Ok((corpus, graph, p))
}

fn gen(a: GenArgs) -> pnns_core::Result<()> {
    let c = pl::stage_gen(&a.synth.config(a.seed), a.synth.test_fraction, &a.out)?;
    println!("{} train and {} test interactions written to {}", c.train.len(), c.test.len(), a.out.display());
    Ok(())
}

fn partition(a: PartitionArgs) -> pnns_core::Result<()> {
    let corpus = Corpus::load(&a.data)?;
    let graph = corpus.train_graph(GraphOptions {
        ignore_weights: a.ignore_weights,
    })?;
    let out = a.out.unwrap_or(a.data);
    fs::create_dir_all(&out).map_err(|e| Error::InvalidInput(format!("{}: {e}", out.display())))?;
    let p = pl::stage_partition(&graph, a.clusters, a.eps, a.seed, &out)?;
    println!(
        "edge cut {} over {} edges; cluster sizes {:?}",
        pnns_core::partition::edge_cut(&graph, &p)?,
        graph.num_edges(),
        p.cluster_sizes()
    );
    Ok(())
}

fn train(a: TrainArgs) -> pnns_core::Result<()> {
    let (corpus, graph, p) = load_partition(&a.data, &a.partition)?;
    let setup = TrainSetup::new(&corpus, &graph, &p, VocabConfig::default())?;
    fs::create_dir_all(&a.out).map_err(|e| Error::InvalidInput(format!("{}: {e}", a.out.display())))?;
    setup.vocab.save(a.out.join(pl::VOCAB))?;
    let (params, report) = setup.train(a.negatives, &a.model.config(a.seed), &a.neg.config(a.seed))?;
    params.save(a.out.join(format!("model_{}.emb", a.negatives.name())))?;
    let m = setup.evaluate(&params, a.k)?;
    pl::write_train_log(a.out.join(pl::TRAIN_LOG), &[(a.negatives, &report)])?;
    pl::write_matching(a.out.join(pl::MATCHING), a.k, &[(a.negatives, report.steps, m)])?;
    pnns_core::knn::write_vec1(a.out.join(pl::DOC_VECS), &setup.doc_vectors(&params)?)?;
    pnns_core::knn::write_vec1(a.out.join(pl::QUERY_VECS), &setup.test_query_vectors(&params, a.bench_queries)?)?;
    pnns_core::knn::write_vec1(a.out.join(pl::TRAIN_QUERY_VECS), &setup.train_query_vectors(&params)?)?;
    println!(
        "{} negatives: {} steps, final loss {:.6}, matching MAP@{k} {:.4}, recall@{k} {:.4}",
        a.negatives.name(),
        report.steps,
        report.epoch_losses.last().copied().unwrap_or(f64::NAN),
        m.map,
        m.recall,
        k = a.k
    );
    Ok(())
}

fn train_router_cmd(a: RouterArgs) -> pnns_core::Result<()> {
    let (corpus, graph, p) = load_partition(&a.data, &a.partition)?;
    let vectors = read_vec1(&a.vectors)?;
    let examples = pnns_core::dataset::router_examples(&graph, &p, &corpus.queries, &vectors)?;
    let cfg = RouterConfig {
        hidden: a.hidden,
        epochs: a.epochs,
        lr: a.lr,
        seed: a.seed,
        ..Default::default()
    };
    let (model, report) = train_router(&examples, p.r(), &cfg)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::InvalidInput(format!("{}: {e}", a.out.display())))?;
    model.save(a.out.join(pl::ROUTER))?;
    let model = RouterModel::load(a.out.join(pl::ROUTER))?;
    let ks: Vec<usize> = [1, 2, 4, 8, 16].into_iter().filter(|&k| k <= p.r()).collect();
    pl::write_router_stats(a.out.join(pl::ROUTER_STATS), &model, report.train_accuracy, &examples, &ks)?;
    println!("router train accuracy {:.4}", report.train_accuracy);
    Ok(())
}

fn build(a: BuildArgs) -> pnns_core::Result<()> {
    let (corpus, graph, p) = load_partition(&a.data, &a.partition)?;
    let router = RouterModel::load(&a.router)?;
    let docs = read_vec1(&a.docs)?;
    let assignment = pnns_core::dataset::assign_corpus(&graph, &p, &corpus.docs, &docs, &router)?;
    let index = build_partitioned(docs.clone(), &assignment, router, &a.backend, a.jobs)?;
    index.save(&a.out)?;
    pl::write_doc_clusters(a.out.join(pl::DOC_CLUSTERS), &docs, &assignment)?;
    println!("{} documents in {} clusters: {:?}", index.len(), index.num_clusters(), index.cluster_sizes());
    Ok(())
}

fn query(a: QueryArgs) -> pnns_core::Result<()> {
    let index = PartitionedIndex::load(&a.index)?;
    let queries = read_vec1(&a.queries)?;
    if queries.is_empty() {
        return Err(Error::InvalidInput(format!("{} holds no queries", a.queries.display())));
    }
    let mut s = String::from("query\trank\tdoc\tscore\tprobed\n");
    for (id, q) in queries.rows() {
        let res = index.query(q, a.k, a.probes, a.cutoff)?;
        for (rank, n) in res.neighbors.iter().enumerate() {
            s.push_str(&format!("{id}\t{rank}\t{}\t{:.6}\t{}\n", n.id, n.score, res.probed.len()));
        }
    }
    match a.out {
        Some(path) => fs::write(&path, s).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display()))),
        None => std::io::stdout()
            .write_all(s.as_bytes())
            .map_err(|e| Error::InvalidInput(format!("stdout: {e}"))),
    }
}

fn bench(a: BenchArgs) -> pnns_core::Result<()> {
    let docs = read_vec1(&a.docs)?;
    let queries = read_vec1(&a.queries)?;
    let router = RouterModel::load(&a.router)?;
    let assignment = pl::read_doc_clusters(&a.assignment, &docs)?;
    let cfg = BenchConfig {
        probes: a.probes,
        cutoff: a.cutoff,
        k: a.k,
        machines: a.machines,
        jobs: a.jobs,
        global_baseline: !a.no_global,
        ..Default::default()
    };
    let report = run_bench(&docs, &queries, &assignment, &router, &a.backend, &cfg)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::InvalidInput(format!("{}: {e}", a.out.display())))?;
    report.write_tsv(a.out.join(pl::BENCH_TSV))?;
    report.write_text(a.out.join(pl::BENCH_TXT))?;
    report.write_probe_log(a.out.join(pl::PROBES))?;
    print!("{}", report.to_text());
    Ok(())
}

fn read_build_times(path: &Path) -> pnns_core::Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.rsplit('\t')
                .next()
                .and_then(|v| v.parse::<f64>().ok())
                .map(|t| t.max(1e-9))
                .ok_or_else(|| Error::InvalidInput(format!("{}: bad line {l:?}", path.display())))
        })
        .collect()
}

fn schedule(a: ScheduleArgs) -> pnns_core::Result<()> {
    let costs = match &a.times {
        Some(p) => read_build_times(p)?,
        None => a.costs.clone(),
    };
    let rows = simulate_build(&costs, &a.machines)?;
    if let Some(out) = &a.out {
        write_makespans(out, &rows)?;
    }
    println!("machines\tmakespan\tassignment");
    for &m in &a.machines {
        let s = schedule_lpt(&costs, m)?;
        let asg: Vec<String> = s.assignment.iter().map(usize::to_string).collect();
        println!("{m}\t{:.6}\t{}", s.makespan, asg.join(","));
    }
    Ok(())
}

fn pipeline(a: PipelineArgs) -> pnns_core::Result<()> {
    let mut cfg = PipelineConfig::with_seed(a.seed);
    cfg.synth = a.synth.config(a.seed);
    cfg.test_fraction = a.synth.test_fraction;
    cfg.clusters = a.clusters;
    cfg.eps = a.eps;
    cfg.sampler = a.neg.config(a.seed);
    cfg.train = a.model.config(a.seed);
    cfg.backends = a
        .backend
        .into_iter()
        .map(|b| match b {
            BackendKind::Ivf(p) => BackendKind::Ivf(IvfParams { seed: a.seed, ..p }),
            b => b,
        })
        .collect();
    cfg.bench.probes = a.probes;
    cfg.bench.cutoff = a.cutoff;
    cfg.bench.k = a.k;
    cfg.bench.machines = a.machines;
    cfg.bench.jobs = a.jobs;
    cfg.bench_queries = a.bench_queries;
    let s = pl::run_pipeline(&cfg, &a.out)?;
    println!("edge cut {}; router train accuracy {:.4}", s.edge_cut, s.router_accuracy);
    for (arm, m) in &s.matching {
        println!("{} negatives: matching MAP {:.4}, recall {:.4}", arm.name(), m.map, m.recall);
    }
    print!("{}", s.bench.to_text());
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Invariant(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let res = match cli.command {
        Command::Gen(a) => gen(a),
        Command::Partition(a) => partition(a),
        Command::Train(a) => train(a),
        Command::TrainRouter(a) => train_router_cmd(a),
        Command::BuildIndex(a) => build(a),
        Command::Query(a) => query(a),
        Command::Bench(a) => bench(a),
        Command::Schedule(a) => schedule(a),
        Command::Pipeline(a) => pipeline(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
