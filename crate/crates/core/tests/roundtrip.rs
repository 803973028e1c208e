use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pnns_core::embed::{ModelParams, TokenVocab};
use pnns_core::graph::GraphOptions;
use pnns_core::knn::{brute_force_search, read_vec1, BackendKind, IvfParams, VectorSet};
use pnns_core::partition::Partitioning;
use pnns_core::pipeline::{self as pl, run_pipeline, Corpus, PipelineConfig};
use pnns_core::pnns::{build_partitioned, PartitionedIndex};
use pnns_core::router::RouterModel;

fn small_config(seed: u64) -> PipelineConfig {
    let mut cfg = PipelineConfig::with_seed(seed);
    cfg.synth.queries_per_topic = 30;
    cfg.synth.docs_per_topic = 30;
    cfg.train.epochs = 2;
    cfg.router.epochs = 4;
    cfg.bench.k = 20;
    cfg
}

#[test]
fn pipeline_artifacts_reload() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let cfg = small_config(21);
    run_pipeline(&cfg, out).unwrap();

    let corpus = Corpus::load(out).unwrap();
    let graph = corpus.train_graph(GraphOptions::default()).unwrap();
    let p = Partitioning::load(out.join(pl::PARTITION), &graph).unwrap();
    assert_eq!(p.r(), cfg.clusters);
    assert_eq!(p.seed(), cfg.partition_seed);

    let vocab = TokenVocab::load(out.join(pl::VOCAB)).unwrap();
    let model = ModelParams::load(out.join("model_graph.emb")).unwrap();
    assert_eq!(model.vocab_size(), vocab.size());
    assert_eq!(model.dim(), cfg.train.dim);

    // the saved index answers exactly like one rebuilt from the saved inputs
    let docs = read_vec1(out.join(pl::DOC_VECS)).unwrap();
    let queries = read_vec1(out.join(pl::QUERY_VECS)).unwrap();
    let assignment = pl::read_doc_clusters(out.join(pl::DOC_CLUSTERS), &docs).unwrap();
    let router = RouterModel::load(out.join(pl::ROUTER)).unwrap();
    let saved = PartitionedIndex::load(out.join(pl::INDEX_DIR)).unwrap();
    let rebuilt = build_partitioned(docs, &assignment, router, &cfg.backends[0], 1).unwrap();
    assert_eq!(saved.cluster_sizes(), rebuilt.cluster_sizes());
    for (_, q) in queries.rows() {
        for d in [1, 3, cfg.clusters] {
            let a = saved.query(q, 10, d, 0.99).unwrap();
            let b = rebuilt.query(q, 10, d, 0.99).unwrap();
            assert_eq!(a, b);
        }
    }
}

#[test]
fn ivf_partitioned_index_roundtrips() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 600;
    let data = (0..n * 8).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let corpus = VectorSet::new(8, (100..100 + n as u64).collect(), data).unwrap();
    let assignment: Vec<u32> = (0..n).map(|_| rng.gen_range(0..5)).collect();
    let router = RouterModel::init(8, 16, 5, 1).unwrap();
    let backend = BackendKind::Ivf(IvfParams {
        nlist: 6,
        nprobe: 2,
        seed: 3,
        ..Default::default()
    });
    let index = build_partitioned(corpus, &assignment, router, &backend, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    index.save(dir.path()).unwrap();
    let back = PartitionedIndex::load(dir.path()).unwrap();
    for _ in 0..20 {
        let q: Vec<f32> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        assert_eq!(index.query(&q, 15, 3, 0.9).unwrap(), back.query(&q, 15, 3, 0.9).unwrap());
    }
}

fn corpus_strategy() -> impl Strategy<Value = (VectorSet, Vec<u32>, usize, Vec<f32>, u64)> {
    (1usize..6, 1usize..80, 1usize..5).prop_flat_map(|(r, n, dim)| {
        (
            prop::collection::vec(-1.0f32..1.0, n * dim),
            prop::collection::vec(0..r as u32, n),
            prop::collection::vec(-1.0f32..1.0, dim),
            any::<u64>(),
        )
            .prop_map(move |(data, asg, q, seed)| {
                let set = VectorSet::new(dim, (0..n as u64).collect(), data).unwrap();
                (set, asg, r, q, seed)
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exhaustive_probing_is_brute_force((corpus, asg, r, q, seed) in corpus_strategy(), k in 1usize..30) {
        prop_assume!(q.iter().any(|&x| x != 0.0));
        prop_assume!(corpus.data().chunks(corpus.dim()).all(|v| v.iter().any(|&x| x != 0.0)));
        let router = RouterModel::init(corpus.dim(), 4, r, seed).unwrap();
        let mut normalized = corpus.clone();
        normalized.normalize_rows().unwrap();
        let index = build_partitioned(corpus, &asg, router, &BackendKind::Exact, 1).unwrap();
        let got = index.query(&q, k, r, 1.0).unwrap();
        prop_assert_eq!(got.probed.len(), r);
        prop_assert_eq!(got.neighbors, brute_force_search(&normalized, &q, k).unwrap());
    }

    #[test]
    fn probe_sets_are_nested((corpus, asg, r, q, seed) in corpus_strategy()) {
        prop_assume!(q.iter().any(|&x| x != 0.0));
        prop_assume!(corpus.data().chunks(corpus.dim()).all(|v| v.iter().any(|&x| x != 0.0)));
        let router = RouterModel::init(corpus.dim(), 4, r, seed).unwrap();
        let index = build_partitioned(corpus, &asg, router, &BackendKind::Exact, 1).unwrap();
        let mut prev: Vec<u32> = Vec::new();
        for d in 1..=r {
            let probed = index.query(&q, 5, d, 1.0).unwrap().probed;
            prop_assert_eq!(&probed[..prev.len()], &prev[..]);
            prev = probed;
        }
    }
}
