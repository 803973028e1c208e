//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. `ACCEPTANCE_ONLY=2,7` runs a subset.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use pnns_core::bench::{run_bench_on_index, BenchConfig, BenchReport};
use pnns_core::dataset::{assign_corpus, split_records, Texts};
use pnns_core::embed::{
    batch_loss_and_grad, encode, squared_hinge_loss, Example, ModelParams, TrainConfig, TrainData, VocabConfig,
};
use pnns_core::graph::{build_graph, cluster_affinity};
use pnns_core::knn::{brute_force_search, ivf_build, BackendKind, IvfParams, VectorSet};
use pnns_core::partition::{edge_cut, partition};
use pnns_core::pipeline::{run_pipeline, Corpus, NegativeArm, PipelineConfig, TrainSetup, TIMING_FILES};
use pnns_core::pnns::build_partitioned;
use pnns_core::router::{router_loss_and_grad, top_k_coverage, train_router, RouterConfig, RouterModel};
use pnns_core::sampler::{top_affinity_clusters, GraphNegatives, NegativeSource, SamplerConfig};
use pnns_core::schedule::{schedule_lpt, simulate_build};
use pnns_core::synth::{generate, SynthConfig};

// 1
const ORACLE_DOCS: usize = 100_000;
const ORACLE_DIM: usize = 32;
const ORACLE_QUERIES: usize = 1000;
const ORACLE_CLUSTERS: usize = 16;
// 2
const PROBE_SWEEP: [usize; 5] = [1, 2, 4, 8, 16];
const MIN_RECALL_AT_16: f64 = 0.95;
const MIN_COVERAGE_AT_16: f64 = 0.99;
// 3
const IVF_TRIALS: usize = 100;
const IVF_DOCS: usize = 10_000;
const IVF_QUERIES_PER_TRIAL: usize = 5;
// 4
const GRAD_TRIALS: usize = 100;
const GRAD_MAX_REL_ERR: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;
/// Denominator floor for relative error, so exact zeros compare absolutely.
const REL_ERR_FLOOR: f64 = 1e-5;
/// Minimum distance from a hinge threshold or ReLU kink for a trial to count.
const KINK_MARGIN: f64 = 1e-3;
// 5
const PARTITION_RUNS: u64 = 100;
const MIN_ZERO_CUT_RUNS: usize = 95;
const MIN_NEAR_PLANTED_RUNS: usize = 90;
const MAX_CUT_RATIO: f64 = 1.5;
// 6
const CHI_DRAWS: usize = 10_000;
const CHI_MIN_P: f64 = 0.001;
// 7
const PAIRED_RUNS: u64 = 5;
const MIN_GRAPH_WINS: usize = 4;
// 8
const MAX_JOBS: usize = 10;
const MAX_COST: u32 = 20;
// 9
const LOSS_TOL: f64 = 1e-12;

type Check = (&'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn random_vectors(n: usize, dim: usize, id0: u64, rng: &mut ChaCha8Rng) -> VectorSet {
    let data = (0..n * dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    VectorSet::new(dim, (id0..id0 + n as u64).collect(), data).unwrap()
}

fn same_results(a: &[pnns_core::knn::Neighbor], b: &[pnns_core::knn::Neighbor]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.id == y.id && x.score.to_bits() == y.score.to_bits())
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let corpus = random_vectors(ORACLE_DOCS, ORACLE_DIM, 0, &mut rng);
    let queries = random_vectors(ORACLE_QUERIES, ORACLE_DIM, 0, &mut rng);
    let assignment: Vec<u32> = (0..ORACLE_DOCS).map(|_| rng.gen_range(0..ORACLE_CLUSTERS as u32)).collect();
    let router = RouterModel::init(ORACLE_DIM, 16, ORACLE_CLUSTERS, 3).unwrap();
    let index = build_partitioned(corpus.clone(), &assignment, router, &BackendKind::Exact, 1).unwrap();
    let mut normalized = corpus;
    normalized.normalize_rows().unwrap();
    let mut mismatches = 0;
    for (_, q) in queries.rows() {
        let got = index.query(q, 100, ORACLE_CLUSTERS, 1.0).unwrap();
        let want = brute_force_search(&normalized, q, 100).unwrap();
        if got.probed.len() != ORACLE_CLUSTERS || !same_results(&got.neighbors, &want) {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0,
        format!("{mismatches}/{ORACLE_QUERIES} queries differ from brute force over {ORACLE_DOCS}×{ORACLE_DIM}"),
    )
}

/// Doc and query vectors around one random center per topic.
fn planted_vectors(topics: &[u32], centers: &[Vec<f32>], noise: f32, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let dim = centers[0].len();
    let scale = noise / (dim as f32).sqrt();
    topics
        .iter()
        .flat_map(|&t| {
            let c = &centers[t as usize];
            (0..dim)
                .map(|j| c[j] + scale * rng.sample::<f32, _>(StandardNormal))
                .collect::<Vec<_>>()
        })
        .collect()
}

fn probe_monotonicity() -> Outcome {
    let (topics, r, dim) = (8usize, 64usize, 32usize);
    let cfg = SynthConfig {
        topics,
        queries_per_topic: 1250,
        docs_per_topic: 10_000,
        p_in: 0.003,
        p_out: 0.000_01,
        seed: 2,
        ..Default::default()
    };
    let data = generate(&cfg).unwrap();
    let graph = build_graph(&data.records).unwrap();
    let p = partition(&graph, r, 0.05, 2).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let centers: Vec<Vec<f32>> = (0..topics)
        .map(|_| (0..dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect())
        .collect();
    let doc_topics: Vec<u32> = data.docs.iter().map(|e| e.topic).collect();
    let docs = VectorSet::new(
        dim,
        (0..data.docs.len() as u64).collect(),
        planted_vectors(&doc_topics, &centers, 1.0, &mut rng),
    )
    .unwrap();
    let query_topic: HashMap<&str, u32> = data.queries.iter().map(|e| (e.id.as_str(), e.topic)).collect();
    let graph_query_topics: Vec<u32> = graph.queries().ids().iter().map(|id| query_topic[id.as_str()]).collect();
    let qvecs = planted_vectors(&graph_query_topics, &centers, 1.0, &mut rng);

    // every tenth graph query is held out for the benchmark
    let mut train_ex = Vec::new();
    let mut bench_ex = Vec::new();
    for (qi, v) in qvecs.chunks(dim).enumerate() {
        let ex = (v.to_vec(), p.cluster_of(qi as u32));
        if qi % 10 == 0 {
            bench_ex.push(ex);
        } else {
            train_ex.push(ex);
        }
    }
    let (router, _) = train_router(
        &train_ex,
        r,
        &RouterConfig {
            seed: 2,
            ..Default::default()
        },
    )
    .unwrap();
    let coverage = top_k_coverage(&router, &bench_ex, 16).unwrap();

    let doc_texts = Texts::from_entities(&data.docs).unwrap();
    let assignment = assign_corpus(&graph, &p, &doc_texts, &docs, &router).unwrap();
    let queries = VectorSet::new(
        dim,
        (0..bench_ex.len() as u64).collect(),
        bench_ex.iter().flat_map(|(v, _)| v.iter().copied()).collect(),
    )
    .unwrap();
    let index = build_partitioned(docs.clone(), &assignment, router, &BackendKind::Exact, 1).unwrap();
    let bench_cfg = BenchConfig {
        probes: PROBE_SWEEP.to_vec(),
        cutoff: 1.0,
        k: 100,
        machines: vec![],
        ..Default::default()
    };
    let report = run_bench_on_index(&index, &docs, &queries, &bench_cfg).unwrap();
    let recalls: Vec<f64> = report.rows.iter().map(|r| r.recall).collect();
    let monotone = recalls.windows(2).all(|w| w[1] >= w[0]);
    let at16 = *recalls.last().unwrap();
    let conditional = coverage < MIN_COVERAGE_AT_16 || at16 >= MIN_RECALL_AT_16;
    outcome(
        monotone && conditional && coverage >= MIN_COVERAGE_AT_16,
        format!(
            "recall@100 over probes {PROBE_SWEEP:?} = {:?}; top-16 label coverage {coverage:.4}; {} docs, r={r}",
            recalls.iter().map(|r| format!("{r:.4}")).collect::<Vec<_>>(),
            docs.len()
        ),
    )
}

fn ivf_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut failures = 0;
    for trial in 0..IVF_TRIALS {
        let mut corpus = random_vectors(IVF_DOCS, 32, 0, &mut rng);
        let nlist = [8, 16, 32, 64][trial % 4];
        let params = IvfParams {
            nlist,
            nprobe: nlist,
            seed: trial as u64,
            ..Default::default()
        };
        let index = ivf_build(corpus.clone(), &params).unwrap();
        corpus.normalize_rows().unwrap();
        for _ in 0..IVF_QUERIES_PER_TRIAL {
            let q: Vec<f32> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let got = index.ivf_search(&q, 100, nlist).unwrap();
            let want = brute_force_search(&corpus, &q, 100).unwrap();
            if !same_results(&got, &want) {
                failures += 1;
            }
        }
    }
    outcome(
        failures == 0,
        format!("{failures} mismatching queries over {IVF_TRIALS} trials of {IVF_DOCS}×32, nprobe = nlist"),
    )
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn embed_gradient_trial(rng: &mut ChaCha8Rng, cfg: &TrainConfig) -> Option<f64> {
    let (vocab, dim) = (12, cfg.dim);
    let tokens = |rng: &mut ChaCha8Rng| -> Vec<u32> { (0..rng.gen_range(1..=4)).map(|_| rng.gen_range(0..vocab as u32)).collect() };
    let data = TrainData {
        vocab_size: vocab,
        query_tokens: (0..5).map(|_| tokens(rng)).collect(),
        doc_tokens: (0..5).map(|_| tokens(rng)).collect(),
        positives: vec![],
    };
    let batch: Vec<Example> = (0..6)
        .map(|_| Example {
            query: rng.gen_range(0..5),
            doc: rng.gen_range(0..5),
            positive: rng.gen_bool(0.5),
        })
        .collect();
    let table: Vec<f64> = (0..vocab * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut params = ModelParams::from_table(vocab, dim, table).unwrap();
    for ex in &batch {
        let u = encode(&data.query_tokens[ex.query as usize], &params).unwrap();
        let v = encode(&data.doc_tokens[ex.doc as usize], &params).unwrap();
        let y: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
        let t = if ex.positive { cfg.t1 } else { cfg.t2 };
        if (y - t).abs() < KINK_MARGIN {
            return None;
        }
    }
    let mut grad = vec![0.0; vocab * dim];
    batch_loss_and_grad(&params, &data, &batch, cfg, &mut grad);
    let mut scratch = vec![0.0; vocab * dim];
    let mut worst: f64 = 0.0;
    for i in 0..vocab * dim {
        let orig = params.table()[i];
        params.table_mut()[i] = orig + FD_STEP;
        let up = batch_loss_and_grad(&params, &data, &batch, cfg, &mut scratch);
        params.table_mut()[i] = orig - FD_STEP;
        let down = batch_loss_and_grad(&params, &data, &batch, cfg, &mut scratch);
        params.table_mut()[i] = orig;
        worst = worst.max(rel_err(grad[i], (up - down) / (2.0 * FD_STEP)));
    }
    Some(worst)
}

/// Pre-activations of both hidden layers, recomputed from the flat layout
/// W1 b1 W2 b2 W3 b3 (row-major weights).
fn router_preactivations(params: &[f64], input: usize, hidden: usize, x: &[f32]) -> Vec<f64> {
    let w1 = &params[..hidden * input];
    let b1 = &params[hidden * input..hidden * input + hidden];
    let off = hidden * input + hidden;
    let w2 = &params[off..off + hidden * hidden];
    let b2 = &params[off + hidden * hidden..off + hidden * hidden + hidden];
    let z1: Vec<f64> = (0..hidden)
        .map(|i| b1[i] + (0..input).map(|j| w1[i * input + j] * x[j] as f64).sum::<f64>())
        .collect();
    let h1: Vec<f64> = z1.iter().map(|&z| z.max(0.0)).collect();
    let z2: Vec<f64> = (0..hidden)
        .map(|i| b2[i] + (0..hidden).map(|j| w2[i * hidden + j] * h1[j]).sum::<f64>())
        .collect();
    z1.into_iter().chain(z2).collect()
}

fn router_gradient_trial(rng: &mut ChaCha8Rng) -> Option<f64> {
    let (input, hidden, r) = (5, 4, 3);
    let n = hidden * input + hidden + hidden * hidden + hidden + r * hidden + r;
    let params: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let batch: Vec<(Vec<f32>, u32)> = (0..6)
        .map(|_| ((0..input).map(|_| rng.gen_range(-1.0f32..1.0)).collect(), rng.gen_range(0..r as u32)))
        .collect();
    for (x, _) in &batch {
        if router_preactivations(&params, input, hidden, x).iter().any(|z| z.abs() < KINK_MARGIN) {
            return None;
        }
    }
    let mut model = RouterModel::from_params(input, hidden, r, params).unwrap();
    let mut grad = vec![0.0; n];
    router_loss_and_grad(&model, &batch, &mut grad).unwrap();
    let mut scratch = vec![0.0; n];
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let orig = model.params()[i];
        model.params_mut()[i] = orig + FD_STEP;
        let up = router_loss_and_grad(&model, &batch, &mut scratch).unwrap();
        model.params_mut()[i] = orig - FD_STEP;
        let down = router_loss_and_grad(&model, &batch, &mut scratch).unwrap();
        model.params_mut()[i] = orig;
        worst = worst.max(rel_err(grad[i], (up - down) / (2.0 * FD_STEP)));
    }
    Some(worst)
}

fn run_trials(rng: &mut ChaCha8Rng, mut trial: impl FnMut(&mut ChaCha8Rng) -> Option<f64>) -> (f64, usize) {
    let (mut worst, mut done, mut skipped) = (0.0f64, 0, 0);
    while done < GRAD_TRIALS {
        match trial(rng) {
            Some(e) => {
                worst = worst.max(e);
                done += 1;
            }
            None => skipped += 1,
        }
    }
    (worst, skipped)
}

fn gradient_checks() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = TrainConfig {
        dim: 6,
        ..Default::default()
    };
    let (embed_worst, embed_skipped) = run_trials(&mut rng, |rng| embed_gradient_trial(rng, &cfg));
    let (router_worst, router_skipped) = run_trials(&mut rng, router_gradient_trial);
    outcome(
        embed_worst < GRAD_MAX_REL_ERR && router_worst < GRAD_MAX_REL_ERR,
        format!(
            "max relative error: embedding {embed_worst:.2e}, router {router_worst:.2e} over {GRAD_TRIALS} trials each \
             ({embed_skipped} / {router_skipped} near-kink instances redrawn)"
        ),
    )
}

fn partitioner_quality() -> Outcome {
    let mut zero_cut = 0;
    let mut near_planted = 0;
    let mut worst_ratio: f64 = 0.0;
    for seed in 0..PARTITION_RUNS {
        for p_out in [0.0, 0.01] {
            let cfg = SynthConfig {
                p_out,
                seed,
                ..Default::default()
            };
            let data = generate(&cfg).unwrap();
            let g = build_graph(&data.records).unwrap();
            let cut = edge_cut(&g, &partition(&g, 8, 0.05, seed).unwrap()).unwrap();
            if p_out == 0.0 {
                zero_cut += usize::from(cut == 0);
            } else {
                let planted = edge_cut(&g, &data.planted_partitioning(&g, 8).unwrap()).unwrap();
                let ratio = cut as f64 / planted as f64;
                worst_ratio = worst_ratio.max(ratio);
                near_planted += usize::from(ratio <= MAX_CUT_RATIO);
            }
        }
    }
    outcome(
        zero_cut >= MIN_ZERO_CUT_RUNS && near_planted >= MIN_NEAR_PLANTED_RUNS,
        format!(
            "p_out=0: zero cut in {zero_cut}/{PARTITION_RUNS}; p_out=0.01: cut ≤ {MAX_CUT_RATIO}× planted in \
             {near_planted}/{PARTITION_RUNS} (worst ratio {worst_ratio:.3})"
        ),
    )
}

fn sampler_distribution() -> Outcome {
    let cfg = SynthConfig {
        seed: 6,
        ..Default::default()
    };
    let data = generate(&cfg).unwrap();
    let g = build_graph(&data.records).unwrap();
    let p = data.planted_partitioning(&g, 8).unwrap();
    let a = cluster_affinity(&g, &p).unwrap();
    let window = 3;
    let scfg = SamplerConfig {
        window,
        budget: 100,
        seed: 6,
        ..Default::default()
    };
    let mut sampler = GraphNegatives::new(&g, &p, &a, scfg.clone()).unwrap();

    // uniformity over cluster 0's window
    let c0: Vec<u32> = (0..g.num_queries() as u32).filter(|&q| p.cluster_of(q) == 0).collect();
    let win = top_affinity_clusters(&a, 0, window);
    let mut counts: BTreeMap<u32, usize> = win.iter().map(|&c| (c, 0)).collect();
    let mut outside = 0;
    let mut drawn = 0;
    let mut positives_hit = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    while drawn < CHI_DRAWS {
        let batch: Vec<u32> = c0.choose_multiple(&mut rng, 100).copied().collect();
        for (q, d) in sampler.negatives(&batch).unwrap() {
            positives_hit += usize::from(g.has_edge(q, d));
            match counts.get_mut(&p.cluster_of(g.doc_vertex(d))) {
                Some(n) => *n += 1,
                None => outside += 1,
            }
            drawn += 1;
        }
    }
    let expected = drawn as f64 / win.len() as f64;
    let stat: f64 = counts.values().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
    let p_value = 1.0 - ChiSquared::new((win.len() - 1) as f64).unwrap().cdf(stat);

    // exact per-query counts for assorted batch sizes and budgets, all clusters
    let mut count_errors = 0;
    for trial in 0..200 {
        let n = rng.gen_range(1..=64);
        let budget = rng.gen_range(1..=300);
        let mut s = GraphNegatives::new(&g, &p, &a, SamplerConfig { budget, seed: trial, ..scfg.clone() }).unwrap();
        let batch: Vec<u32> = (0..n).map(|_| rng.gen_range(0..g.num_queries() as u32)).collect();
        let out = s.negatives(&batch).unwrap();
        let per = budget.div_ceil(n);
        if out.len() != per * n {
            count_errors += 1;
        }
        for (i, chunk) in out.chunks(per).enumerate() {
            if chunk.iter().any(|&(q, _)| q != batch[i]) {
                count_errors += 1;
            }
        }
        positives_hit += out.iter().filter(|&&(q, d)| g.has_edge(q, d)).count();
    }
    outcome(
        p_value > CHI_MIN_P && outside == 0 && count_errors == 0 && positives_hit == 0,
        format!(
            "chi-square {stat:.3} (df {}) p = {p_value:.4} over {drawn} draws, window {win:?}; \
             {outside} outside window; {count_errors} per-query count errors; {positives_hit} positives sampled",
            win.len() - 1
        ),
    )
}

fn training_benefit() -> Outcome {
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 0..PAIRED_RUNS {
        let cfg = SynthConfig {
            topics: 8,
            groups: 2,
            queries_per_topic: 100,
            docs_per_topic: 100,
            p_in: 0.15,
            p_group: 0.015,
            p_out: 0.002,
            topic_token_prob: 0.4,
            group_token_prob: 0.4,
            seed,
            ..Default::default()
        };
        let data = generate(&cfg).unwrap();
        let (train, test) = split_records(&data.records, 0.2, seed).unwrap();
        let corpus = Corpus {
            train,
            test,
            queries: Texts::from_entities(&data.queries).unwrap(),
            docs: Texts::from_entities(&data.docs).unwrap(),
        };
        let g = build_graph(&corpus.train).unwrap();
        let p = partition(&g, 8, 0.05, seed).unwrap();
        let setup = TrainSetup::new(&corpus, &g, &p, VocabConfig::default()).unwrap();
        let tc = TrainConfig {
            epochs: 10,
            seed,
            ..Default::default()
        };
        let sc = SamplerConfig {
            window: 3,
            budget: 256,
            seed,
            ..Default::default()
        };
        let (mg, rg) = setup.train(NegativeArm::Graph, &tc, &sc).unwrap();
        let (mr, rr) = setup.train(NegativeArm::Random, &tc, &sc).unwrap();
        assert_eq!(rg.steps, rr.steps, "arms must compare at a common step count");
        let eg = setup.evaluate(&mg, 100).unwrap();
        let er = setup.evaluate(&mr, 100).unwrap();
        wins += usize::from(eg.recall >= er.recall);
        rows.push(format!("{:.3}/{:.3}", eg.recall, er.recall));
    }
    outcome(
        wins >= MIN_GRAPH_WINS,
        format!(
            "graph ≥ random Matching Recall@100 in {wins}/{PAIRED_RUNS} paired runs (graph/random: {})",
            rows.join(" ")
        ),
    )
}

/// Optimal makespan by branch and bound; `costs` sorted descending.
fn opt_makespan(costs: &[u32], m: usize) -> u32 {
    fn go(i: usize, costs: &[u32], loads: &mut [u32], best: &mut u32) {
        let cur = *loads.iter().max().unwrap();
        if cur >= *best {
            return;
        }
        if i == costs.len() {
            *best = cur;
            return;
        }
        for k in 0..loads.len() {
            if loads[..k].contains(&loads[k]) {
                continue;
            }
            loads[k] += costs[i];
            go(i + 1, costs, loads, best);
            loads[k] -= costs[i];
        }
    }
    let mut best = u32::MAX;
    go(0, costs, &mut vec![0; m], &mut best);
    best
}

struct LptCheck {
    instances: u64,
    exact_opt: u64,
    violations: u64,
}

/// Visits every non-increasing cost sequence of length 1..=MAX_JOBS over 1..=MAX_COST.
fn visit_multisets(prefix: &mut Vec<u32>, max: u32, check: &mut LptCheck) {
    if !prefix.is_empty() {
        let costs: Vec<f64> = prefix.iter().map(|&c| f64::from(c)).collect();
        let sum: u32 = prefix.iter().sum();
        for m in [2usize, 3] {
            check.instances += 1;
            let lpt = schedule_lpt(&costs, m).unwrap().makespan;
            let lower = prefix[0].max(sum.div_ceil(m as u32));
            if 3.0 * lpt <= 4.0 * f64::from(lower) {
                continue;
            }
            check.exact_opt += 1;
            if 3.0 * lpt > 4.0 * f64::from(opt_makespan(prefix, m)) {
                check.violations += 1;
            }
        }
    }
    if prefix.len() == MAX_JOBS {
        return;
    }
    for c in (1..=max).rev() {
        prefix.push(c);
        visit_multisets(prefix, c, check);
        prefix.pop();
    }
}

fn scheduler_bound() -> Outcome {
    let mut check = LptCheck {
        instances: 0,
        exact_opt: 0,
        violations: 0,
    };
    visit_multisets(&mut Vec::new(), MAX_COST, &mut check);

    let pinned = schedule_lpt(&[5.0, 4.0, 3.0, 3.0, 3.0], 2).unwrap().makespan == 10.0
        && opt_makespan(&[5, 4, 3, 3, 3], 2) == 9;

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut non_monotone = 0;
    let machines: Vec<usize> = (1..=16).collect();
    for _ in 0..1000 {
        let costs: Vec<f64> = (0..rng.gen_range(1..40)).map(|_| rng.gen_range(0.01..100.0)).collect();
        let rows = simulate_build(&costs, &machines).unwrap();
        non_monotone += usize::from(rows.windows(2).any(|w| w[1].1 > w[0].1));
    }
    outcome(
        check.violations == 0 && pinned && non_monotone == 0,
        format!(
            "{} instances (m ∈ {{2,3}}, ≤{MAX_JOBS} jobs, costs ≤{MAX_COST}), {} needed exact OPT, {} above 4/3·OPT; \
             [5,4,3,3,3]/m=2 pinned {}; {non_monotone} non-monotone makespan curves",
            check.instances,
            check.exact_opt,
            check.violations,
            if pinned { "ok" } else { "WRONG" }
        ),
    )
}

fn loss_values() -> Outcome {
    let cases = [(0.5, true, 0.16), (0.5, false, 0.09), (0.95, true, 0.0)];
    let got: Vec<f64> = cases.iter().map(|&(y, pos, _)| squared_hinge_loss(y, pos, 0.9, 0.2)).collect();
    let pass = cases.iter().zip(&got).all(|(c, g)| (c.2 - g).abs() <= LOSS_TOL);
    outcome(pass, format!("L(0.5,1), L(0.5,0), L(0.95,1) = {got:?} with t1=0.9, t2=0.2"))
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn mask_columns(tsv: &str, masked: &[&str]) -> String {
    let header: Vec<&str> = tsv.lines().next().unwrap_or("").split('\t').collect();
    let drop: Vec<bool> = header.iter().map(|h| masked.contains(h)).collect();
    tsv.lines()
        .map(|l| {
            l.split('\t')
                .enumerate()
                .map(|(i, c)| if drop.get(i).copied().unwrap_or(false) { "*" } else { c })
                .collect::<Vec<_>>()
                .join("\t")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn determinism() -> Outcome {
    let cfg = PipelineConfig::with_seed(10);
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_pipeline(&cfg, &a).unwrap();
    run_pipeline(&cfg, &b).unwrap();
    let (fa, fb) = (files_under(&a), files_under(&b));
    if fa != fb {
        return outcome(false, "runs produced different file sets");
    }
    let mut differing = Vec::new();
    let mut compared = 0;
    for f in &fa {
        let name = f.to_str().unwrap();
        if TIMING_FILES.contains(&name) {
            continue;
        }
        let (x, y) = (std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
        let same = if name == pnns_core::pipeline::BENCH_TSV {
            let cols = BenchReport::TIMING_COLUMNS;
            mask_columns(&String::from_utf8_lossy(&x), &cols) == mask_columns(&String::from_utf8_lossy(&y), &cols)
        } else {
            x == y
        };
        compared += 1;
        if !same {
            differing.push(name.to_string());
        }
    }
    outcome(
        differing.is_empty(),
        format!(
            "{compared} artifacts compared byte for byte ({} timing files and bench timing columns masked); differing: {differing:?}",
            TIMING_FILES.len()
        ),
    )
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let checks: [Check; 10] = [
        ("oracle equivalence", oracle_equivalence),
        ("probe monotonicity", probe_monotonicity),
        ("IVF correctness", ivf_correctness),
        ("gradient checks", gradient_checks),
        ("partitioner quality", partitioner_quality),
        ("negative sampler distribution", sampler_distribution),
        ("training benefit direction", training_benefit),
        ("scheduler bound", scheduler_bound),
        ("loss values", loss_values),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let n = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let o = check();
        println!(
            "{} {n:>2} {name}: {} ({:.1}s)",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
        failed += usize::from(!o.pass);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
