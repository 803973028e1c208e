//! Planted-topic generator for dyadic data.
//!
//! Queries and documents are split evenly into topics. Same-topic pairs
//! interact with probability `p_in` and cross-topic pairs with `p_out`, so
//! the co-occurrence matrix is block diagonal once sorted by topic. Text is
//! drawn mostly from a per-topic token pool with some shared noise tokens,
//! which makes the topics learnable from tokens alone.
//!
//! Optionally, topics are arranged in equal groups of siblings. Siblings
//! share a group token pool and interact with each other at `p_group`, so
//! they are both harder to tell apart from text and more strongly
//! connected in the graph than unrelated topics.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{BipartiteGraph, InteractionRecord};
use crate::partition::Partitioning;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub topics: usize,
    pub queries_per_topic: usize,
    pub docs_per_topic: usize,
    pub p_in: f64,
    pub p_out: f64,
    /// Size of each topic's token pool.
    pub topic_tokens: usize,
    /// Size of the noise pool shared by every topic.
    pub noise_tokens: usize,
    pub query_len: usize,
    pub doc_len: usize,
    /// Probability that a token comes from the topic pool rather than noise.
    pub topic_token_prob: f64,
    /// Number of sibling groups; 1 disables grouping.
    pub groups: usize,
    /// Size of each group's shared token pool.
    pub group_tokens: usize,
    /// Probability that a token comes from the group pool.
    pub group_token_prob: f64,
    /// Interaction probability between sibling topics.
    pub p_group: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            topics: 8,
            queries_per_topic: 50,
            docs_per_topic: 50,
            p_in: 0.3,
            p_out: 0.01,
            topic_tokens: 20,
            noise_tokens: 50,
            query_len: 3,
            doc_len: 8,
            topic_token_prob: 0.8,
            groups: 1,
            group_tokens: 20,
            group_token_prob: 0.0,
            p_group: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(format!("synth config: {m}")));
        if self.topics == 0 {
            return bad("topic count must be ≥ 1");
        }
        if !(0.0 <= self.p_out && self.p_out < self.p_in && self.p_in <= 1.0) {
            return bad("need 0 ≤ p_out < p_in ≤ 1");
        }
        if self.queries_per_topic == 0 || self.docs_per_topic == 0 {
            return bad("every topic needs at least one query and one document");
        }
        if self.topic_tokens == 0 || self.query_len == 0 || self.doc_len == 0 {
            return bad("token pools and lengths must be nonzero");
        }
        if !(0.0..=1.0).contains(&self.topic_token_prob) || (self.noise_tokens == 0 && self.topic_token_prob < 1.0) {
            return bad("topic_token_prob must be in [0, 1], and < 1 needs a noise pool");
        }
        if self.groups == 0 || !self.topics.is_multiple_of(self.groups) {
            return bad("groups must be ≥ 1 and divide the topic count");
        }
        if self.groups > 1 {
            if !(0.0 <= self.p_group && self.p_group <= 1.0) {
                return bad("p_group must be in [0, 1]");
            }
            let rest = 1.0 - self.topic_token_prob;
            if !(0.0..=rest).contains(&self.group_token_prob) || (self.group_token_prob > 0.0 && self.group_tokens == 0) {
                return bad("group_token_prob must be in [0, 1 − topic_token_prob] with a nonempty group pool");
            }
            if self.noise_tokens == 0 && self.topic_token_prob + self.group_token_prob < 1.0 {
                return bad("token probabilities below 1 need a noise pool");
            }
        }
        Ok(())
    }

    pub fn group_of(&self, topic: usize) -> usize {
        topic / (self.topics / self.groups)
    }

    fn grouped(&self) -> bool {
        self.groups > 1
    }
}

/// A generated query or document.
#[derive(Clone, Debug, PartialEq)]
pub struct Entity {
    pub id: String,
    pub topic: u32,
    pub tokens: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    pub records: Vec<InteractionRecord>,
    pub queries: Vec<Entity>,
    pub docs: Vec<Entity>,
}

/// Indices `i < len` selected independently with probability `p`, via geometric skips.
fn bernoulli_indices(len: usize, p: f64, rng: &mut ChaCha8Rng, mut emit: impl FnMut(usize)) {
    if p <= 0.0 || len == 0 {
        return;
    }
    if p >= 1.0 {
        (0..len).for_each(emit);
        return;
    }
    let log_q = (1.0 - p).ln();
    let mut i = 0usize;
    loop {
        let u: f64 = rng.gen();
        let skip = ((1.0 - u).ln() / log_q).floor();
        if !skip.is_finite() || skip >= (len - i) as f64 {
            return;
        }
        i += skip as usize;
        emit(i);
        i += 1;
        if i >= len {
            return;
        }
    }
}

/// Geometric(½) on {1, 2, …}.
fn event_count(rng: &mut ChaCha8Rng) -> u32 {
    let mut w = 1;
    while w < 64 && rng.gen_bool(0.5) {
        w += 1;
    }
    w
}

fn draw_tokens(cfg: &SynthConfig, topic: usize, len: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    (0..len)
        .map(|_| {
            if cfg.grouped() && cfg.group_token_prob > 0.0 {
                let u: f64 = rng.gen();
                if u < cfg.topic_token_prob {
                    format!("t{topic}_{}", rng.gen_range(0..cfg.topic_tokens))
                } else if u < cfg.topic_token_prob + cfg.group_token_prob {
                    format!("g{}_{}", cfg.group_of(topic), rng.gen_range(0..cfg.group_tokens))
                } else {
                    format!("n{}", rng.gen_range(0..cfg.noise_tokens))
                }
            } else if cfg.noise_tokens == 0 || rng.gen_bool(cfg.topic_token_prob) {
                format!("t{topic}_{}", rng.gen_range(0..cfg.topic_tokens))
            } else {
                format!("n{}", rng.gen_range(0..cfg.noise_tokens))
            }
        })
        .collect()
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let b = cfg.topics;
    let (qpt, dpt) = (cfg.queries_per_topic, cfg.docs_per_topic);

    let queries: Vec<Entity> = (0..b * qpt)
        .map(|i| Entity {
            id: format!("q{i}"),
            topic: (i / qpt) as u32,
            tokens: draw_tokens(cfg, i / qpt, cfg.query_len, &mut rng),
        })
        .collect();
    let docs: Vec<Entity> = (0..b * dpt)
        .map(|i| Entity {
            id: format!("d{i}"),
            topic: (i / dpt) as u32,
            tokens: draw_tokens(cfg, i / dpt, cfg.doc_len, &mut rng),
        })
        .collect();

    let mut records = Vec::new();
    for (qi, q) in queries.iter().enumerate() {
        let t = q.topic as usize;
        let mut hits: Vec<usize> = Vec::new();
        bernoulli_indices(dpt, cfg.p_in, &mut rng, |i| hits.push(t * dpt + i));
        if cfg.grouped() {
            for u in (0..b).filter(|&u| u != t) {
                let p = if cfg.group_of(u) == cfg.group_of(t) { cfg.p_group } else { cfg.p_out };
                bernoulli_indices(dpt, p, &mut rng, |i| hits.push(u * dpt + i));
            }
        } else {
            // other topics' documents laid end to end, skipping block t
            bernoulli_indices((b - 1) * dpt, cfg.p_out, &mut rng, |i| {
                hits.push(if i < t * dpt { i } else { i + dpt })
            });
        }
        hits.sort_unstable();
        for d in hits {
            let w = event_count(&mut rng);
            records.push(InteractionRecord::new(queries[qi].id.clone(), docs[d].id.clone(), w));
        }
    }
    if records.is_empty() {
        return Err(Error::InvalidInput("synth config produced no interactions".into()));
    }
    Ok(SynthData { records, queries, docs })
}

impl SynthData {
    /// The planted topics as an r = topics partitioning of `graph`.
    pub fn planted_partitioning(&self, graph: &BipartiteGraph, topics: usize) -> Result<Partitioning> {
        let mut assignment = Vec::with_capacity(graph.num_vertices());
        let qtopic: std::collections::HashMap<&str, u32> =
            self.queries.iter().map(|e| (e.id.as_str(), e.topic)).collect();
        let dtopic: std::collections::HashMap<&str, u32> =
            self.docs.iter().map(|e| (e.id.as_str(), e.topic)).collect();
        for id in graph.queries().ids() {
            assignment.push(*qtopic.get(id.as_str()).ok_or_else(|| unknown(id))?);
        }
        for id in graph.docs().ids() {
            assignment.push(*dtopic.get(id.as_str()).ok_or_else(|| unknown(id))?);
        }
        Partitioning::new(assignment, topics, 0.0)
    }

    /// Writes `labels.tsv` (entity id, planted topic), queries then documents.
    pub fn write_labels(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |e| Error::io(path, e);
        let mut out = BufWriter::new(File::create(path).map_err(io)?);
        for e in self.queries.iter().chain(&self.docs) {
            writeln!(out, "{}\t{}", e.id, e.topic).map_err(io)?;
        }
        out.flush().map_err(io)
    }
}

fn unknown(id: &str) -> Error {
    Error::InvalidInput(format!("entity {id:?} not present in the generated data"))
}

/// Writes `id<TAB>space-separated tokens` lines.
pub fn write_texts(path: impl AsRef<Path>, entities: &[Entity]) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    for e in entities {
        writeln!(out, "{}\t{}", e.id, e.tokens.join(" ")).map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Reads `id<TAB>text` lines into (id, whitespace tokens).
pub fn read_texts(path: impl AsRef<Path>) -> Result<Vec<(String, Vec<String>)>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let (id, text) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(path, i + 1, "expected id<TAB>text"))?;
        out.push((id.to_owned(), text.split_whitespace().map(str::to_owned).collect()));
    }
    Ok(out)
}
