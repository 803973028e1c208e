//! Shared-table two-tower embedding model.
//!
//! Queries and documents are encoded by the same function: average the
//! embedding rows of their tokens, then L2-normalize. Similarity is the dot
//! product of two encodings, so ŷ ∈ [−1, 1]. Training minimizes the squared
//! hinge loss with separate positive (t1) and negative (t2) thresholds
//! using Adam.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::sampler::NegativeSource;

/// 64-bit FNV-1a; stable across platforms and releases.
pub fn fnv1a64(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VocabConfig {
    pub unigram_capacity: usize,
    pub oov_bins: usize,
    /// Hashed word-bigram bins; 0 disables bigram features.
    pub bigram_bins: usize,
    /// Hashed character-trigram bins; 0 disables trigram features.
    pub trigram_bins: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self {
            unigram_capacity: 2000,
            oov_bins: 500,
            bigram_bins: 0,
            trigram_bins: 0,
        }
    }
}

/// Token → row mapping. The most frequent unigrams get dedicated rows; every
/// other token hashes into the OOV bins, so lookup never fails.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenVocab {
    cfg: VocabConfig,
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl TokenVocab {
    pub fn fit<'a>(texts: impl IntoIterator<Item = &'a [String]>, cfg: VocabConfig) -> Result<Self> {
        if cfg.oov_bins == 0 {
            return Err(Error::InvalidInput("vocabulary needs at least one OOV bin".into()));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for text in texts {
            for t in text {
                *counts.entry(t.as_str()).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let words: Vec<String> = ranked
            .into_iter()
            .take(cfg.unigram_capacity)
            .map(|(w, _)| w.to_owned())
            .collect();
        Ok(Self::from_words(words, cfg))
    }

    fn from_words(words: Vec<String>, cfg: VocabConfig) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        Self { cfg, words, index }
    }

    pub fn config(&self) -> &VocabConfig {
        &self.cfg
    }

    /// Rows in the embedding table.
    pub fn size(&self) -> usize {
        self.cfg.unigram_capacity + self.cfg.oov_bins + self.cfg.bigram_bins + self.cfg.trigram_bins
    }

    pub fn index(&self, token: &str) -> u32 {
        match self.index.get(token) {
            Some(&i) => i,
            None => (self.cfg.unigram_capacity as u64 + fnv1a64(token) % self.cfg.oov_bins as u64) as u32,
        }
    }

    /// Row indices for a whitespace-tokenized text, plus hashed bigram and
    /// character-trigram features when enabled.
    pub fn tokenize(&self, words: &[String]) -> Vec<u32> {
        let mut out: Vec<u32> = words.iter().map(|w| self.index(w)).collect();
        let base = (self.cfg.unigram_capacity + self.cfg.oov_bins) as u64;
        if self.cfg.bigram_bins > 0 {
            for pair in words.windows(2) {
                let h = fnv1a64(&format!("{} {}", pair[0], pair[1]));
                out.push((base + h % self.cfg.bigram_bins as u64) as u32);
            }
        }
        if self.cfg.trigram_bins > 0 {
            let base = base + self.cfg.bigram_bins as u64;
            for w in words {
                let chars: Vec<char> = format!("#{w}#").chars().collect();
                for tri in chars.windows(3) {
                    let h = fnv1a64(&tri.iter().collect::<String>());
                    out.push((base + h % self.cfg.trigram_bins as u64) as u32);
                }
            }
        }
        out
    }

    /// Header `#unigrams=<n> oov=<n> bigrams=<n> trigrams=<n>`, then one
    /// dedicated unigram per line in row order.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |e| Error::io(path, e);
        let mut out = BufWriter::new(File::create(path).map_err(io)?);
        let c = &self.cfg;
        writeln!(
            out,
            "#unigrams={} oov={} bigrams={} trigrams={}",
            c.unigram_capacity, c.oov_bins, c.bigram_bins, c.trigram_bins
        )
        .map_err(io)?;
        for w in &self.words {
            writeln!(out, "{w}").map_err(io)?;
        }
        out.flush().map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let header = lines
            .next()
            .transpose()
            .map_err(|e| Error::io(path, e))?
            .ok_or_else(|| Error::parse(path, 1, "missing header"))?;
        let mut cfg = VocabConfig::default();
        for kv in header.trim_start_matches('#').split_whitespace() {
            let (k, v) = kv.split_once('=').ok_or_else(|| Error::parse(path, 1, "bad header"))?;
            let v: usize = v.parse().map_err(|_| Error::parse(path, 1, "bad header value"))?;
            match k {
                "unigrams" => cfg.unigram_capacity = v,
                "oov" => cfg.oov_bins = v,
                "bigrams" => cfg.bigram_bins = v,
                "trigrams" => cfg.trigram_bins = v,
                _ => return Err(Error::parse(path, 1, format!("unknown key {k}"))),
            }
        }
        let words = lines.collect::<std::io::Result<Vec<_>>>().map_err(|e| Error::io(path, e))?;
        if words.len() > cfg.unigram_capacity || cfg.oov_bins == 0 {
            return Err(Error::parse(path, 1, "vocabulary exceeds its declared capacity"));
        }
        Ok(Self::from_words(words, cfg))
    }
}

/// The shared embedding table, `vocab_size × dim`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    vocab_size: usize,
    dim: usize,
    table: Vec<f64>,
}

impl ModelParams {
    pub fn from_table(vocab_size: usize, dim: usize, table: Vec<f64>) -> Result<Self> {
        if vocab_size == 0 || dim == 0 || table.len() != vocab_size * dim {
            return Err(Error::InvalidInput("embedding table shape mismatch".into()));
        }
        if table.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput("embedding table has non-finite entries".into()));
        }
        Ok(Self { vocab_size, dim, table })
    }

    /// Xavier-uniform initialization: U(−a, a) with a = √(6 / (vocab + dim)).
    pub fn xavier(vocab_size: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = (6.0 / (vocab_size + dim) as f64).sqrt();
        let table = (0..vocab_size * dim).map(|_| rng.gen_range(-a..a)).collect();
        Self { vocab_size, dim, table }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn table(&self) -> &[f64] {
        &self.table
    }

    pub fn table_mut(&mut self) -> &mut [f64] {
        &mut self.table
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.table[i * self.dim..(i + 1) * self.dim]
    }

    /// `EMB1` checkpoint: magic, u32 vocab size, u32 dim, then the table as
    /// little-endian f32, row-major.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |e| Error::io(path, e);
        let mut out = BufWriter::new(File::create(path).map_err(io)?);
        out.write_all(b"EMB1").map_err(io)?;
        out.write_all(&(self.vocab_size as u32).to_le_bytes()).map_err(io)?;
        out.write_all(&(self.dim as u32).to_le_bytes()).map_err(io)?;
        for &x in &self.table {
            out.write_all(&(x as f32).to_le_bytes()).map_err(io)?;
        }
        out.flush().map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
        if bytes.len() < 12 || &bytes[..4] != b"EMB1" {
            return Err(bad("missing EMB1 header"));
        }
        let vocab_size = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if bytes.len() != 12 + 4 * vocab_size * dim {
            return Err(bad("table size does not match header"));
        }
        let table = bytes[12..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        Self::from_table(vocab_size, dim, table)
    }
}

/// Mean of the token rows, before normalization.
fn mean_row(tokens: &[u32], params: &ModelParams) -> Vec<f64> {
    let mut u = vec![0.0; params.dim];
    for &t in tokens {
        for (a, &x) in u.iter_mut().zip(params.row(t as usize)) {
            *a += x;
        }
    }
    let inv = 1.0 / tokens.len() as f64;
    u.iter_mut().for_each(|a| *a *= inv);
    u
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn check_tokens(tokens: &[u32], params: &ModelParams) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::InvalidInput("cannot encode an empty token list".into()));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= params.vocab_size) {
        return Err(Error::InvalidInput(format!(
            "token {t} outside vocabulary of {}",
            params.vocab_size
        )));
    }
    Ok(())
}

/// Average of the token rows, L2-normalized.
pub fn encode(tokens: &[u32], params: &ModelParams) -> Result<Vec<f64>> {
    check_tokens(tokens, params)?;
    let mut u = mean_row(tokens, params);
    let n = norm(&u);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::InvalidInput("token rows average to the zero vector".into()));
    }
    u.iter_mut().for_each(|x| *x /= n);
    Ok(u)
}

/// `y·min(0, ŷ−t1)² + (1−y)·max(0, ŷ−t2)²`.
pub fn squared_hinge_loss(y_hat: f64, positive: bool, t1: f64, t2: f64) -> f64 {
    if positive {
        (y_hat - t1).min(0.0).powi(2)
    } else {
        (y_hat - t2).max(0.0).powi(2)
    }
}

/// dL/dŷ of [`squared_hinge_loss`]; zero at the kinks.
pub fn loss_grad(y_hat: f64, positive: bool, t1: f64, t2: f64) -> f64 {
    match positive {
        true if y_hat < t1 => 2.0 * (y_hat - t1),
        false if y_hat > t2 => 2.0 * (y_hat - t2),
        _ => 0.0,
    }
}

/// Adam state for a flat parameter vector.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub dim: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Positive threshold.
    pub t1: f64,
    /// Negative threshold.
    pub t2: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            batch_size: 256,
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            t1: 0.9,
            t2: 0.2,
            epochs: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.t2 && self.t2 < self.t1 && self.t1 <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "thresholds must satisfy 0 ≤ t2 < t1 ≤ 1, got t1={} t2={}",
                self.t1, self.t2
            )));
        }
        if self.dim == 0 || self.batch_size == 0 {
            return Err(Error::InvalidInput("dimension and batch size must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Tokenized entities plus the positive (query, doc) pairs to train on.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub vocab_size: usize,
    pub query_tokens: Vec<Vec<u32>>,
    pub doc_tokens: Vec<Vec<u32>>,
    pub positives: Vec<(u32, u32)>,
}

/// One labeled pair in a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Example {
    pub query: u32,
    pub doc: u32,
    pub positive: bool,
}

/// Forward state of one tower: unnormalized mean `u`, its norm, and the unit output.
struct Tower {
    norm: f64,
    unit: Vec<f64>,
}

fn tower(tokens: &[u32], params: &ModelParams) -> Tower {
    let u = mean_row(tokens, params);
    let n = norm(&u);
    Tower {
        unit: u.iter().map(|x| x / n).collect(),
        norm: n,
    }
}

/// Backpropagates dL/d(unit output) through normalization and averaging into `grad`.
fn backprop_tower(t: &Tower, upstream: &[f64], tokens: &[u32], scale: f64, dim: usize, grad: &mut [f64]) {
    let proj: f64 = upstream.iter().zip(&t.unit).map(|(a, b)| a * b).sum();
    let per_token = scale / (t.norm * tokens.len() as f64);
    for &tok in tokens {
        let row = &mut grad[tok as usize * dim..(tok as usize + 1) * dim];
        for j in 0..dim {
            row[j] += per_token * (upstream[j] - proj * t.unit[j]);
        }
    }
}

/// Mean loss over `batch` and its gradient with respect to the whole table.
pub fn batch_loss_and_grad(
    params: &ModelParams,
    data: &TrainData,
    batch: &[Example],
    cfg: &TrainConfig,
    grad: &mut [f64],
) -> f64 {
    grad.iter_mut().for_each(|g| *g = 0.0);
    if batch.is_empty() {
        return 0.0;
    }
    let scale = 1.0 / batch.len() as f64;
    let dim = params.dim;
    let mut total = 0.0;
    for ex in batch {
        let qt = &data.query_tokens[ex.query as usize];
        let dt = &data.doc_tokens[ex.doc as usize];
        let q = tower(qt, params);
        let d = tower(dt, params);
        let y_hat: f64 = q.unit.iter().zip(&d.unit).map(|(a, b)| a * b).sum();
        total += squared_hinge_loss(y_hat, ex.positive, cfg.t1, cfg.t2);
        let g = loss_grad(y_hat, ex.positive, cfg.t1, cfg.t2);
        if g == 0.0 {
            continue;
        }
        let up_q: Vec<f64> = d.unit.iter().map(|x| g * x).collect();
        let up_d: Vec<f64> = q.unit.iter().map(|x| g * x).collect();
        backprop_tower(&q, &up_q, qt, scale, dim, grad);
        backprop_tower(&d, &up_d, dt, scale, dim, grad);
    }
    total * scale
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    pub wall_seconds: f64,
}

fn validate_data(data: &TrainData) -> Result<()> {
    if data.positives.is_empty() {
        return Err(Error::InvalidInput("training set has no positive pairs".into()));
    }
    for &(q, d) in &data.positives {
        let (Some(qt), Some(dt)) = (data.query_tokens.get(q as usize), data.doc_tokens.get(d as usize)) else {
            return Err(Error::InvalidInput(format!("positive ({q}, {d}) refers to a missing entity")));
        };
        if qt.is_empty() || dt.is_empty() {
            return Err(Error::InvalidInput(format!("positive ({q}, {d}) has an empty token list")));
        }
    }
    let max_token = data
        .query_tokens
        .iter()
        .chain(&data.doc_tokens)
        .flatten()
        .copied()
        .max()
        .unwrap_or(0);
    if max_token as usize >= data.vocab_size {
        return Err(Error::InvalidInput(format!("token {max_token} outside vocabulary")));
    }
    Ok(())
}

/// Minibatch Adam over the positives, with `negatives` supplying y=0 pairs
/// for each batch's queries.
pub fn train(
    data: &TrainData,
    cfg: &TrainConfig,
    negatives: &mut dyn NegativeSource,
) -> Result<(ModelParams, TrainReport)> {
    cfg.validate()?;
    validate_data(data)?;
    let start = Instant::now();
    let mut params = ModelParams::xavier(data.vocab_size, cfg.dim, cfg.seed);
    let mut adam = Adam::new(params.table.len(), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut grad = vec![0.0; params.table.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005e_ed0f_ba7c);
    let mut order = data.positives.clone();
    let mut report = TrainReport::default();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let queries: Vec<u32> = chunk.iter().map(|p| p.0).collect();
            let mut batch: Vec<Example> = chunk
                .iter()
                .map(|&(query, doc)| Example {
                    query,
                    doc,
                    positive: true,
                })
                .collect();
            batch.extend(negatives.negatives(&queries)?.into_iter().map(|(query, doc)| Example {
                query,
                doc,
                positive: false,
            }));
            let loss = batch_loss_and_grad(&params, data, &batch, cfg, &mut grad);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    step: report.steps,
                    loss,
                });
            }
            adam.step(&mut params.table, &grad);
            report.steps += 1;
            epoch_loss += loss;
            batches += 1;
        }
        let mean = epoch_loss / batches.max(1) as f64;
        log::info!("epoch {epoch}: mean training loss {mean:.6}");
        report.epoch_losses.push(mean);
    }
    if params.table.iter().any(|x| !x.is_finite()) {
        return Err(Error::Diverged {
            epoch: cfg.epochs,
            step: report.steps,
            loss: f64::NAN,
        });
    }
    report.wall_seconds = start.elapsed().as_secs_f64();
    Ok((params, report))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MatchingMetrics {
    pub map: f64,
    pub recall: f64,
    pub evaluated: usize,
    /// Queries without any relevant document.
    pub skipped: usize,
}

/// Ranks the corpus for each query by dot product (ties to the lower index)
/// and scores the top `k` against that query's relevant set: AP@k with
/// denominator min(|relevant|, k), and recall@k.
pub fn matching_metrics(
    queries: &[Vec<f64>],
    corpus: &[Vec<f64>],
    relevant: &[Vec<u32>],
    k: usize,
) -> Result<MatchingMetrics> {
    if queries.len() != relevant.len() {
        return Err(Error::InvalidInput("one relevant set per query required".into()));
    }
    if k == 0 {
        return Err(Error::InvalidInput("k must be ≥ 1".into()));
    }
    let mut m = MatchingMetrics::default();
    for (q, rel) in queries.iter().zip(relevant) {
        if rel.is_empty() {
            m.skipped += 1;
            continue;
        }
        let rel: std::collections::HashSet<u32> = rel.iter().copied().collect();
        let mut scored: Vec<(f64, u32)> = corpus
            .iter()
            .enumerate()
            .map(|(i, d)| (q.iter().zip(d).map(|(a, b)| a * b).sum(), i as u32))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut hits = 0usize;
        let mut ap = 0.0;
        for (rank, &(_, i)) in scored.iter().take(k).enumerate() {
            if rel.contains(&i) {
                hits += 1;
                ap += hits as f64 / (rank + 1) as f64;
            }
        }
        m.map += ap / rel.len().min(k) as f64;
        m.recall += hits as f64 / rel.len() as f64;
        m.evaluated += 1;
    }
    if m.evaluated > 0 {
        m.map /= m.evaluated as f64;
        m.recall /= m.evaluated as f64;
    }
    Ok(m)
}

/// Matching MAP / recall at `k` for tokenized queries against a tokenized corpus.
pub fn evaluate_matching(
    params: &ModelParams,
    queries: &[(Vec<u32>, Vec<u32>)],
    corpus: &[Vec<u32>],
    k: usize,
) -> Result<MatchingMetrics> {
    let corpus_vecs = corpus.iter().map(|d| encode(d, params)).collect::<Result<Vec<_>>>()?;
    let query_vecs = queries.iter().map(|(q, _)| encode(q, params)).collect::<Result<Vec<_>>>()?;
    let relevant: Vec<Vec<u32>> = queries.iter().map(|(_, r)| r.clone()).collect();
    if let Some(bad) = relevant.iter().flatten().find(|&&d| d as usize >= corpus.len()) {
        return Err(Error::InvalidInput(format!("relevant doc {bad} is not in the corpus")));
    }
    matching_metrics(&query_vecs, &corpus_vecs, &relevant, k)
}
