//! Cluster router: a small feed-forward classifier from query embeddings to
//! a distribution over clusters.
//!
//! Architecture: input → ReLU(H) → ReLU(H) → softmax(r). Parameters are kept
//! in one flat f64 vector laid out as W1 b1 W2 b2 W3 b3 (weights row-major,
//! one row per output unit), which is also the checkpoint order.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embed::Adam;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RouterModel {
    input: usize,
    hidden: usize,
    r: usize,
    params: Vec<f64>,
}

struct Offsets {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
    end: usize,
}

fn offsets(input: usize, hidden: usize, r: usize) -> Offsets {
    let w1 = 0;
    let b1 = w1 + hidden * input;
    let w2 = b1 + hidden;
    let b2 = w2 + hidden * hidden;
    let w3 = b2 + hidden;
    let b3 = w3 + r * hidden;
    Offsets {
        w1,
        b1,
        w2,
        b2,
        w3,
        b3,
        end: b3 + r,
    }
}

/// out = W·x + b for a row-major `W` with `b.len()` rows.
fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut Vec<f64>) {
    out.clear();
    let n = x.len();
    for (i, &bi) in b.iter().enumerate() {
        let row = &w[i * n..(i + 1) * n];
        out.push(bi + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>());
    }
}

fn relu(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = x.max(0.0));
}

fn softmax(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in z.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    z.iter_mut().for_each(|x| *x /= sum);
}

/// Activations of one forward pass, kept for backprop.
struct Forward {
    x: Vec<f64>,
    h1: Vec<f64>,
    h2: Vec<f64>,
    probs: Vec<f64>,
}

impl RouterModel {
    /// All weights and biases zero; predicts the uniform distribution.
    pub fn zeros(input: usize, hidden: usize, r: usize) -> Result<Self> {
        if input == 0 || hidden == 0 || r == 0 {
            return Err(Error::InvalidInput("router dimensions must be ≥ 1".into()));
        }
        Ok(Self {
            input,
            hidden,
            r,
            params: vec![0.0; offsets(input, hidden, r).end],
        })
    }

    /// He-uniform weights, zero biases.
    pub fn init(input: usize, hidden: usize, r: usize, seed: u64) -> Result<Self> {
        let mut m = Self::zeros(input, hidden, r)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let o = offsets(input, hidden, r);
        for (range, fan_in) in [(o.w1..o.b1, input), (o.w2..o.b2, hidden), (o.w3..o.b3, hidden)] {
            let a = (6.0 / fan_in as f64).sqrt();
            for p in &mut m.params[range] {
                *p = rng.gen_range(-a..a);
            }
        }
        Ok(m)
    }

    pub fn from_params(input: usize, hidden: usize, r: usize, params: Vec<f64>) -> Result<Self> {
        let mut m = Self::zeros(input, hidden, r)?;
        if params.len() != m.params.len() {
            return Err(Error::InvalidInput(format!(
                "router expects {} parameters, got {}",
                m.params.len(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidInput("router parameters must be finite".into()));
        }
        m.params = params;
        Ok(m)
    }

    pub fn input_dim(&self) -> usize {
        self.input
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn num_clusters(&self) -> usize {
        self.r
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn forward(&self, q: &[f32]) -> Result<Forward> {
        if q.len() != self.input {
            return Err(Error::DimensionMismatch {
                expected: self.input,
                actual: q.len(),
            });
        }
        let o = offsets(self.input, self.hidden, self.r);
        let p = &self.params;
        let x: Vec<f64> = q.iter().map(|&v| v as f64).collect();
        let mut h1 = Vec::with_capacity(self.hidden);
        affine(&p[o.w1..o.b1], &p[o.b1..o.w2], &x, &mut h1);
        relu(&mut h1);
        let mut h2 = Vec::with_capacity(self.hidden);
        affine(&p[o.w2..o.b2], &p[o.b2..o.w3], &h1, &mut h2);
        relu(&mut h2);
        let mut probs = Vec::with_capacity(self.r);
        affine(&p[o.w3..o.b3], &p[o.b3..o.end], &h2, &mut probs);
        softmax(&mut probs);
        Ok(Forward { x, h1, h2, probs })
    }

    /// Softmax distribution over clusters.
    pub fn predict(&self, q: &[f32]) -> Result<Vec<f64>> {
        Ok(self.forward(q)?.probs)
    }

    /// `RTR1` checkpoint: magic, u32 input dim, u32 H, u32 r, then
    /// W1 b1 W2 b2 W3 b3 as little-endian f32.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |e| Error::io(path, e);
        let mut out = BufWriter::new(File::create(path).map_err(io)?);
        out.write_all(b"RTR1").map_err(io)?;
        for n in [self.input, self.hidden, self.r] {
            out.write_all(&(n as u32).to_le_bytes()).map_err(io)?;
        }
        for &p in &self.params {
            out.write_all(&(p as f32).to_le_bytes()).map_err(io)?;
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
        if bytes.len() < 16 || &bytes[..4] != b"RTR1" {
            return Err(bad("missing RTR1 header"));
        }
        let u = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
        let (input, hidden, r) = (u(4), u(8), u(12));
        let n = offsets(input, hidden, r).end;
        if bytes.len() != 16 + 4 * n {
            return Err(bad("parameter count does not match header"));
        }
        let params = bytes[16..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        Self::from_params(input, hidden, r, params)
    }
}

/// Clusters by descending probability (lower id on ties), cut at the first
/// prefix whose mass reaches `t` and capped at `d`. Always at least one entry.
/// `t ≥ 1` disables the cutoff so that `d = r` probes every cluster even when
/// rounding makes a shorter prefix sum to 1.
pub fn top_clusters(probs: &[f64], d: usize, t: f64) -> Vec<u32> {
    let mut order: Vec<u32> = (0..probs.len() as u32).collect();
    order.sort_by(|&a, &b| probs[b as usize].total_cmp(&probs[a as usize]).then(a.cmp(&b)));
    let cap = d.max(1).min(order.len());
    let mut mass = 0.0;
    for (i, &c) in order.iter().enumerate().take(cap) {
        mass += probs[c as usize];
        if t < 1.0 && mass >= t {
            order.truncate(i + 1);
            return order;
        }
    }
    order.truncate(cap);
    order
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(v: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best as u32
}

/// Cluster for a new document: argmax of the router's prediction.
pub fn assign_document(model: &RouterModel, doc: &[f32]) -> Result<u32> {
    Ok(argmax(&model.predict(doc)?))
}

/// Fraction of examples whose label is among the router's top `k` clusters.
pub fn top_k_coverage(model: &RouterModel, examples: &[(Vec<f32>, u32)], k: usize) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut hit = 0usize;
    for (x, label) in examples {
        if top_clusters(&model.predict(x)?, k, 1.0).contains(label) {
            hit += 1;
        }
    }
    Ok(hit as f64 / examples.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RouterConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            epochs: 20,
            batch_size: 64,
            lr: 0.003,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RouterReport {
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
}

/// Mean cross-entropy over `batch` and its gradient with respect to every parameter.
pub fn router_loss_and_grad(model: &RouterModel, batch: &[(Vec<f32>, u32)], grad: &mut [f64]) -> Result<f64> {
    grad.iter_mut().for_each(|g| *g = 0.0);
    if batch.is_empty() {
        return Ok(0.0);
    }
    let (n_in, h, r) = (model.input, model.hidden, model.r);
    let o = offsets(n_in, h, r);
    let p = &model.params;
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut dh2 = vec![0.0; h];
    let mut dh1 = vec![0.0; h];
    for (x, label) in batch {
        let label = *label as usize;
        if label >= r {
            return Err(Error::InvalidInput(format!("label {label} outside [0, {r})")));
        }
        let f = model.forward(x)?;
        loss -= f.probs[label].max(f64::MIN_POSITIVE).ln();

        dh2.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..r {
            let dz = scale * (f.probs[i] - if i == label { 1.0 } else { 0.0 });
            grad[o.b3 + i] += dz;
            let row = o.w3 + i * h;
            for j in 0..h {
                grad[row + j] += dz * f.h2[j];
                dh2[j] += dz * p[row + j];
            }
        }
        dh1.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..h {
            if f.h2[i] <= 0.0 {
                continue;
            }
            let dz = dh2[i];
            grad[o.b2 + i] += dz;
            let row = o.w2 + i * h;
            for j in 0..h {
                grad[row + j] += dz * f.h1[j];
                dh1[j] += dz * p[row + j];
            }
        }
        for i in 0..h {
            if f.h1[i] <= 0.0 {
                continue;
            }
            let dz = dh1[i];
            grad[o.b1 + i] += dz;
            let row = o.w1 + i * n_in;
            for j in 0..n_in {
                grad[row + j] += dz * f.x[j];
            }
        }
    }
    Ok(loss * scale)
}

/// Fraction of examples whose argmax prediction equals the label.
pub fn accuracy(model: &RouterModel, examples: &[(Vec<f32>, u32)]) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut hit = 0usize;
    for (x, label) in examples {
        if assign_document(model, x)? == *label {
            hit += 1;
        }
    }
    Ok(hit as f64 / examples.len() as f64)
}

/// Minibatch Adam on cross-entropy. Returns the model and its final training accuracy.
pub fn train_router(examples: &[(Vec<f32>, u32)], r: usize, cfg: &RouterConfig) -> Result<(RouterModel, RouterReport)> {
    let Some((first, _)) = examples.first() else {
        return Err(Error::InvalidInput("router training set is empty".into()));
    };
    if let Some((_, l)) = examples.iter().find(|(_, l)| *l as usize >= r) {
        return Err(Error::InvalidInput(format!("label {l} outside [0, {r})")));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidInput("batch size must be ≥ 1".into()));
    }
    let mut model = RouterModel::init(first.len(), cfg.hidden, r, cfg.seed)?;
    let mut adam = Adam::new(model.params.len(), cfg.lr, 0.9, 0.999, 1e-8);
    let mut grad = vec![0.0; model.params.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a0_7e5);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut report = RouterReport::default();
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| examples[i].clone()));
            let loss = router_loss_and_grad(&model, &batch, &mut grad)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step: steps,
                    loss,
                });
            }
            adam.step(&mut model.params, &grad);
            total += loss;
            steps += 1;
        }
        let mean = total / steps.max(1) as f64;
        log::info!("router epoch {epoch}: cross-entropy {mean:.6}");
        report.epoch_losses.push(mean);
    }
    report.train_accuracy = accuracy(&model, examples)?;
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn zero_model_is_uniform_and_picks_cluster_zero() {
        let m = RouterModel::zeros(3, 4, 5).unwrap();
        let p = m.predict(&[1.0, -2.0, 0.5]).unwrap();
        assert!(p.iter().all(|&x| (x - 0.2).abs() < 1e-12));
        assert_eq!(assign_document(&m, &[0.3, 0.3, 0.3]).unwrap(), 0);
        assert!(matches!(m.predict(&[1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn predict_is_a_distribution() {
        let m = RouterModel::init(4, 8, 6, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let x: Vec<f32> = (0..4).map(|_| rng.gen_range(-50.0..50.0)).collect();
            let p = m.predict(&x).unwrap();
            assert!(p.iter().all(|&v| v >= 0.0));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn shared_output_bias_shift_keeps_assignment() {
        let mut m = RouterModel::init(4, 8, 6, 3).unwrap();
        let x = [0.1f32, -0.4, 0.9, 0.2];
        let before = assign_document(&m, &x).unwrap();
        let o = offsets(4, 8, 6);
        for b in &mut m.params[o.b3..o.end] {
            *b += 7.5;
        }
        assert_eq!(assign_document(&m, &x).unwrap(), before);
    }

    #[test]
    fn top_clusters_examples() {
        assert_eq!(top_clusters(&[0.7, 0.25, 0.04, 0.01], 4, 0.9), vec![0, 1]);
        assert_eq!(top_clusters(&[0.25; 4], 2, 0.99), vec![0, 1]);
        assert_eq!(top_clusters(&[0.1, 0.9], 5, 0.5), vec![1]);
        assert_eq!(top_clusters(&[0.5, 0.5], 0, 0.5), vec![0]);
        assert_eq!(top_clusters(&[0.0, 1.0, 0.0], 3, 1.0), vec![1, 0, 2]);
    }

    fn scan_oracle(probs: &[f64], d: usize, t: f64) -> Vec<u32> {
        let mut idx: Vec<usize> = (0..probs.len()).collect();
        // stable sort keeps lower ids first among equals
        idx.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap());
        let mut out = Vec::new();
        let mut mass = 0.0;
        for &i in &idx {
            if out.len() == d {
                break;
            }
            out.push(i as u32);
            mass += probs[i];
            if mass >= t {
                break;
            }
        }
        out
    }

    #[test]
    fn top_clusters_matches_scan_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..2000 {
            let r = rng.gen_range(1..12);
            let mut p: Vec<f64> = (0..r).map(|_| rng.gen_range(0..5) as f64).collect();
            p[0] += 1.0;
            let s: f64 = p.iter().sum();
            p.iter_mut().for_each(|x| *x /= s);
            let d = rng.gen_range(1..=r);
            let t = rng.gen_range(0.05..0.999);
            let got = top_clusters(&p, d, t);
            assert_eq!(got, scan_oracle(&p, d, t), "{p:?} d={d} t={t}");
            // minimal: dropping the last entry falls below t unless d bound
            if got.len() < d {
                let m: f64 = got[..got.len() - 1].iter().map(|&c| p[c as usize]).sum();
                assert!(m < t);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // random biases keep pre-activations off the ReLU kink at zero
        let n = offsets(3, 5, 4).end;
        let mut m = RouterModel::from_params(3, 5, 4, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let batch: Vec<(Vec<f32>, u32)> = (0..6)
            .map(|i| ((0..3).map(|_| rng.gen_range(-1.0..1.0)).collect(), i % 4))
            .collect();
        let mut grad = vec![0.0; n];
        router_loss_and_grad(&m, &batch, &mut grad).unwrap();
        let mut scratch = vec![0.0; n];
        let h = 1e-6;
        for i in 0..n {
            let orig = m.params[i];
            m.params[i] = orig + h;
            let up = router_loss_and_grad(&m, &batch, &mut scratch).unwrap();
            m.params[i] = orig - h;
            let down = router_loss_and_grad(&m, &batch, &mut scratch).unwrap();
            m.params[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let denom = fd.abs().max(grad[i].abs()).max(1e-6);
            assert!((fd - grad[i]).abs() / denom < 1e-4, "param {i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn memorizes_one_example() {
        let ex = vec![(vec![0.3f32, -0.7], 2u32)];
        let cfg = RouterConfig {
            hidden: 8,
            epochs: 200,
            ..Default::default()
        };
        let (m, rep) = train_router(&ex, 4, &cfg).unwrap();
        assert_eq!(assign_document(&m, &ex[0].0).unwrap(), 2);
        assert_eq!(rep.train_accuracy, 1.0);
    }

    #[test]
    fn separates_sign_of_first_coordinate() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ex: Vec<(Vec<f32>, u32)> = (0..400)
            .map(|_| {
                let x: Vec<f32> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let l = (x[0] > 0.0) as u32;
                (x, l)
            })
            .collect();
        let cfg = RouterConfig {
            hidden: 16,
            epochs: 150,
            lr: 0.01,
            ..Default::default()
        };
        let (_, rep) = train_router(&ex, 2, &cfg).unwrap();
        assert!(rep.train_accuracy >= 0.99, "{}", rep.train_accuracy);
    }

    fn blobs(per: usize, seed: u64) -> Vec<(Vec<f32>, u32)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers: Vec<Vec<f32>> = {
            let mut c = ChaCha8Rng::seed_from_u64(100);
            (0..8).map(|_| (0..8).map(|_| c.gen_range(-4.0..4.0)).collect()).collect()
        };
        let noise = Normal::new(0.0, 0.5).unwrap();
        let mut out = Vec::new();
        for (l, c) in centers.iter().enumerate() {
            for _ in 0..per {
                out.push((c.iter().map(|&v| v + noise.sample(&mut rng) as f32).collect(), l as u32));
            }
        }
        out
    }

    #[test]
    fn blob_toy_generalizes() {
        let train = blobs(500, 1);
        let held = blobs(100, 2);
        let cfg = RouterConfig {
            hidden: 32,
            epochs: 5,
            ..Default::default()
        };
        let (m, _) = train_router(&train, 8, &cfg).unwrap();
        let acc = accuracy(&m, &held).unwrap();
        assert!(acc >= 0.95, "{acc}");
        assert!(accuracy(&m, &train).unwrap() >= 0.95);
        // coverage is monotone in k and complete at k = r
        let mut prev = 0.0;
        for k in 1..=8 {
            let c = top_k_coverage(&m, &held, k).unwrap();
            assert!(c >= prev);
            prev = c;
        }
        assert_eq!(prev, 1.0);
    }

    #[test]
    fn shuffled_labels_give_chance_accuracy() {
        let mut train = blobs(200, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for ex in train.iter_mut() {
            ex.1 = rng.gen_range(0..8);
        }
        let mut held = blobs(200, 4);
        for ex in held.iter_mut() {
            ex.1 = rng.gen_range(0..8);
        }
        let cfg = RouterConfig {
            hidden: 16,
            epochs: 5,
            ..Default::default()
        };
        let (m, _) = train_router(&train, 8, &cfg).unwrap();
        let acc = accuracy(&m, &held).unwrap();
        // 1600 held-out draws at p = 1/8: σ ≈ 0.008
        assert!((acc - 0.125).abs() < 0.05, "{acc}");
    }

    #[test]
    fn single_class_and_bad_labels() {
        let ex = vec![(vec![1.0f32], 0u32), (vec![-1.0], 0)];
        let (_, rep) = train_router(&ex, 1, &RouterConfig::default()).unwrap();
        assert_eq!(rep.train_accuracy, 1.0);
        assert!(train_router(&ex, 0, &RouterConfig::default()).is_err());
        assert!(train_router(&[], 2, &RouterConfig::default()).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = RouterModel::init(3, 4, 2, 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.rtr");
        m.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"RTR1");
        assert_eq!(bytes.len(), 16 + 4 * (4 * 3 + 4 + 16 + 4 + 8 + 2));
        let back = RouterModel::load(&path).unwrap();
        for (a, b) in back.params().iter().zip(m.params()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        std::fs::write(&path, &bytes[..20]).unwrap();
        assert!(RouterModel::load(&path).is_err());
    }
}
