use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::dot;

fn sq_dist(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the centroid nearest to `x` (squared L2), ties to the lowest index.
pub(crate) fn nearest(x: &[f32], centroids: &[f32], dim: usize) -> usize {
    let mut best = (f32::INFINITY, 0usize);
    for (c, centroid) in centroids.chunks_exact(dim).enumerate() {
        let d = sq_dist(x, centroid);
        if d < best.0 {
            best = (d, c);
        }
    }
    best.1
}

/// Lloyd's k-means with k-means++ seeding and a fixed iteration count.
/// A cluster that empties out is reseeded with the member of the largest
/// cluster farthest from that cluster's centroid. Returns `k * dim` centroids.
pub fn kmeans(data: &[f32], dim: usize, k: usize, iterations: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = data.len() / dim;
    assert!(k >= 1 && k <= n, "k-means needs 1 ≤ k ≤ n");
    let row = |i: usize| &data[i * dim..(i + 1) * dim];

    // k-means++
    let mut centroids = Vec::with_capacity(k * dim);
    centroids.extend_from_slice(row(rng.gen_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &centroids[..dim]) as f64).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        let start = centroids.len();
        centroids.extend_from_slice(row(pick));
        for (i, best) in d2.iter_mut().enumerate() {
            let d = sq_dist(row(i), &centroids[start..start + dim]) as f64;
            if d < *best {
                *best = d;
            }
        }
    }

    let mut assign = vec![0usize; n];
    let mut sums = vec![0f64; k * dim];
    let mut counts = vec![0usize; k];
    for _ in 0..iterations {
        for (i, a) in assign.iter_mut().enumerate() {
            *a = nearest(row(i), &centroids, dim);
        }
        sums.iter_mut().for_each(|s| *s = 0.0);
        counts.iter_mut().for_each(|c| *c = 0);
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, &x) in sums[a * dim..(a + 1) * dim].iter_mut().zip(row(i)) {
                *s += x as f64;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..dim {
                    centroids[c * dim + j] = (sums[c * dim + j] / counts[c] as f64) as f32;
                }
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let largest = (0..k).max_by_key(|&j| (counts[j], std::cmp::Reverse(j))).unwrap();
            if counts[largest] < 2 {
                continue;
            }
            let lc = centroids[largest * dim..(largest + 1) * dim].to_vec();
            let far = (0..n)
                .filter(|&i| assign[i] == largest)
                .max_by(|&a, &b| sq_dist(row(a), &lc).total_cmp(&sq_dist(row(b), &lc)).then(b.cmp(&a)))
                .unwrap();
            centroids[c * dim..(c + 1) * dim].copy_from_slice(row(far));
            assign[far] = c;
            counts[largest] -= 1;
            counts[c] = 1;
        }
    }
    centroids
}

/// Centroid indices ordered by proximity to a unit query, ties to the lower index.
pub(crate) fn closest_centroids(q: &[f32], centroids: &[f32], dim: usize, count: usize) -> Vec<usize> {
    // |q - c|² = 1 + |c|² - 2 q·c for unit q
    let mut scored: Vec<(f32, usize)> = centroids
        .chunks_exact(dim)
        .enumerate()
        .map(|(i, c)| (dot(c, c) - 2.0 * dot(q, c), i))
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.into_iter().take(count).map(|x| x.1).collect()
}
