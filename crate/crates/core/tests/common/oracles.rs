//! Brute-force references written without the library's code paths.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Sum of squared distances of each point to its cluster mean.
pub fn partition_cost(points: &[f64], dim: usize, labels: &[usize], k: usize) -> f64 {
    let mut sums = vec![0.0; k * dim];
    let mut counts = vec![0usize; k];
    for (p, &c) in points.chunks(dim).zip(labels) {
        counts[c] += 1;
        for d in 0..dim {
            sums[c * dim + d] += p[d];
        }
    }
    let mut cost = 0.0;
    for (p, &c) in points.chunks(dim).zip(labels) {
        for d in 0..dim {
            let m = sums[c * dim + d] / counts[c] as f64;
            cost += (p[d] - m) * (p[d] - m);
        }
    }
    cost
}

/// Labels renamed in order of first appearance so equal partitions compare equal.
pub fn canonical(labels: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect()
}

/// Global optimum over every partition into exactly `k` non-empty clusters,
/// returned as (cost, canonical labels).
pub fn exhaustive_kmeans(points: &[f64], dim: usize, k: usize) -> (f64, Vec<usize>) {
    let n = points.len() / dim;
    assert!(k >= 1 && k <= n);
    let mut best = (f64::INFINITY, Vec::new());
    let mut labels = vec![0usize; n];
    let total = k.pow(n as u32);
    for code in 0..total {
        let mut c = code;
        for l in labels.iter_mut() {
            *l = c % k;
            c /= k;
        }
        let mut used = vec![false; k];
        labels.iter().for_each(|&l| used[l] = true);
        if used.iter().any(|u| !u) {
            continue;
        }
        let cost = partition_cost(points, dim, &labels, k);
        if cost < best.0 {
            best = (cost, canonical(&labels));
        }
    }
    best
}

/// Index of the nearest centroid, first one on ties.
pub fn naive_assign(point: &[f64], centroids: &[f64], dim: usize) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (j, c) in centroids.chunks(dim).enumerate() {
        let d: f64 = point.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.0 {
            best = (d, j);
        }
    }
    best.1
}

/// Mean masked fraction of `draws` simulated span masks: a frame is masked
/// when any of the `l` positions ending at it started a span.
pub fn monte_carlo_mask_fraction(n: usize, p: f64, l: usize, draws: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masked = 0usize;
    let mut starts = vec![false; n];
    for _ in 0..draws {
        starts.iter_mut().for_each(|s| *s = rng.random_bool(p));
        let mut open = 0usize;
        for i in 0..n {
            if starts[i] {
                open += 1;
            }
            if i >= l && starts[i - l] {
                open -= 1;
            }
            if open > 0 {
                masked += 1;
            }
        }
    }
    masked as f64 / (n * draws) as f64
}

/// Closed-form expectation of the same policy.
pub fn expected_mask_fraction(n: usize, p: f64, l: usize) -> f64 {
    (0..n).map(|i| 1.0 - (1.0 - p).powi((i + 1).min(l) as i32)).sum::<f64>() / n as f64
}
