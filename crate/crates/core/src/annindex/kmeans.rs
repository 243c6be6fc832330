//! Seeded k-means (k-means++ initialization, Lloyd iterations).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{AnnError, Result};

/// Relative centroid movement below which iteration stops.
const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    /// `k * dim` row-major centroids.
    pub centroids: Vec<f64>,
    pub assignments: Vec<usize>,
    pub iterations: usize,
}

fn dist_f64(a: &[f32], c: &[f64]) -> f64 {
    a.iter()
        .zip(c)
        .map(|(x, y)| {
            let d = *x as f64 - y;
            d * d
        })
        .sum()
}

/// Nearest centroid and its distance, ties to the lower index.
fn nearest(point: &[f32], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.chunks_exact(dim).enumerate() {
        let d = dist_f64(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn init_plus_plus(data: &[f32], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = data.len() / dim;
    let row = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut centroids: Vec<f64> = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend(row(first).iter().map(|v| *v as f64));
    let mut d2: Vec<f64> = (0..n).map(|i| dist_f64(row(i), &centroids[..dim])).collect();
    while centroids.len() < k * dim {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, d) in d2.iter().enumerate() {
                acc += d;
                if acc > target && *d > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let start = centroids.len();
        centroids.extend(row(pick).iter().map(|v| *v as f64));
        let newest = &centroids[start..];
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(dist_f64(row(i), newest));
        }
    }
    centroids
}

/// Clusters `data` (`n * dim`, row-major) into `k` groups.
pub fn kmeans(data: &[f32], dim: usize, k: usize, max_iters: usize, seed: u64) -> Result<KMeansResult> {
    if dim == 0 || !data.len().is_multiple_of(dim) {
        return Err(AnnError::BadParams(format!("data length {} is not a multiple of dim {dim}", data.len())));
    }
    let n = data.len() / dim;
    if k == 0 {
        return Err(AnnError::BadParams("nlist must be at least 1".into()));
    }
    if n < k {
        return Err(AnnError::TooFewVectors { n, nlist: k });
    }
    let row = |i: usize| &data[i * dim..(i + 1) * dim];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = init_plus_plus(data, dim, k, &mut rng);
    let mut assignments = vec![0; n];
    let mut iterations = 0;
    for _ in 0..max_iters.max(1) {
        iterations += 1;
        let nearest_all: Vec<(usize, f64)> = (0..n).into_par_iter().map(|i| nearest(row(i), &centroids, dim)).collect();
        for (a, (c, _)) in assignments.iter_mut().zip(&nearest_all) {
            *a = *c;
        }
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &c) in assignments.iter().enumerate() {
            counts[c] += 1;
            for (s, v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(row(i)) {
                *s += *v as f64;
            }
        }
        let mut distances: Vec<f64> = nearest_all.iter().map(|(_, d)| *d).collect();
        for c in 0..k {
            let slot = &mut sums[c * dim..(c + 1) * dim];
            if counts[c] > 0 {
                for s in slot.iter_mut() {
                    *s /= counts[c] as f64;
                }
            } else {
                // reseed from the point currently worst served
                let far = (0..n).fold(0, |best, i| if distances[i] > distances[best] { i } else { best });
                for (s, v) in slot.iter_mut().zip(row(far)) {
                    *s = *v as f64;
                }
                distances[far] = 0.0;
            }
        }
        let shift: f64 = centroids.iter().zip(&sums).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = centroids.iter().map(|a| a * a).sum::<f64>().sqrt();
        centroids = sums;
        if shift <= TOLERANCE * scale.max(f64::MIN_POSITIVE) {
            break;
        }
    }
    for (i, a) in assignments.iter_mut().enumerate() {
        *a = nearest(row(i), &centroids, dim).0;
    }
    Ok(KMeansResult { centroids, assignments, iterations })
}
