//! Scalar-intensity k-means with k-means++ seeding and best-of-n restarts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::volume::Grid2;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub k: usize,
    pub assignments: Grid2<usize>,
    pub centroids: Vec<f64>,
    /// Within-cluster sum of squared distances to the assigned centroid.
    pub wcss: f64,
}

impl KMeansResult {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in self.assignments.data() {
            sizes[a] += 1;
        }
        sizes
    }
}

/// Number of distinct pixel values, comparing by exact value.
pub fn distinct_values(values: &[f32]) -> usize {
    let mut v: Vec<f32> = values.to_vec();
    v.sort_by(f32::total_cmp);
    v.dedup();
    v.len()
}

/// Clusters the pixel intensities of `slice` into `k` groups. Each restart
/// runs Lloyd iterations from a k-means++ start until assignments stop
/// changing or `max_iters` is hit; the lowest-WCSS restart is returned.
pub fn kmeans_slice(
    slice: &Grid2<f32>,
    k: usize,
    restarts: usize,
    max_iters: usize,
    seed: u64,
) -> Result<KMeansResult> {
    if k < 2 {
        return Err(Error::invalid("k", format!("need k >= 2, got {k}")));
    }
    if restarts == 0 {
        return Err(Error::invalid("restarts", "need at least one restart"));
    }
    if slice.is_empty() {
        return Err(Error::Empty("slice"));
    }
    let distinct = distinct_values(slice.data());
    if distinct < k {
        return Err(Error::TooFewDistinctValues { distinct, k });
    }

    let values: Vec<f64> = slice.data().iter().map(|&v| v as f64).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Vec<usize>, Vec<f64>, f64)> = None;
    for _ in 0..restarts {
        let init = plus_plus_init(&values, k, &mut rng);
        let (assign, centroids) = lloyd(&values, init, max_iters);
        let wcss = wcss(&values, &assign, &centroids);
        if best.as_ref().is_none_or(|b| wcss < b.2) {
            best = Some((assign, centroids, wcss));
        }
    }
    let (assign, centroids, wcss) = best.expect("restarts >= 1");
    Ok(KMeansResult {
        k,
        assignments: Grid2::from_vec(slice.rows(), slice.cols(), assign),
        centroids,
        wcss,
    })
}

fn plus_plus_init(values: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut centroids = vec![values[rng.random_range(0..values.len())]];
    let mut d2: Vec<f64> = values.iter().map(|&v| (v - centroids[0]).powi(2)).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = d2.iter().rposition(|&d| d > 0.0).expect("total > 0");
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            values[pick]
        } else {
            values[rng.random_range(0..values.len())]
        };
        centroids.push(next);
        for (d, &v) in d2.iter_mut().zip(values) {
            *d = d.min((v - next).powi(2));
        }
    }
    centroids
}

#[inline]
fn nearest(v: f64, centroids: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, &c) in centroids.iter().enumerate() {
        let d = (v - c).powi(2);
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

fn lloyd(values: &[f64], mut centroids: Vec<f64>, max_iters: usize) -> (Vec<usize>, Vec<f64>) {
    let k = centroids.len();
    let mut assign: Vec<usize> = values.iter().map(|&v| nearest(v, &centroids)).collect();
    for _ in 0..max_iters {
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for (&a, &v) in assign.iter().zip(values) {
            sums[a] += v;
            counts[a] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j] / counts[j] as f64;
            }
        }
        // An emptied cluster takes over the pixel worst served by its centroid.
        for j in 0..k {
            if counts[j] == 0 {
                let (far, _) = values
                    .iter()
                    .zip(&assign)
                    .enumerate()
                    .map(|(i, (&v, &a))| (i, (v - centroids[a]).powi(2)))
                    .fold((0, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
                centroids[j] = values[far];
            }
        }
        let next: Vec<usize> = values.iter().map(|&v| nearest(v, &centroids)).collect();
        if next == assign {
            break;
        }
        assign = next;
    }
    // Centroids are the exact means of the final assignment.
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for (&a, &v) in assign.iter().zip(values) {
        sums[a] += v;
        counts[a] += 1;
    }
    for j in 0..k {
        if counts[j] > 0 {
            centroids[j] = sums[j] / counts[j] as f64;
        }
    }
    (assign, centroids)
}

fn wcss(values: &[f64], assign: &[usize], centroids: &[f64]) -> f64 {
    values.iter().zip(assign).map(|(&v, &a)| (v - centroids[a]).powi(2)).sum()
}
