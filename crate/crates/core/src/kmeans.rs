//! Seeded k-means with k-means++ initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

pub const DEFAULT_MAX_ITER: usize = 300;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub k: usize,
    pub dim: usize,
    /// Row-major `k x dim`.
    pub centroids: Vec<f64>,
    pub labels: Vec<usize>,
    pub inertia: f64,
    pub iterations: usize,
}

impl KMeans {
    pub fn centroid(&self, c: usize) -> &[f64] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Nearest centroid, lowest index on ties.
fn nearest(row: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.chunks_exact(dim).enumerate() {
        let d = dist2(row, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Clusters the rows of a row-major `n x dim` matrix. Lloyd iterations
/// stop when no label changes or after `max_iter` rounds. An emptied
/// cluster keeps its previous centroid.
pub fn kmeans(rows: &[f64], dim: usize, k: usize, seed: u64, max_iter: usize) -> Result<KMeans> {
    if dim == 0 || !rows.len().is_multiple_of(dim) {
        return Err(Error::DimensionMismatch {
            context: "k-means rows",
            expected: dim,
            found: rows.len(),
        });
    }
    let n = rows.len() / dim;
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "k must lie in 1..={n}, got {k}"
        )));
    }
    let row = |i: usize| &rows[i * dim..(i + 1) * dim];

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n).map(|i| dist2(row(i), row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random_range(0.0..total);
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                acc += w;
                if acc > target && w > 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            (0..n).find(|i| !chosen.contains(i)).unwrap()
        };
        chosen.push(next);
        d2.iter_mut()
            .enumerate()
            .for_each(|(i, d)| *d = d.min(dist2(row(i), row(next))));
    }
    let mut centroids: Vec<f64> = chosen.iter().flat_map(|&i| row(i).to_vec()).collect();

    let mut labels = vec![usize::MAX; n];
    let mut iterations = 0;
    for _ in 0..max_iter.max(1) {
        iterations += 1;
        let assigned: Vec<usize> = (0..n)
            .into_par_iter()
            .map(|i| nearest(row(i), &centroids, dim).0)
            .collect();
        let changed = assigned != labels;
        labels = assigned;
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &c) in labels.iter().enumerate() {
            counts[c] += 1;
            sums[c * dim..(c + 1) * dim]
                .iter_mut()
                .zip(row(i))
                .for_each(|(s, v)| *s += v);
        }
        for c in 0..k {
            if counts[c] > 0 {
                for (dst, s) in centroids[c * dim..(c + 1) * dim]
                    .iter_mut()
                    .zip(&sums[c * dim..(c + 1) * dim])
                {
                    *dst = s / counts[c] as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let inertia = (0..n)
        .map(|i| dist2(row(i), &centroids[labels[i] * dim..(labels[i] + 1) * dim]))
        .sum();
    Ok(KMeans {
        k,
        dim,
        centroids,
        labels,
        inertia,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_cluster_is_the_mean() {
        let rows = [1.0, 2.0, 3.0, 6.0, 5.0, 1.0];
        let r = kmeans(&rows, 2, 1, 0, 300).unwrap();
        assert_eq!(r.labels, vec![0, 0, 0]);
        assert_eq!(r.centroid(0), &[3.0, 3.0]);
    }

    #[test]
    fn duplicate_points_have_zero_inertia() {
        let r = kmeans(&[0.0, 0.0, 10.0, 10.0], 1, 2, 4, 300).unwrap();
        assert_eq!(r.inertia, 0.0);
        assert_eq!(r.labels[0], r.labels[1]);
        assert_ne!(r.labels[1], r.labels[2]);
    }

    #[test]
    fn recovers_separated_masses() {
        let centres = [[0.0, 0.0], [50.0, 0.0], [0.0, 80.0]];
        let mut rows = Vec::new();
        let mut truth = Vec::new();
        for i in 0..90 {
            let c = i % 3;
            let jitter = (i as f64 * 0.37).sin();
            rows.extend([centres[c][0] + jitter, centres[c][1] - jitter]);
            truth.push(c);
        }
        let r = kmeans(&rows, 2, 3, 1, 300).unwrap();
        for i in 0..90 {
            for j in 0..90 {
                assert_eq!(truth[i] == truth[j], r.labels[i] == r.labels[j]);
            }
        }
    }

    #[test]
    fn rejects_bad_k() {
        assert!(kmeans(&[1.0, 2.0], 1, 3, 0, 10).is_err());
        assert!(kmeans(&[1.0, 2.0], 1, 0, 0, 10).is_err());
    }

    #[test]
    fn all_identical_points() {
        let r = kmeans(&[7.0; 8], 2, 3, 0, 10).unwrap();
        assert_eq!(r.inertia, 0.0);
        assert!(r.centroids.iter().all(|&c| c == 7.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn deterministic_and_well_formed(
            rows in prop::collection::vec(-100.0f64..100.0, 6..120),
            k in 1usize..5,
            seed in 0u64..1000,
        ) {
            let n = rows.len() / 2;
            prop_assume!(k <= n);
            let rows = &rows[..2 * n];
            let a = kmeans(rows, 2, k, seed, 300).unwrap();
            let b = kmeans(rows, 2, k, seed, 300).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert!(a.labels.iter().all(|&l| l < k));
            prop_assert!(a.centroids.iter().all(|c| c.is_finite()));
            prop_assert!(a.inertia >= 0.0);
        }
    }
}
