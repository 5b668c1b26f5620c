//! Lloyd's k-means with k-means++ seeding.
//!
//! Deterministic under a seed, monotone in distortion, and tie-broken
//! toward the lowest centroid index so assignments are reproducible.

use crate::mat::Mat;
use crate::scalar::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("need at least k={k} points, got {n}")]
    TooFewPoints { k: usize, n: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("dimension mismatch: centroids are {centroid_dim}-dimensional, points are {point_dim}-dimensional")]
    DimMismatch {
        centroid_dim: usize,
        point_dim: usize,
    },
}

#[derive(Debug, Clone)]
pub struct KmeansFit<T: Scalar> {
    pub centroids: Mat<T>,
    /// Cluster of every fitting point under the final centroids.
    pub labels: Vec<u32>,
    /// Mean squared distance to the assigned centroid after each
    /// iteration; non-increasing.
    pub distortion_per_iter: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl<T: Scalar> KmeansFit<T> {
    pub fn distortion(&self) -> f64 {
        self.distortion_per_iter.last().copied().unwrap_or(0.0)
    }
}

/// Nearest centroid per point; ties go to the lowest index.
pub fn kmeans_assign<T: Scalar>(
    centroids: &Mat<T>,
    points: &Mat<T>,
) -> Result<Vec<u32>, ClusterError> {
    if centroids.cols() != points.cols() {
        return Err(ClusterError::DimMismatch {
            centroid_dim: centroids.cols(),
            point_dim: points.cols(),
        });
    }
    Ok((0..points.rows())
        .into_par_iter()
        .map(|i| nearest(centroids, points.row(i)).0 as u32)
        .collect())
}

fn nearest<T: Scalar>(centroids: &Mat<T>, point: &[T]) -> (usize, T) {
    let mut best = 0usize;
    let mut best_d = Mat::sq_dist(centroids.row(0), point);
    for j in 1..centroids.rows() {
        let d = Mat::sq_dist(centroids.row(j), point);
        if d < best_d {
            best = j;
            best_d = d;
        }
    }
    (best, best_d)
}

fn plus_plus_seed<T: Scalar>(points: &Mat<T>, k: usize, rng: &mut ChaCha20Rng) -> Mat<T> {
    let n = points.rows();
    let d = points.cols();
    let mut centroids = Mat::zeros(k, d);
    let first = rng.gen_range(0..n);
    centroids.row_mut(0).copy_from_slice(points.row(first));

    // squared distance to the nearest chosen centroid so far
    let mut dist: Vec<f64> = (0..n)
        .map(|i| Mat::sq_dist(points.row(i), centroids.row(0)).to_f64_lossy())
        .collect();

    for c in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in dist.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            // every remaining point coincides with a centroid
            rng.gen_range(0..n)
        };
        centroids.row_mut(c).copy_from_slice(points.row(pick));
        for i in 0..n {
            let nd = Mat::sq_dist(points.row(i), centroids.row(c)).to_f64_lossy();
            if nd < dist[i] {
                dist[i] = nd;
            }
        }
    }
    centroids
}

/// Fit k centroids with Lloyd iterations. Stops when the assignment
/// reaches a fixpoint or after `max_iters`. Clusters that lose all points
/// are re-seeded to the point currently farthest from its own centroid.
pub fn kmeans_fit<T: Scalar>(
    points: &Mat<T>,
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<KmeansFit<T>, ClusterError> {
    if k == 0 {
        return Err(ClusterError::ZeroK);
    }
    let n = points.rows();
    if n < k {
        return Err(ClusterError::TooFewPoints { k, n });
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_seed(points, k, &mut rng);

    let mut distortions: Vec<f64> = Vec::new();
    let mut prev_labels: Option<Vec<u32>> = None;
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..max_iters {
        iterations += 1;
        let mut labels: Vec<u32> = (0..n)
            .into_par_iter()
            .map(|i| nearest(&centroids, points.row(i)).0 as u32)
            .collect();

        // re-seed empty clusters from the globally worst-fitted points
        let mut counts = vec![0usize; k];
        for &l in &labels {
            counts[l as usize] += 1;
        }
        let mut stolen: Vec<usize> = Vec::new();
        for j in 0..k {
            if counts[j] > 0 {
                continue;
            }
            let mut far_i = usize::MAX;
            let mut far_d = -1.0f64;
            for i in 0..n {
                if stolen.contains(&i) || counts[labels[i] as usize] <= 1 {
                    continue;
                }
                let d = Mat::sq_dist(points.row(i), centroids.row(labels[i] as usize))
                    .to_f64_lossy();
                if d > far_d {
                    far_d = d;
                    far_i = i;
                }
            }
            if far_i == usize::MAX {
                continue;
            }
            counts[labels[far_i] as usize] -= 1;
            counts[j] += 1;
            labels[far_i] = j as u32;
            centroids.row_mut(j).copy_from_slice(points.row(far_i));
            stolen.push(far_i);
        }

        let cost: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                Mat::sq_dist(points.row(i), centroids.row(l as usize)).to_f64_lossy()
            })
            .sum::<f64>()
            / n as f64;
        distortions.push(cost);

        if prev_labels.as_ref() == Some(&labels) {
            converged = true;
            break;
        }

        // means update (sequential reduction: worker-count independent)
        let mut sums = Mat::<T>::zeros(k, points.cols());
        for (i, &l) in labels.iter().enumerate() {
            let src = points.row(i);
            let dst = sums.row_mut(l as usize);
            for (a, &b) in dst.iter_mut().zip(src.iter()) {
                *a += b;
            }
        }
        for j in 0..k {
            let c = T::of_usize(counts[j].max(1));
            let row = sums.row_mut(j);
            for v in row.iter_mut() {
                *v /= c;
            }
            centroids.row_mut(j).copy_from_slice(row);
        }
        prev_labels = Some(labels);
    }

    let labels = kmeans_assign(&centroids, points)?;
    Ok(KmeansFit {
        centroids,
        labels,
        distortion_per_iter: distortions,
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> Mat<f64> {
        Mat::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
    }

    fn rand_points(n: usize, d: usize, seed: u64) -> Mat<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-5.0..5.0)).collect();
        Mat::from_vec(n, d, data)
    }

    #[test]
    fn k1_centroid_is_the_mean() {
        let p = mat(&[&[0.0, 0.0], &[2.0, 2.0]]);
        let fit = kmeans_fit(&p, 1, 0, 50).unwrap();
        assert!((fit.centroids.at(0, 0) - 1.0).abs() < 1e-9);
        assert!((fit.centroids.at(0, 1) - 1.0).abs() < 1e-9);
    }

    /// Exhaustive oracle: try every split of the points into two non-empty
    /// groups and take the one with the lowest within-cluster cost.
    fn best_two_partition(points: &[f64]) -> (f64, f64) {
        let n = points.len();
        let mut best_cost = f64::INFINITY;
        let mut best = (0.0, 0.0);
        for mask in 1..(1u32 << n) - 1 {
            let (mut a, mut b): (Vec<f64>, Vec<f64>) = (vec![], vec![]);
            for (i, &p) in points.iter().enumerate() {
                if mask & (1 << i) != 0 {
                    a.push(p);
                } else {
                    b.push(p);
                }
            }
            let ma = a.iter().sum::<f64>() / a.len() as f64;
            let mb = b.iter().sum::<f64>() / b.len() as f64;
            let cost: f64 = a.iter().map(|p| (p - ma).powi(2)).sum::<f64>()
                + b.iter().map(|p| (p - mb).powi(2)).sum::<f64>();
            if cost < best_cost {
                best_cost = cost;
                best = (ma.min(mb), ma.max(mb));
            }
        }
        best
    }

    #[test]
    fn k2_on_two_tight_pairs_matches_partition_oracle() {
        let pts = [0.0, 0.1, 10.0, 10.1];
        let (lo, hi) = best_two_partition(&pts);
        assert!((lo - 0.05).abs() < 1e-12 && (hi - 10.05).abs() < 1e-12);
        let p = mat(&[&[0.0], &[0.1], &[10.0], &[10.1]]);
        let fit = kmeans_fit(&p, 2, 1, 50).unwrap();
        let mut got: Vec<f64> = (0..2).map(|j| fit.centroids.at(j, 0)).collect();
        got.sort_by(f64::total_cmp);
        assert!((got[0] - lo).abs() < 1e-9);
        assert!((got[1] - hi).abs() < 1e-9);
    }

    #[test]
    fn k_equals_n_gives_zero_distortion() {
        let p = rand_points(6, 3, 2);
        let fit = kmeans_fit(&p, 6, 3, 100).unwrap();
        assert!(fit.distortion() < 1e-18, "{}", fit.distortion());
        let mut seen = fit.labels.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 6, "each point its own cluster");
    }

    #[test]
    fn too_few_points_is_an_error() {
        let p = rand_points(3, 2, 1);
        assert!(matches!(
            kmeans_fit(&p, 4, 0, 10),
            Err(ClusterError::TooFewPoints { k: 4, n: 3 })
        ));
        assert!(matches!(kmeans_fit(&p, 0, 0, 10), Err(ClusterError::ZeroK)));
    }

    #[test]
    fn distortion_is_monotone_on_random_data() {
        for seed in 0..10 {
            let p = rand_points(200, 4, seed);
            let fit = kmeans_fit(&p, 8, seed, 60).unwrap();
            for w in fit.distortion_per_iter.windows(2) {
                assert!(
                    w[1] <= w[0] + 1e-9 * w[0].abs().max(1.0),
                    "seed {seed}: {:?}",
                    fit.distortion_per_iter
                );
            }
        }
    }

    #[test]
    fn assign_matches_brute_force_oracle() {
        let points = rand_points(100, 5, 11);
        let centroids = rand_points(7, 5, 12);
        let got = kmeans_assign(&centroids, &points).unwrap();
        for i in 0..points.rows() {
            // independent oracle: compute all distances, then scan
            let dists: Vec<f64> = (0..7)
                .map(|j| {
                    points
                        .row(i)
                        .iter()
                        .zip(centroids.row(j).iter())
                        .map(|(&a, &b)| (a - b) * (a - b))
                        .sum()
                })
                .collect();
            let mut best = 0;
            for j in 1..7 {
                if dists[j] < dists[best] {
                    best = j;
                }
            }
            assert_eq!(got[i] as usize, best, "point {i}");
        }
    }

    #[test]
    fn exact_match_and_tie_break() {
        let centroids = mat(&[&[0.0, 0.0], &[1.0, 0.0], &[3.0, 0.0], &[5.0, 5.0]]);
        // a point sitting exactly on centroid 3
        let p = mat(&[&[5.0, 5.0]]);
        assert_eq!(kmeans_assign(&centroids, &p).unwrap(), vec![3]);
        // equidistant between centroids 1 and 2 -> lower index wins
        let p = mat(&[&[2.0, 0.0]]);
        assert_eq!(kmeans_assign(&centroids, &p).unwrap(), vec![1]);
    }

    #[test]
    fn dim_mismatch_is_an_error() {
        let centroids = rand_points(3, 4, 1);
        let p = rand_points(5, 3, 2);
        assert!(matches!(
            kmeans_assign(&centroids, &p),
            Err(ClusterError::DimMismatch {
                centroid_dim: 4,
                point_dim: 3
            })
        ));
    }

    #[test]
    fn fitting_set_assignment_equals_fit_labels() {
        let p = rand_points(300, 6, 21);
        let fit = kmeans_fit(&p, 10, 21, 40).unwrap();
        let re = kmeans_assign(&fit.centroids, &p).unwrap();
        assert_eq!(fit.labels, re);
    }

    #[test]
    fn degenerate_duplicates_still_converge() {
        // only two distinct values but three clusters: re-seeding keeps the
        // iterations well-defined and the final labels stay consistent with
        // a plain assignment pass
        let mut rows: Vec<Vec<f64>> = vec![vec![0.0, 0.0]; 5];
        rows.push(vec![1.0, 1.0]);
        let p = Mat::from_rows(&rows);
        let fit = kmeans_fit(&p, 3, 4, 50).unwrap();
        assert!(fit.distortion().is_finite());
        let re = kmeans_assign(&fit.centroids, &p).unwrap();
        assert_eq!(fit.labels, re);
    }

    #[test]
    fn separated_blobs_populate_every_cluster() {
        let mut rng = ChaCha20Rng::seed_from_u64(33);
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for blob in 0..4 {
            let cx = blob as f64 * 20.0;
            for _ in 0..25 {
                rows.push(vec![cx + rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)]);
            }
        }
        let p = Mat::from_rows(&rows);
        let fit = kmeans_fit(&p, 4, 7, 100).unwrap();
        assert!(fit.converged);
        let mut seen = fit.labels.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 4);
        // every blob maps to one cluster
        for chunk in fit.labels.chunks(25) {
            assert!(chunk.iter().all(|&l| l == chunk[0]));
        }
    }

    #[test]
    fn seeded_runs_are_bit_identical() {
        let p = rand_points(150, 4, 5);
        let a = kmeans_fit(&p, 6, 9, 40).unwrap();
        let b = kmeans_fit(&p, 6, 9, 40).unwrap();
        assert_eq!(a.centroids, b.centroids);
        assert_eq!(a.labels, b.labels);
        let c = kmeans_fit(&p, 6, 10, 40).unwrap();
        assert_ne!(a.centroids, c.centroids);
    }
}
