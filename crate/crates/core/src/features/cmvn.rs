//! Per-dimension mean/variance normalization estimated over a feature set.

use super::FeatureMatrix;
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};

pub const VAR_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CmvnStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub frame_count: u64,
    /// Dimensions whose variance hit the floor.
    pub floored_dims: Vec<usize>,
}

impl<T: Scalar> CmvnStats<T> {
    pub fn identity(dim: usize) -> Self {
        CmvnStats {
            mean: vec![T::zero(); dim],
            var: vec![T::one(); dim],
            frame_count: 0,
            floored_dims: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Estimate pooled per-dimension statistics with compensated (Kahan)
/// summation so the reduction order does not matter at tolerance.
pub fn estimate_cmvn<'a, T, I>(features: I) -> CmvnStats<T>
where
    T: Scalar,
    I: IntoIterator<Item = &'a FeatureMatrix<T>>,
{
    let mut dim = 0;
    let mut count: u64 = 0;
    let mut sum: Vec<T> = Vec::new();
    let mut sum_c: Vec<T> = Vec::new();
    let mut sq: Vec<T> = Vec::new();
    let mut sq_c: Vec<T> = Vec::new();

    let kahan_add = |acc: &mut [T], comp: &mut [T], d: usize, v: T| {
        let y = v - comp[d];
        let t = acc[d] + y;
        comp[d] = (t - acc[d]) - y;
        acc[d] = t;
    };

    for fm in features {
        if sum.is_empty() {
            dim = fm.dim();
            sum = vec![T::zero(); dim];
            sum_c = vec![T::zero(); dim];
            sq = vec![T::zero(); dim];
            sq_c = vec![T::zero(); dim];
        }
        assert_eq!(fm.dim(), dim, "inconsistent feature dim");
        for t in 0..fm.num_frames() {
            let row = fm.frames.row(t);
            for (d, &v) in row.iter().enumerate() {
                kahan_add(&mut sum, &mut sum_c, d, v);
                kahan_add(&mut sq, &mut sq_c, d, v * v);
            }
            count += 1;
        }
    }

    let n = T::of_f64(count.max(1) as f64);
    let floor = T::of_f64(VAR_FLOOR);
    let mut mean = vec![T::zero(); dim];
    let mut var = vec![T::one(); dim];
    let mut floored = Vec::new();
    for d in 0..dim {
        mean[d] = sum[d] / n;
        let v = sq[d] / n - mean[d] * mean[d];
        if v < floor {
            log::warn!("cmvn: flooring variance of dim {d} ({v:?})");
            floored.push(d);
            var[d] = floor;
        } else {
            var[d] = v;
        }
    }
    CmvnStats {
        mean,
        var,
        frame_count: count,
        floored_dims: floored,
    }
}

/// Affine transform `(x - mean) / sqrt(var)` per dimension.
pub fn apply_cmvn<T: Scalar>(features: &FeatureMatrix<T>, stats: &CmvnStats<T>) -> FeatureMatrix<T> {
    assert_eq!(features.dim(), stats.dim(), "cmvn dim mismatch");
    let inv_std: Vec<T> = stats.var.iter().map(|&v| T::one() / v.sqrt()).collect();
    let mut out = features.clone();
    for t in 0..out.num_frames() {
        let row = out.frames.row_mut(t);
        for (d, v) in row.iter_mut().enumerate() {
            *v = (*v - stats.mean[d]) * inv_std[d];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mat::Mat;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn fm(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> FeatureMatrix<f64> {
        let mut m = Mat::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.set(r, c, f(r, c));
            }
        }
        FeatureMatrix {
            utt_id: "u".into(),
            frames: m,
            frame_shift_s: 0.01,
            frame_length_s: 0.025,
        }
    }

    #[test]
    fn constant_dim_is_floored_and_zeroed() {
        let a = fm(10, 2, |r, c| if c == 0 { 5.0 } else { r as f64 });
        let stats = estimate_cmvn([&a]);
        assert_eq!(stats.floored_dims, vec![0]);
        let out = apply_cmvn(&a, &stats);
        for t in 0..10 {
            assert!(out.frames.at(t, 0).abs() < 1e-6);
        }
    }

    #[test]
    fn standard_normal_recovers_moments() {
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        let n = 50_000;
        let a = fm(n, 3, |_, _| {
            // Box-Muller
            let u1: f64 = rng.gen::<f64>().max(1e-12);
            let u2: f64 = rng.gen();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        });
        let stats = estimate_cmvn([&a]);
        // 3-sigma sampling bounds: sd(mean) = 1/sqrt(n), sd(var) ~ sqrt(2/n)
        let tol_mean = 3.0 / (n as f64).sqrt();
        let tol_var = 3.0 * (2.0 / n as f64).sqrt();
        for d in 0..3 {
            assert!(stats.mean[d].abs() < tol_mean, "mean[{d}]={}", stats.mean[d]);
            assert!((stats.var[d] - 1.0).abs() < tol_var, "var[{d}]={}", stats.var[d]);
        }
    }

    #[test]
    fn applying_estimated_stats_standardizes_the_set() {
        let a = fm(40, 4, |r, c| (r * 7 + c * 3) as f64 * 0.1 + (c as f64));
        let b = fm(25, 4, |r, c| (r as f64).sin() + 0.2 * c as f64);
        let stats = estimate_cmvn([&a, &b]);
        let na = apply_cmvn(&a, &stats);
        let nb = apply_cmvn(&b, &stats);
        let total = (na.num_frames() + nb.num_frames()) as f64;
        for d in 0..4 {
            let mut s = 0.0;
            let mut ss = 0.0;
            for fmx in [&na, &nb] {
                for t in 0..fmx.num_frames() {
                    let v = fmx.frames.at(t, d);
                    s += v;
                    ss += v * v;
                }
            }
            let mean = s / total;
            let var = ss / total - mean * mean;
            assert!(mean.abs() < 1e-6, "dim {d} mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "dim {d} var {var}");
        }
    }

    #[test]
    fn identity_stats_are_identity_transform() {
        let a = fm(5, 3, |r, c| (r + c) as f64);
        let out = apply_cmvn(&a, &CmvnStats::identity(3));
        assert_eq!(out.frames, a.frames);
    }

    #[test]
    fn cmvn_is_invertible_when_unfloored() {
        let a = fm(30, 2, |r, c| (r as f64 * 1.3 + c as f64).sin());
        let stats = estimate_cmvn([&a]);
        assert!(stats.floored_dims.is_empty());
        let fwd = apply_cmvn(&a, &stats);
        // invert: x = y * sqrt(var) + mean
        let mut inv = fwd.clone();
        for t in 0..inv.num_frames() {
            for d in 0..2 {
                let v = inv.frames.at(t, d) * stats.var[d].sqrt() + stats.mean[d];
                inv.frames.set(t, d, v);
            }
        }
        assert!(inv.frames.max_abs_diff(&a.frames) < 1e-9);
    }
}
