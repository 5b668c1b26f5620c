//! SpecAugment: random frequency-band and time-band masking.
//!
//! For a T×D feature matrix, a frequency mask picks a width
//! `f ~ Uniform{0..=F}` and a start `~ Uniform{0..=D-f}` and fills columns
//! `[start, start+f)` in every frame; time masks work the same way over
//! rows. Draw order is fixed (all frequency masks first, width before
//! start), so a seed pins the whole augmentation.

use super::FeatureMatrix;
use crate::scalar::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpecAugmentPolicy {
    pub num_freq_masks: usize,
    pub max_freq_width: usize,
    pub num_time_masks: usize,
    pub max_time_width: usize,
    pub fill_value: f64,
}

impl Default for SpecAugmentPolicy {
    fn default() -> Self {
        SpecAugmentPolicy {
            num_freq_masks: 2,
            max_freq_width: 27,
            num_time_masks: 2,
            max_time_width: 40,
            fill_value: 0.0,
        }
    }
}

impl SpecAugmentPolicy {
    pub fn none() -> Self {
        SpecAugmentPolicy {
            num_freq_masks: 0,
            max_freq_width: 0,
            num_time_masks: 0,
            max_time_width: 0,
            fill_value: 0.0,
        }
    }

    pub fn is_noop(&self) -> bool {
        self.num_freq_masks == 0 && self.num_time_masks == 0
    }
}

pub fn spec_augment<T: Scalar>(
    features: &FeatureMatrix<T>,
    policy: &SpecAugmentPolicy,
    seed: u64,
) -> FeatureMatrix<T> {
    let mut out = features.clone();
    if policy.is_noop() {
        return out;
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let (t_len, d_len) = out.frames.shape();
    let fill = T::of_f64(policy.fill_value);

    for _ in 0..policy.num_freq_masks {
        let max_w = policy.max_freq_width.min(d_len);
        let width = rng.gen_range(0..=max_w);
        let start = rng.gen_range(0..=d_len - width);
        for t in 0..t_len {
            for d in start..start + width {
                out.frames.set(t, d, fill);
            }
        }
    }
    for _ in 0..policy.num_time_masks {
        let max_w = policy.max_time_width.min(t_len);
        let width = rng.gen_range(0..=max_w);
        let start = rng.gen_range(0..=t_len - width);
        for t in start..start + width {
            for d in 0..d_len {
                out.frames.set(t, d, fill);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mat::Mat;

    fn ones(t: usize, d: usize) -> FeatureMatrix<f64> {
        FeatureMatrix {
            utt_id: "u".into(),
            frames: Mat::filled(t, d, 1.0),
            frame_shift_s: 0.01,
            frame_length_s: 0.025,
        }
    }

    #[test]
    fn zero_policy_is_identity() {
        let f = ones(6, 9);
        let out = spec_augment(&f, &SpecAugmentPolicy::none(), 123);
        assert_eq!(out.frames, f.frames);
    }

    #[test]
    fn forced_time_mask_covers_exact_rows() {
        // time-mask only; replicate the rng to learn the drawn (width, start),
        // then check the masked rectangle exactly
        let policy = SpecAugmentPolicy {
            num_freq_masks: 0,
            max_freq_width: 0,
            num_time_masks: 1,
            max_time_width: 2,
            fill_value: 0.0,
        };
        let f = ones(4, 5);
        let seed = {
            // find a seed whose first draws are width=2, start=1
            let mut found = None;
            for s in 0..200u64 {
                let mut rng = ChaCha20Rng::seed_from_u64(s);
                let width = rng.gen_range(0..=2usize);
                if width != 2 {
                    continue;
                }
                let start = rng.gen_range(0..=4 - width);
                if start == 1 {
                    found = Some(s);
                    break;
                }
            }
            found.expect("seed with width=2,start=1 exists")
        };
        let out = spec_augment(&f, &policy, seed);
        for t in 0..4 {
            for d in 0..5 {
                let expect = if t == 1 || t == 2 { 0.0 } else { 1.0 };
                assert_eq!(out.frames.at(t, d), expect, "t={t} d={d}");
            }
        }
    }

    #[test]
    fn unmasked_cells_are_bit_identical() {
        let mut f = ones(20, 30);
        for t in 0..20 {
            for d in 0..30 {
                f.frames.set(t, d, (t * 31 + d) as f64 * 0.017);
            }
        }
        let policy = SpecAugmentPolicy {
            num_freq_masks: 2,
            max_freq_width: 5,
            num_time_masks: 2,
            max_time_width: 4,
            fill_value: -3.5,
        };
        let out = spec_augment(&f, &policy, 9);
        let mut masked_cells = 0usize;
        for t in 0..20 {
            for d in 0..30 {
                let o = out.frames.at(t, d);
                if o == -3.5 {
                    masked_cells += 1;
                } else {
                    assert_eq!(o.to_bits(), f.frames.at(t, d).to_bits());
                }
            }
        }
        // area bound: masks <= num * max_width * other-dim
        assert!(masked_cells <= 2 * 5 * 20 + 2 * 4 * 30);
    }

    #[test]
    fn deterministic_under_seed() {
        let f = ones(15, 12);
        let policy = SpecAugmentPolicy {
            num_freq_masks: 2,
            max_freq_width: 4,
            num_time_masks: 1,
            max_time_width: 6,
            fill_value: 0.0,
        };
        let a = spec_augment(&f, &policy, 77);
        let b = spec_augment(&f, &policy, 77);
        assert_eq!(a.frames, b.frames);
    }

    #[test]
    fn mean_mask_width_matches_uniform_expectation() {
        // E[width] for Uniform{0..=10} is 5.0; Monte Carlo with a fixed seed
        let policy = SpecAugmentPolicy {
            num_freq_masks: 1,
            max_freq_width: 10,
            num_time_masks: 0,
            max_time_width: 0,
            fill_value: f64::NAN,
        };
        let f = ones(1, 80);
        let mut total = 0usize;
        let draws = 10_000;
        for s in 0..draws {
            let out = spec_augment(&f, &policy, s as u64);
            total += out.frames.row(0).iter().filter(|v| v.is_nan()).count();
        }
        let mean = total as f64 / draws as f64;
        assert!((mean - 5.0).abs() < 0.2, "mean masked width {mean}");
    }
}
