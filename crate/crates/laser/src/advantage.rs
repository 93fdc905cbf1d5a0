//! Group-relative advantage estimation and the integration of
//! verifier-based and self-rewarding-based advantages.

use crate::error::{LaserError, Result};

/// Groups whose reward standard deviation falls below this are treated as
/// all-equal and get zero advantages.
pub const DEGENERATE_STD: f64 = 1e-8;

/// Per-group advantage vector with the statistics that produced it.
///
/// Each per-solution scalar is broadcast to all tokens of that solution.
#[derive(Debug, Clone)]
pub struct AdvantageSet {
    pub advantages: Vec<f64>,
    pub mean_rv: f64,
    pub std_rv: f64,
    pub mean_rs: f64,
    pub std_rs: f64,
    /// Either 0 or the configured tau, depending on the sigma filter.
    pub tau_effective: f64,
}

/// Mean and population (uncorrected) standard deviation.
pub fn mean_and_pop_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Group-relative advantages: `(r_i - mean) / std` with the population
/// standard deviation. All-equal groups yield all-zero advantages.
pub fn grpo_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(LaserError::GroupTooSmall(rewards.len()));
    }
    let (mean, std) = mean_and_pop_std(rewards);
    if std < DEGENERATE_STD {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// Convex combination of normalized verifier rewards and normalized
/// self-rewarding scores. The sigma filter zeroes tau for groups whose
/// self-reward standard deviation falls below `sigma_threshold`.
pub fn integrated_advantages(
    rv: &[f64],
    rs: &[f64],
    tau: f64,
    sigma_threshold: f64,
) -> Result<AdvantageSet> {
    if rv.len() != rs.len() {
        return Err(LaserError::LengthMismatch {
            a: rv.len(),
            b: rs.len(),
        });
    }
    let norm_rv = grpo_advantages(rv)?;
    let norm_rs = grpo_advantages(rs)?;
    let (mean_rv, std_rv) = mean_and_pop_std(rv);
    let (mean_rs, std_rs) = mean_and_pop_std(rs);
    let tau_effective = if std_rs >= sigma_threshold { tau } else { 0.0 };
    let advantages = norm_rv
        .iter()
        .zip(norm_rs.iter())
        .map(|(a, b)| (1.0 - tau_effective) * a + tau_effective * b)
        .collect();
    Ok(AdvantageSet {
        advantages,
        mean_rv,
        std_rv,
        mean_rs,
        std_rs,
        tau_effective,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn symmetric_two_value_group() {
        let adv = grpo_advantages(&[1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(adv, vec![1.0, -1.0, 1.0, -1.0]);
    }

    #[test]
    fn degenerate_group_gets_zeros() {
        assert_eq!(grpo_advantages(&[1.0; 4]).unwrap(), vec![0.0; 4]);
        assert_eq!(grpo_advantages(&[0.0; 8]).unwrap(), vec![0.0; 8]);
    }

    #[test]
    fn single_positive_group_matches_independent_stats() {
        let rewards = [1.0, 0.0, 0.0, 0.0];
        let adv = grpo_advantages(&rewards).unwrap();
        // independent mean/std computation
        let mean: f64 = rewards.iter().sum::<f64>() / 4.0;
        let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / 4.0).sqrt();
        for (a, r) in adv.iter().zip(rewards.iter()) {
            assert!((a - (r - mean) / std).abs() < 1e-12);
        }
        assert!((adv[0] - 1.732).abs() < 1e-3);
        for &a in &adv[1..] {
            assert!((a - (-0.577)).abs() < 1e-3);
        }
    }

    #[test]
    fn group_too_small_is_rejected() {
        assert!(matches!(
            grpo_advantages(&[1.0]),
            Err(LaserError::GroupTooSmall(1))
        ));
        assert!(matches!(
            integrated_advantages(&[1.0, 0.0], &[0.5], 0.1, 0.1),
            Err(LaserError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn tau_zero_reduces_to_grpo_bitwise() {
        let rv = [1.0, 0.0, 1.0, 1.0];
        let rs = [0.8, 0.3, 0.9, 0.4];
        let set = integrated_advantages(&rv, &rs, 0.0, 0.1).unwrap();
        let plain = grpo_advantages(&rv).unwrap();
        for (a, b) in set.advantages.iter().zip(plain.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(set.tau_effective, 0.0);
    }

    #[test]
    fn sigma_filter_zeroes_tau() {
        // std(rs) = 0.05 < T = 0.1 disables the self-reward component
        let rv = [1.0, 0.0];
        let rs = [0.55, 0.45];
        let set = integrated_advantages(&rv, &rs, 0.7, 0.1).unwrap();
        assert_eq!(set.tau_effective, 0.0);
        assert_eq!(set.advantages, grpo_advantages(&rv).unwrap());
        assert!((set.std_rs - 0.05).abs() < 1e-12);
    }

    #[test]
    fn two_sample_integration_direct_evaluation() {
        // both normalizations give +/-1 when the orderings agree, so the
        // convex combination is again +/-1
        let set = integrated_advantages(&[1.0, 0.0], &[0.9, 0.2], 0.1, 0.1).unwrap();
        assert!((set.advantages[0] - 1.0).abs() < 1e-12);
        assert!((set.advantages[1] + 1.0).abs() < 1e-12);
        assert_eq!(set.tau_effective, 0.1);
    }

    proptest! {
        #[test]
        fn shift_and_scale_invariance(
            base in proptest::collection::vec(-5.0f64..5.0, 2..10),
            shift in -10.0f64..10.0,
            scale in 0.1f64..10.0,
        ) {
            let adv = grpo_advantages(&base).unwrap();
            let shifted: Vec<f64> = base.iter().map(|r| r + shift).collect();
            let scaled: Vec<f64> = base.iter().map(|r| r * scale).collect();
            let adv_shift = grpo_advantages(&shifted).unwrap();
            let adv_scale = grpo_advantages(&scaled).unwrap();
            for i in 0..base.len() {
                prop_assert!((adv[i] - adv_shift[i]).abs() < 1e-9);
                prop_assert!((adv[i] - adv_scale[i]).abs() < 1e-9);
            }
        }

        #[test]
        fn zero_mean_when_not_degenerate(
            rewards in proptest::collection::vec(-5.0f64..5.0, 2..12),
        ) {
            let adv = grpo_advantages(&rewards).unwrap();
            let sum: f64 = adv.iter().sum();
            prop_assert!(sum.abs() < 1e-9);
        }

        #[test]
        fn integration_is_a_convex_combination(
            rv in proptest::collection::vec(0.0f64..1.0, 2..10),
            seed in 0u64..1000,
            tau in 0.0f64..1.0,
        ) {
            use rand::Rng;
            let mut rng = crate::rng::stream(seed, crate::rng::domain::DIAGNOSE, 0, 0);
            let rs: Vec<f64> = (0..rv.len()).map(|_| rng.random_range(-1.0..2.0)).collect();
            let set = integrated_advantages(&rv, &rs, tau, 0.1).unwrap();
            let nv = grpo_advantages(&rv).unwrap();
            let ns = grpo_advantages(&rs).unwrap();
            for i in 0..rv.len() {
                let lo = nv[i].min(ns[i]) - 1e-12;
                let hi = nv[i].max(ns[i]) + 1e-12;
                prop_assert!(set.advantages[i] >= lo && set.advantages[i] <= hi);
            }
        }
    }
}
