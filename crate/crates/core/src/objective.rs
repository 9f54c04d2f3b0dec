//! Reward normalization, advantage standardization, the clipped surrogate, and
//! assembly of the composite loss.

use serde::{Deserialize, Serialize};

use crate::control::Phase;
use crate::error::{Error, Result};
use crate::numerics::RunningMoments;
use crate::scalar::Scalar;

/// Stabilizer for every normalization denominator.
pub const NORM_EPSILON: f64 = 1e-8;

/// Largest tolerated |logp_new - logp_old| before the run is declared diverged.
pub const MAX_LOG_RATIO: f64 = 30.0;

/// Fold the batch into the running moments, then return `(r - mu) / (sigma + eps)`.
pub fn normalize_rewards<T: Scalar>(moments: &mut RunningMoments<T>, rewards: &[T]) -> Result<Vec<T>> {
    if rewards.is_empty() {
        return Err(Error::EmptyBatch("normalize_rewards"));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite("normalize_rewards"));
    }
    moments.extend(rewards);
    let mu = moments.mean();
    let denom = moments.std() + T::lit(NORM_EPSILON);
    Ok(rewards.iter().map(|&r| (r - mu) / denom).collect())
}

/// Raw advantages `r_norm - v_soft` and their batch standardization.
///
/// Single-element or constant batches standardize to zeros.
pub fn compute_advantages<T: Scalar>(rewards_norm: &[T], v_soft: &[T]) -> Result<(Vec<T>, Vec<T>)> {
    if rewards_norm.len() != v_soft.len() {
        return Err(Error::LengthMismatch {
            op: "compute_advantages",
            left: rewards_norm.len(),
            right: v_soft.len(),
        });
    }
    if rewards_norm.is_empty() {
        return Err(Error::EmptyBatch("compute_advantages"));
    }
    let raw: Vec<T> = rewards_norm.iter().zip(v_soft).map(|(&r, &v)| r - v).collect();
    let standardized = standardize(&raw);
    Ok((raw, standardized))
}

/// `(x - mean) / (std + eps)` with population std; zeros when degenerate.
pub fn standardize<T: Scalar>(xs: &[T]) -> Vec<T> {
    let sd = crate::scalar::std_dev(xs);
    if xs.len() < 2 || sd == T::zero() {
        return vec![T::zero(); xs.len()];
    }
    let m = crate::scalar::mean(xs);
    let denom = sd + T::lit(NORM_EPSILON);
    xs.iter().map(|&x| (x - m) / denom).collect()
}

/// All per-batch reward and advantage vectors of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedBatch<T> {
    pub rewards_raw: Vec<T>,
    pub rewards_norm: Vec<T>,
    pub advantages: Vec<T>,
    pub advantages_std: Vec<T>,
}

/// Clipped surrogate loss with its derivative wrt each `logp_new`.
#[derive(Debug, Clone, PartialEq)]
pub struct PpoTerms<T> {
    pub loss: T,
    pub d_logp_new: Vec<T>,
    /// Fraction of samples where the clipped branch was selected.
    pub clip_fraction: T,
}

/// `-mean(min(rho * A, clip(rho, 1 - eps, 1 + eps) * A))` with `rho = exp(logp_new - logp_old)`.
pub fn ppo_loss<T: Scalar>(logp_new: &[T], logp_old: &[T], adv: &[T], epsilon: T) -> Result<T> {
    Ok(ppo_terms(logp_new, logp_old, adv, epsilon)?.loss)
}

pub fn ppo_terms<T: Scalar>(logp_new: &[T], logp_old: &[T], adv: &[T], epsilon: T) -> Result<PpoTerms<T>> {
    let n = logp_new.len();
    if logp_old.len() != n || adv.len() != n {
        return Err(Error::LengthMismatch {
            op: "ppo_loss",
            left: n,
            right: if logp_old.len() != n { logp_old.len() } else { adv.len() },
        });
    }
    if n == 0 {
        return Err(Error::EmptyBatch("ppo_loss"));
    }
    if !(epsilon > T::zero()) {
        return Err(Error::Config("ppo clip epsilon must be positive".into()));
    }
    let nn = T::from_usize_lossy(n);
    let lo = T::one() - epsilon;
    let hi = T::one() + epsilon;
    let mut total = T::zero();
    let mut clipped = 0usize;
    let mut d_logp_new = Vec::with_capacity(n);
    for ((&new, &old), &a) in logp_new.iter().zip(logp_old).zip(adv) {
        let delta = new - old;
        if !delta.is_finite() || delta.abs() > T::lit(MAX_LOG_RATIO) {
            return Err(Error::RatioOverflow(delta.abs().to_f64_lossy()));
        }
        let rho = delta.exp();
        let unclipped = rho * a;
        let clipped_obj = rho.max(lo).min(hi) * a;
        if unclipped <= clipped_obj {
            total = total + unclipped;
            d_logp_new.push(-unclipped / nn);
        } else {
            total = total + clipped_obj;
            clipped += 1;
            d_logp_new.push(T::zero());
        }
    }
    Ok(PpoTerms {
        loss: -total / nn,
        d_logp_new,
        clip_fraction: T::from_usize_lossy(clipped) / nn,
    })
}

/// Controller diagnostics carried alongside the loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics<T> {
    pub tau_t: T,
    pub phase: Phase,
    pub gate: T,
    pub kl_short: T,
    pub kl_long: T,
    pub kl_raw: T,
    pub preview_scale: T,
}

impl<T: Scalar> Default for Diagnostics<T> {
    fn default() -> Self {
        Self {
            tau_t: T::zero(),
            phase: Phase::Warmup,
            gate: T::one(),
            kl_short: T::zero(),
            kl_long: T::zero(),
            kl_raw: T::zero(),
            preview_scale: T::one(),
        }
    }
}

/// Inputs to [`total_loss`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossComponents<T> {
    pub l_ppo: T,
    pub l_value: T,
    /// Entropy-gated KL penalty.
    pub l_gated: T,
    pub l_asym: T,
    pub l_mom: T,
    pub entropy: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyBreakdown<T> {
    pub l_ppo: T,
    pub l_value: T,
    /// `l_gated + l_asym + l_mom`
    pub l_kl: T,
    pub l_gated: T,
    pub l_asym: T,
    pub l_mom: T,
    /// `beta * entropy`
    pub entropy_bonus: T,
    pub l_total: T,
    pub diagnostics: Diagnostics<T>,
}

/// `l_ppo + 0.5 * l_value + l_kl - beta * entropy`.
pub fn total_loss<T: Scalar>(parts: &LossComponents<T>, beta: T) -> Result<PenaltyBreakdown<T>> {
    let finite = [parts.l_ppo, parts.l_value, parts.l_gated, parts.l_asym, parts.l_mom, parts.entropy, beta]
        .iter()
        .all(|x| x.is_finite());
    if !finite {
        return Err(Error::NonFinite("total_loss"));
    }
    let l_kl = parts.l_gated + (parts.l_asym + parts.l_mom);
    let l_total = parts.l_ppo + T::lit(0.5) * parts.l_value + l_kl - beta * parts.entropy;
    Ok(PenaltyBreakdown {
        l_ppo: parts.l_ppo,
        l_value: parts.l_value,
        l_kl,
        l_gated: parts.l_gated,
        l_asym: parts.l_asym,
        l_mom: parts.l_mom,
        entropy_bonus: beta * parts.entropy,
        l_total,
        diagnostics: Diagnostics::default(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn two_pass(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        (m, (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
    }

    #[test]
    fn constant_rewards_normalize_to_zero() {
        let mut m = RunningMoments::new();
        for _ in 0..20 {
            let out = normalize_rewards(&mut m, &[0.7; 16]).unwrap();
            assert!(out.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn single_first_reward_is_zero() {
        let mut m = RunningMoments::new();
        assert_eq!(normalize_rewards(&mut m, &[3.3]).unwrap(), vec![0.0]);
        assert!(normalize_rewards(&mut m, &[]).is_err());
    }

    #[test]
    fn normalized_standard_normal_stream_has_unit_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut m = RunningMoments::new();
        let mut out = Vec::new();
        for _ in 0..625 {
            let batch: Vec<f64> = (0..16).map(|_| rng.sample(StandardNormal)).collect();
            out.extend(normalize_rewards(&mut m, &batch).unwrap());
        }
        let (_, sd) = two_pass(&out[out.len() / 2..]);
        assert!((sd - 1.0).abs() < 0.05, "{sd}");
    }

    #[test]
    fn advantage_cases() {
        let (raw, std) = compute_advantages(&[0.3, -0.1], &[0.3, -0.1]).unwrap();
        assert_eq!(raw, vec![0.0, 0.0]);
        assert_eq!(std, vec![0.0, 0.0]);

        let (_, std) = compute_advantages(&[1.0, -1.0], &[0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(std[0], 1.0, epsilon = 1e-7);
        assert_abs_diff_eq!(std[1], -1.0, epsilon = 1e-7);

        let (_, std) = compute_advantages(&[2.0], &[0.5]).unwrap();
        assert_eq!(std, vec![0.0]);
        assert!(compute_advantages(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn advantages_standardize_random_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let r: Vec<f64> = (0..16).map(|_| rng.random_range(-2.0..2.0)).collect();
        let v: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, std) = compute_advantages(&r, &v).unwrap();
        let (m, sd) = two_pass(&std);
        assert!(m.abs() < 1e-9);
        assert!((sd - 1.0).abs() < 1e-6);
    }

    #[test]
    fn ppo_reference_cases() {
        assert_abs_diff_eq!(ppo_loss(&[-1.0], &[-1.0], &[1.0], 0.2).unwrap(), -1.0, epsilon = 1e-15);
        let up = 1.5f64.ln();
        assert_abs_diff_eq!(ppo_loss(&[up], &[0.0], &[1.0], 0.2).unwrap(), -1.2, epsilon = 1e-12);
        let down = 0.5f64.ln();
        assert_abs_diff_eq!(ppo_loss(&[down], &[0.0], &[-1.0], 0.2).unwrap(), 0.8, epsilon = 1e-12);
    }

    #[test]
    fn ppo_rejects_divergence() {
        assert!(matches!(ppo_loss(&[0.0], &[-31.0], &[1.0], 0.2), Err(Error::RatioOverflow(_))));
        assert!(ppo_loss(&[0.0, 1.0], &[0.0], &[1.0], 0.2).is_err());
    }

    #[test]
    fn ppo_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let n = 6;
            let old: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..-0.5)).collect();
            let new: Vec<f64> = old.iter().map(|o| o + rng.random_range(-0.4..0.4)).collect();
            let adv: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let t = ppo_terms(&new, &old, &adv, 0.2).unwrap();
            let h = 1e-6;
            for i in 0..n {
                let mut p = new.clone();
                let mut m = new.clone();
                p[i] += h;
                m[i] -= h;
                let fd = (ppo_loss(&p, &old, &adv, 0.2).unwrap() - ppo_loss(&m, &old, &adv, 0.2).unwrap()) / (2.0 * h);
                // skip samples sitting on a clip kink
                let rho = (new[i] - old[i]).exp();
                if (rho - 0.8).abs() < 1e-4 || (rho - 1.2).abs() < 1e-4 {
                    continue;
                }
                assert!((t.d_logp_new[i] - fd).abs() <= 1e-6 * fd.abs().max(1e-6), "{} vs {fd}", t.d_logp_new[i]);
            }
        }
    }

    #[test]
    fn total_loss_cases() {
        let zero = total_loss(&LossComponents::<f64>::default(), 0.01).unwrap();
        assert_eq!(zero.l_total, 0.0);
        let parts = LossComponents {
            l_ppo: -1.0,
            l_value: 0.2,
            l_gated: 0.05,
            entropy: 3.0,
            ..LossComponents::default()
        };
        let b = total_loss(&parts, 0.01).unwrap();
        assert_abs_diff_eq!(b.l_total, -0.88, epsilon = 1e-15);
        assert_abs_diff_eq!(b.entropy_bonus, 0.03, epsilon = 1e-15);
        let bad = LossComponents {
            l_value: f64::NAN,
            ..LossComponents::default()
        };
        assert!(total_loss(&bad, 0.01).is_err());
    }

    proptest! {
        #[test]
        fn ppo_invariant_to_common_shift(
            base in prop::collection::vec((-4.0f64..-0.1, -0.5f64..0.5, -2.0f64..2.0), 1..20),
            c in -10.0f64..10.0,
        ) {
            let old: Vec<f64> = base.iter().map(|b| b.0).collect();
            let new: Vec<f64> = base.iter().map(|b| b.0 + b.1).collect();
            let adv: Vec<f64> = base.iter().map(|b| b.2).collect();
            let shifted_old: Vec<f64> = old.iter().map(|x| x + c).collect();
            let shifted_new: Vec<f64> = new.iter().map(|x| x + c).collect();
            let a = ppo_loss(&new, &old, &adv, 0.2).unwrap();
            let b = ppo_loss(&shifted_new, &shifted_old, &adv, 0.2).unwrap();
            prop_assert!((a - b).abs() <= 1e-9);
        }

        #[test]
        fn ppo_large_clip_is_vanilla(
            base in prop::collection::vec((-0.5f64..0.5, -2.0f64..2.0), 1..20),
        ) {
            let old = vec![0.0; base.len()];
            let new: Vec<f64> = base.iter().map(|b| b.0).collect();
            let adv: Vec<f64> = base.iter().map(|b| b.1).collect();
            let vanilla = -base.iter().map(|b| b.0.exp() * b.1).sum::<f64>() / base.len() as f64;
            prop_assert!((ppo_loss(&new, &old, &adv, 1e9).unwrap() - vanilla).abs() <= 1e-12);
        }

        #[test]
        fn standardization_ignores_shift(xs in prop::collection::vec(-5.0f64..5.0, 2..40), c in -100.0f64..100.0) {
            let a = standardize(&xs);
            let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
            let b = standardize(&shifted);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= 1e-6);
            }
        }

        #[test]
        fn total_loss_is_linear(
            ppo in -5.0f64..5.0, value in 0.0f64..5.0, gated in 0.0f64..5.0,
            asym in 0.0f64..5.0, mom in 0.0f64..5.0, ent in 0.0f64..4.0, beta in 0.0f64..0.1,
        ) {
            let p = LossComponents { l_ppo: ppo, l_value: value, l_gated: gated, l_asym: asym, l_mom: mom, entropy: ent };
            let b = total_loss(&p, beta).unwrap();
            let expect = ppo + 0.5 * value + gated + asym + mom - beta * ent;
            prop_assert!((b.l_total - expect).abs() <= 1e-12);
            let bumped = LossComponents { l_value: value + 1.0, ..p };
            prop_assert!((total_loss(&bumped, beta).unwrap().l_total - b.l_total - 0.5).abs() <= 1e-12);
        }
    }
}
