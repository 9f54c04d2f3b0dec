//! Monte Carlo KL estimation, dual-timescale tracking, and the asymmetric
//! KL controller with momentum early warning.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Ema, RollingWindow};
use crate::scalar::Scalar;

/// Log-probability of one sampled token under the policy and the reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlSample<T> {
    pub logp_policy: T,
    pub logp_ref: T,
}

impl<T: Scalar> KlSample<T> {
    pub fn log_ratio(&self) -> T {
        self.logp_policy - self.logp_ref
    }
}

/// Batch mean of per-token log-ratios. May be negative.
pub fn estimate_kl<T: Scalar>(samples: &[KlSample<T>]) -> Result<T> {
    if samples.is_empty() {
        return Err(Error::EmptyBatch("estimate_kl"));
    }
    let mut sum = T::zero();
    for s in samples {
        let r = s.log_ratio();
        if !r.is_finite() {
            return Err(Error::NonFinite("estimate_kl"));
        }
        sum = sum + r;
    }
    Ok(sum / T::from_usize_lossy(samples.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, bound(deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct AsymConfig<T = f64> {
    /// Safety threshold below which no penalty applies.
    pub tau: T,
    pub lambda_asym: T,
    pub lambda_mom: T,
    /// Momentum window `w`.
    pub window_w: usize,
}

impl<T: Scalar> Default for AsymConfig<T> {
    fn default() -> Self {
        Self {
            tau: T::lit(0.2),
            lambda_asym: T::lit(0.5),
            lambda_mom: T::lit(0.5),
            window_w: 10,
        }
    }
}

impl<T: Scalar> AsymConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.window_w < 2 {
            return Err(Error::Config("asym.window_w must be at least 2".into()));
        }
        if self.lambda_asym < T::zero() || self.lambda_mom < T::zero() {
            return Err(Error::Config("asym penalty weights must be nonnegative".into()));
        }
        Ok(())
    }
}

/// KL EMAs at two timescales plus the raw-estimate history used by the momentum term.
#[derive(Debug, Clone, PartialEq)]
pub struct KlTracker<T> {
    pub short: Ema<T>,
    pub long: Ema<T>,
    history: RollingWindow<T>,
}

impl<T: Scalar> KlTracker<T> {
    /// Short retention 0.9, long 0.99, history sized for window `w`.
    pub fn new(window_w: usize) -> Self {
        Self::with_retention(window_w, T::lit(0.9), T::lit(0.99))
    }

    pub fn with_retention(window_w: usize, short: T, long: T) -> Self {
        Self {
            short: Ema::new(short).expect("short retention in (0, 1]"),
            long: Ema::new(long).expect("long retention in (0, 1]"),
            history: RollingWindow::new(2 * window_w.max(1)).expect("positive capacity"),
        }
    }

    pub fn push_history(&mut self, d_hat: T) {
        self.history.push(d_hat);
    }

    pub fn update_emas(&mut self, d_hat: T) -> Result<(T, T)> {
        Ok((self.short.update(d_hat)?, self.long.update(d_hat)?))
    }

    pub fn history(&self) -> &RollingWindow<T> {
        &self.history
    }

    pub fn latest(&self) -> Option<T> {
        self.history.from_back(0)
    }

    /// The estimate `w` entries back counting the newest as the first, once the
    /// history holds at least `w` entries.
    pub fn lagged(&self, window_w: usize) -> Option<T> {
        if window_w == 0 || self.history.len() < window_w {
            None
        } else {
            self.history.from_back(window_w - 1)
        }
    }
}

/// Quadratic penalty on the excess of the KL estimate over `tau`; zero otherwise.
pub fn asym_penalty<T: Scalar>(d_hat: T, cfg: &AsymConfig<T>) -> T {
    if d_hat > cfg.tau {
        let excess = d_hat - cfg.tau;
        cfg.lambda_asym * excess * excess
    } else {
        T::zero()
    }
}

/// `lambda_mom * m^2` for positive KL velocity `m` over the tracker's history.
pub fn momentum_penalty<T: Scalar>(tracker: &KlTracker<T>, cfg: &AsymConfig<T>) -> T {
    match (tracker.latest(), tracker.lagged(cfg.window_w)) {
        (Some(now), Some(then)) => akl_terms(now, Some(then), cfg).l_mom,
        _ => T::zero(),
    }
}

/// Both asymmetric-controller penalty terms for a current estimate and its
/// lagged counterpart, plus the derivative of their sum wrt the current estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AklTerms<T> {
    pub l_asym: T,
    pub l_mom: T,
    pub momentum: T,
    pub slope: T,
}

impl<T: Scalar> AklTerms<T> {
    pub fn total(&self) -> T {
        self.l_asym + self.l_mom
    }
}

pub fn akl_terms<T: Scalar>(d_now: T, d_lagged: Option<T>, cfg: &AsymConfig<T>) -> AklTerms<T> {
    let two = T::lit(2.0);
    let l_asym = asym_penalty(d_now, cfg);
    let mut slope = if d_now > cfg.tau {
        two * cfg.lambda_asym * (d_now - cfg.tau)
    } else {
        T::zero()
    };
    let w = T::from_usize_lossy(cfg.window_w);
    let (momentum, l_mom) = match d_lagged {
        Some(then) => {
            let m = (d_now - then) / w;
            if m > T::zero() {
                slope = slope + two * cfg.lambda_mom * m / w;
                (m, cfg.lambda_mom * m * m)
            } else {
                (m, T::zero())
            }
        }
        None => (T::zero(), T::zero()),
    };
    AklTerms {
        l_asym,
        l_mom,
        momentum,
        slope,
    }
}

/// Output of one asymmetric controller step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AklStep<T> {
    pub l_asym: T,
    pub l_mom: T,
    pub l_total: T,
}

/// Append the estimate, then evaluate both penalties on the updated history.
pub fn asym_controller_step<T: Scalar>(tracker: &mut KlTracker<T>, d_hat: T, cfg: &AsymConfig<T>) -> AklStep<T> {
    tracker.push_history(d_hat);
    let terms = akl_terms(d_hat, tracker.lagged(cfg.window_w), cfg);
    AklStep {
        l_asym: terms.l_asym,
        l_mom: terms.l_mom,
        l_total: terms.total(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(tau: f64, la: f64, lm: f64, w: usize) -> AsymConfig<f64> {
        AsymConfig {
            tau,
            lambda_asym: la,
            lambda_mom: lm,
            window_w: w,
        }
    }

    #[test]
    fn estimator_basics() {
        let same = vec![
            KlSample {
                logp_policy: -1.2,
                logp_ref: -1.2
            };
            5
        ];
        assert_eq!(estimate_kl(&same).unwrap(), 0.0);
        let pairs = [
            KlSample { logp_policy: -1.2, logp_ref: -1.0 },
            KlSample { logp_policy: -0.9, logp_ref: -1.0 },
        ];
        assert_abs_diff_eq!(estimate_kl(&pairs).unwrap(), -0.05, epsilon = 1e-15);
        assert_eq!(estimate_kl::<f64>(&[]), Err(Error::EmptyBatch("estimate_kl")));
    }

    #[test]
    fn estimator_tracks_exact_kl_on_small_vocab() {
        // exact KL by summation over a 10-token vocabulary is the oracle
        let p: [f64; 10] = [0.3, 0.2, 0.1, 0.1, 0.08, 0.07, 0.05, 0.05, 0.03, 0.02];
        let q = [0.1f64; 10];
        let exact: f64 = p.iter().zip(&q).map(|(pi, qi)| pi * (pi / qi).ln()).sum();
        let second: f64 = p.iter().zip(&q).map(|(pi, qi)| pi * (pi / qi).ln().powi(2)).sum();
        let sd = (second - exact * exact).sqrt();
        let n = 10_000;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let samples: Vec<KlSample<f64>> = (0..n)
            .map(|_| {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut k = p.len() - 1;
                for (i, pi) in p.iter().enumerate() {
                    acc += pi;
                    if u < acc {
                        k = i;
                        break;
                    }
                }
                KlSample {
                    logp_policy: p[k].ln(),
                    logp_ref: q[k].ln(),
                }
            })
            .collect();
        let est = estimate_kl(&samples).unwrap();
        assert!((est - exact).abs() <= 3.0 * sd / (n as f64).sqrt(), "{est} vs {exact}");
    }

    #[test]
    fn asym_penalty_cases() {
        let c = cfg(0.2, 10.0, 0.5, 10);
        assert_eq!(asym_penalty(-0.5, &c), 0.0);
        assert_eq!(asym_penalty(0.2, &c), 0.0);
        assert_abs_diff_eq!(asym_penalty(0.3, &c), 0.1, epsilon = 1e-12);
    }

    #[test]
    fn momentum_cases() {
        let c = cfg(0.2, 0.5, 1.0, 10);
        let mut flat = KlTracker::new(10);
        for _ in 0..15 {
            flat.push_history(0.4);
        }
        assert_eq!(momentum_penalty(&flat, &c), 0.0);

        let mut short = KlTracker::new(10);
        for x in [0.0, 1.0, 2.0] {
            short.push_history(x);
        }
        assert_eq!(momentum_penalty(&short, &c), 0.0);

        let terms = akl_terms(1.36, Some(-0.09), &c);
        assert_abs_diff_eq!(terms.momentum, 0.145, epsilon = 1e-12);
        assert_abs_diff_eq!(terms.l_mom, 0.021025, epsilon = 1e-12);
    }

    #[test]
    fn controller_first_call_is_zero() {
        let mut tracker = KlTracker::new(10);
        let out = asym_controller_step(&mut tracker, 0.0, &AsymConfig::default());
        assert_eq!((out.l_asym, out.l_mom, out.l_total), (0.0, 0.0, 0.0));
        assert_eq!(tracker.history().len(), 1);
    }

    #[test]
    fn controller_on_flat_history_then_jump() {
        let c = cfg(0.2, 1.0, 1.0, 2);
        let mut tracker = KlTracker::new(2);
        tracker.push_history(0.2);
        tracker.push_history(0.2);
        let out = asym_controller_step(&mut tracker, 1.2, &c);
        // history [0.2, 0.2, 1.2]; lagged entry is 0.2, so m = (1.2 - 0.2) / 2
        assert_abs_diff_eq!(out.l_asym, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out.l_mom, 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(out.l_total, 1.25, epsilon = 1e-12);
    }

    #[test]
    fn slope_matches_finite_difference() {
        let c = cfg(0.2, 0.7, 1.3, 4);
        for (now, lag) in [(0.5, Some(0.1)), (0.1, Some(-0.3)), (0.9, None), (0.3, Some(0.5))] {
            let h = 1e-6;
            let fd = (akl_terms(now + h, lag, &c).total() - akl_terms(now - h, lag, &c).total()) / (2.0 * h);
            assert_abs_diff_eq!(akl_terms(now, lag, &c).slope, fd, epsilon = 1e-7);
        }
    }

    #[test]
    fn short_ema_reacts_faster() {
        let mut t = KlTracker::new(10);
        t.update_emas(0.0).unwrap();
        let (mut s_steps, mut l_steps) = (None, None);
        for k in 1..1000 {
            let (s, l) = t.update_emas(1.0).unwrap();
            if s_steps.is_none() && s >= 0.5 {
                s_steps = Some(k);
            }
            if l_steps.is_none() && l >= 0.5 {
                l_steps = Some(k);
            }
        }
        assert!(s_steps.unwrap() < l_steps.unwrap());
    }

    proptest! {
        #[test]
        fn asym_zero_below_and_monotone_above(a in -5.0f64..5.0, b in -5.0f64..5.0) {
            let c = AsymConfig::<f64>::default();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            if hi <= c.tau {
                prop_assert_eq!(asym_penalty(hi, &c), 0.0);
            }
            prop_assert!(asym_penalty(lo, &c) <= asym_penalty(hi, &c));
        }

        #[test]
        fn estimator_is_linear(ratios in prop::collection::vec(-3.0f64..3.0, 1..50), k in -3i32..4) {
            let scale = 2f64.powi(k);
            let mk = |s: f64| ratios.iter().map(|&r| KlSample { logp_policy: r * s, logp_ref: 0.0 }).collect::<Vec<_>>();
            let base = estimate_kl(&mk(1.0)).unwrap();
            let scaled = estimate_kl(&mk(scale)).unwrap();
            prop_assert!((scaled - scale * base).abs() <= 1e-12 * base.abs().max(1.0) * scale);
        }

        #[test]
        fn momentum_zero_on_nonincreasing_history(mut xs in prop::collection::vec(-2.0f64..2.0, 1..40)) {
            xs.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let c = AsymConfig::<f64>::default();
            let mut t = KlTracker::new(c.window_w);
            for &x in &xs {
                t.push_history(x);
            }
            prop_assert_eq!(momentum_penalty(&t, &c), 0.0);
        }

        #[test]
        fn controller_output_is_pure(hist in prop::collection::vec(-1.0f64..2.0, 0..30), d in -1.0f64..2.0) {
            let c = AsymConfig::<f64>::default();
            let mut a = KlTracker::new(c.window_w);
            let mut b = KlTracker::new(c.window_w);
            for &x in &hist {
                a.push_history(x);
                b.push_history(x);
            }
            prop_assert_eq!(asym_controller_step(&mut a, d, &c), asym_controller_step(&mut b, d, &c));
        }
    }
}
