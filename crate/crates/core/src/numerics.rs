//! Streaming statistics and the stability metrics computed over a training run.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{mean, std_dev, Scalar};

/// Exponential moving average storing the retention coefficient.
///
/// `value_t = retention * value_{t-1} + (1 - retention) * x_t`. The first
/// observation seeds the average directly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ema<T> {
    value: T,
    retention: T,
    initialized: bool,
}

impl<T: Scalar> Ema<T> {
    pub fn new(retention: T) -> Result<Self> {
        if !(retention > T::zero() && retention <= T::one()) {
            return Err(Error::Config(format!(
                "EMA retention must lie in (0, 1], got {retention}"
            )));
        }
        Ok(Self {
            value: T::zero(),
            retention,
            initialized: false,
        })
    }

    /// An EMA already holding `value`.
    pub fn seeded(retention: T, value: T) -> Result<Self> {
        let mut ema = Self::new(retention)?;
        ema.value = value;
        ema.initialized = true;
        Ok(ema)
    }

    pub fn update(&mut self, x: T) -> Result<T> {
        if !x.is_finite() {
            return Err(Error::NonFinite("ema_update"));
        }
        self.value = if self.initialized {
            self.retention * self.value + (T::one() - self.retention) * x
        } else {
            self.initialized = true;
            x
        };
        Ok(self.value)
    }

    /// What `update(x)` would return, without mutating.
    pub fn peek(&self, x: T) -> T {
        if self.initialized {
            self.retention * self.value + (T::one() - self.retention) * x
        } else {
            x
        }
    }

    pub fn value(&self) -> T {
        self.value
    }

    pub fn retention(&self) -> T {
        self.retention
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }
}

/// Welford running mean and population variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunningMoments<T> {
    count: u64,
    mean: T,
    m2: T,
}

impl<T: Scalar> Default for RunningMoments<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> RunningMoments<T> {
    pub fn new() -> Self {
        Self {
            count: 0,
            mean: T::zero(),
            m2: T::zero(),
        }
    }

    pub fn push(&mut self, x: T) {
        self.count += 1;
        let n = T::from_u64(self.count).expect("count representable");
        let delta = x - self.mean;
        self.mean = self.mean + delta / n;
        self.m2 = self.m2 + delta * (x - self.mean);
    }

    pub fn extend(&mut self, xs: &[T]) {
        for &x in xs {
            self.push(x);
        }
    }

    /// Chan et al. parallel combination.
    pub fn merge(&self, other: &Self) -> Self {
        if self.count == 0 {
            return *other;
        }
        if other.count == 0 {
            return *self;
        }
        let count = self.count + other.count;
        let na = T::from_u64(self.count).unwrap();
        let nb = T::from_u64(other.count).unwrap();
        let n = na + nb;
        let delta = other.mean - self.mean;
        Self {
            count,
            mean: self.mean + delta * nb / n,
            m2: self.m2 + other.m2 + delta * delta * na * nb / n,
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> T {
        self.mean
    }

    pub fn variance(&self) -> T {
        if self.count < 2 {
            T::zero()
        } else {
            (self.m2 / T::from_u64(self.count).unwrap()).max(T::zero())
        }
    }

    pub fn std(&self) -> T {
        self.variance().sqrt()
    }
}

/// Fixed-capacity FIFO of the most recent observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RollingWindow<T> {
    capacity: usize,
    values: VecDeque<T>,
}

impl<T: Scalar> RollingWindow<T> {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("rolling window capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            values: VecDeque::with_capacity(capacity),
        })
    }

    pub fn push(&mut self, x: T) {
        if self.values.len() == self.capacity {
            self.values.pop_front();
        }
        self.values.push_back(x);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Element `back` positions before the newest (0 is the newest).
    pub fn from_back(&self, back: usize) -> Option<T> {
        let n = self.values.len();
        (back < n).then(|| self.values[n - 1 - back])
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.values.iter().copied().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.values.iter()
    }

    pub fn mean(&self) -> T {
        if self.values.is_empty() {
            return T::zero();
        }
        self.values.iter().copied().sum::<T>() / T::from_usize_lossy(self.values.len())
    }

    /// Population std of the current contents.
    pub fn std(&self) -> T {
        if self.values.len() < 2 {
            return T::zero();
        }
        let m = self.mean();
        let ss: T = self.values.iter().map(|&x| (x - m) * (x - m)).sum();
        (ss / T::from_usize_lossy(self.values.len())).sqrt()
    }
}

/// Counts crash events: steps whose value falls below
/// `(1 - drop_fraction) * mean(previous recent_window values)`. Consecutive
/// below-threshold steps form one event. Steps without a full preceding
/// window are not evaluated.
pub fn detect_crashes<T: Scalar>(rewards: &[T], recent_window: usize, drop_fraction: T) -> usize {
    if rewards.is_empty() || recent_window == 0 {
        return 0;
    }
    let keep = T::one() - drop_fraction;
    let mut events = 0;
    let mut in_excursion = false;
    for t in recent_window..rewards.len() {
        let recent = mean(&rewards[t - recent_window..t]);
        let below = rewards[t] < keep * recent;
        if below && !in_excursion {
            events += 1;
        }
        in_excursion = below;
    }
    events
}

/// Number of values strictly above `threshold`.
pub fn count_spikes<T: Scalar>(values: &[T], threshold: T) -> usize {
    values.iter().filter(|&&v| v > threshold).count()
}

/// Mean of the population std over every full window of length `window`.
/// Series shorter than the window fall back to the std of the whole series.
pub fn rolling_std<T: Scalar>(values: &[T], window: usize) -> T {
    if values.len() < 2 || window < 2 {
        return T::zero();
    }
    if values.len() < window {
        return std_dev(values);
    }
    let stds: Vec<T> = values.windows(window).map(std_dev).collect();
    mean(&stds)
}

/// Windows and thresholds used for [`StabilityReport`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    pub rolling_window: usize,
    pub crash_window: usize,
    pub crash_drop_fraction: f64,
    pub value_spike_threshold: f64,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            rolling_window: 50,
            crash_window: 20,
            crash_drop_fraction: 0.2,
            value_spike_threshold: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StabilityReport {
    pub mean_reward: f64,
    pub reward_std: f64,
    pub reward_cv: f64,
    pub rolling_reward_std: f64,
    pub crash_count: usize,
    pub value_spike_count: usize,
    pub kl_rolling_std: f64,
}

impl StabilityReport {
    /// Report over per-step reward, KL estimate, and value-loss series.
    pub fn from_series(rewards: &[f64], kl: &[f64], value_loss: &[f64], cfg: &ReportConfig) -> Self {
        if rewards.is_empty() {
            return Self::default();
        }
        let mean_reward = mean(rewards);
        let reward_std = std_dev(rewards);
        let reward_cv = if mean_reward != 0.0 {
            reward_std / mean_reward.abs()
        } else {
            0.0
        };
        Self {
            mean_reward,
            reward_std,
            reward_cv,
            rolling_reward_std: rolling_std(rewards, cfg.rolling_window),
            crash_count: detect_crashes(rewards, cfg.crash_window, cfg.crash_drop_fraction),
            value_spike_count: count_spikes(value_loss, cfg.value_spike_threshold),
            kl_rolling_std: rolling_std(kl, cfg.rolling_window),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn ema_short_timescale_coefficients() {
        let mut ema = Ema::seeded(0.9, 0.0).unwrap();
        assert_abs_diff_eq!(ema.update(1.0).unwrap(), 0.1, epsilon = 1e-15);
    }

    #[test]
    fn ema_fixed_point_and_seeding() {
        let mut ema = Ema::seeded(0.99, 0.42_f64).unwrap();
        assert_eq!(ema.update(0.42).unwrap(), 0.42);

        let mut fresh = Ema::<f64>::new(0.99).unwrap();
        assert!(!fresh.is_initialized());
        assert_eq!(fresh.update(0.37).unwrap(), 0.37);
    }

    #[test]
    fn ema_rejects_non_finite_and_bad_retention() {
        let mut ema = Ema::<f64>::new(0.9).unwrap();
        assert_eq!(ema.update(f64::NAN), Err(Error::NonFinite("ema_update")));
        assert!(Ema::<f64>::new(0.0).is_err());
        assert!(Ema::<f64>::new(1.5).is_err());
    }

    #[test]
    fn ema_works_in_single_precision() {
        let mut ema = Ema::seeded(0.9_f32, 0.0).unwrap();
        assert!((ema.update(1.0).unwrap() - 0.1).abs() < 1e-6);
    }

    #[test]
    fn crashes_constant_sequence() {
        assert_eq!(detect_crashes(&[0.7; 100], 20, 0.2), 0);
        assert_eq!(detect_crashes::<f64>(&[], 20, 0.2), 0);
    }

    #[test]
    fn crashes_single_drop() {
        let mut r = vec![0.7; 20];
        r.push(0.5);
        assert_eq!(detect_crashes(&r, 20, 0.2), 1);
    }

    #[test]
    fn crashes_consecutive_steps_merge() {
        let mut r = vec![0.7; 20];
        r.extend([0.5, 0.49]);
        r.extend([0.7; 30]);
        assert_eq!(detect_crashes(&r, 20, 0.2), 1);
    }

    #[test]
    fn crashes_separate_excursions_count_twice() {
        let mut r = vec![0.7; 20];
        r.push(0.5);
        r.extend([0.7; 25]);
        r.push(0.4);
        assert_eq!(detect_crashes(&r, 20, 0.2), 2);
    }

    #[test]
    fn spikes() {
        assert_eq!(count_spikes(&[0.05, 0.2, 0.11], 0.1), 2);
        assert_eq!(count_spikes(&[0.0; 8], 0.1), 0);
        assert_eq!(count_spikes(&[0.1], 0.1), 0);
    }

    #[test]
    fn rolling_window_eviction() {
        let mut w = RollingWindow::new(3).unwrap();
        for x in [1.0, 2.0, 3.0, 4.0, 5.0] {
            w.push(x);
        }
        assert_eq!(w.to_vec(), vec![3.0, 4.0, 5.0]);
        assert_eq!(w.from_back(0), Some(5.0));
        assert_eq!(w.from_back(2), Some(3.0));
        assert_eq!(w.from_back(3), None);
        assert!(RollingWindow::<f64>::new(0).is_err());
    }

    #[test]
    fn moments_single_observation() {
        let mut m = RunningMoments::new();
        m.push(3.5_f64);
        assert_eq!(m.variance(), 0.0);
        assert_eq!(m.mean(), 3.5);
    }

    #[test]
    fn report_on_empty_series_is_zero() {
        let r = StabilityReport::from_series(&[], &[], &[], &ReportConfig::default());
        assert_eq!(r, StabilityReport::default());
    }

    #[test]
    fn report_cv_matches_definition() {
        let rewards: Vec<f64> = (0..200).map(|i| 0.5 + 0.01 * ((i % 7) as f64)).collect();
        let r = StabilityReport::from_series(&rewards, &rewards, &rewards, &ReportConfig::default());
        assert_abs_diff_eq!(r.reward_cv, r.reward_std / r.mean_reward.abs(), epsilon = 1e-15);
    }

    fn two_pass(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
        (m, v)
    }

    proptest! {
        #[test]
        fn ema_converges_geometrically(
            retention in 0.5f64..0.999, v0 in -10.0f64..10.0, x in -10.0f64..10.0, n in 1usize..200
        ) {
            let mut ema = Ema::seeded(retention, v0).unwrap();
            for _ in 0..n {
                ema.update(x).unwrap();
            }
            let bound = retention.powi(n as i32) * (v0 - x).abs() + 1e-12;
            prop_assert!((ema.value() - x).abs() <= bound);
        }

        #[test]
        fn rolling_window_keeps_last_capacity(cap in 1usize..20, xs in prop::collection::vec(-5.0f64..5.0, 0..60)) {
            let mut w = RollingWindow::new(cap).unwrap();
            for &x in &xs {
                w.push(x);
                prop_assert!(w.len() <= cap);
            }
            let start = xs.len().saturating_sub(cap);
            prop_assert_eq!(w.to_vec(), xs[start..].to_vec());
        }

        #[test]
        fn moments_match_two_pass(xs in prop::collection::vec(-1e3f64..1e3, 1..2000)) {
            let mut m = RunningMoments::new();
            m.extend(&xs);
            let (mu, var) = two_pass(&xs);
            prop_assert!((m.mean() - mu).abs() <= 1e-9 * mu.abs().max(1.0));
            prop_assert!((m.variance() - var).abs() <= 1e-9 * var.abs().max(1.0));
        }

        #[test]
        fn moments_merge_order_independent(
            a in prop::collection::vec(-50.0f64..50.0, 0..200),
            b in prop::collection::vec(-50.0f64..50.0, 0..200),
        ) {
            let mut ma = RunningMoments::new();
            ma.extend(&a);
            let mut mb = RunningMoments::new();
            mb.extend(&b);
            let ab = ma.merge(&mb);
            let ba = mb.merge(&ma);
            prop_assert_eq!(ab.count(), ba.count());
            prop_assert!((ab.mean() - ba.mean()).abs() <= 1e-9);
            prop_assert!((ab.variance() - ba.variance()).abs() <= 1e-9 * ab.variance().max(1.0));
        }

        #[test]
        fn crash_count_scale_invariant(
            xs in prop::collection::vec(0.0f64..1.0, 0..300),
            k in -4i32..5,
        ) {
            // powers of two scale exactly, so the comparison is unaffected by rounding
            let c = 2f64.powi(k);
            let scaled: Vec<f64> = xs.iter().map(|x| x * c).collect();
            prop_assert_eq!(detect_crashes(&xs, 20, 0.2), detect_crashes(&scaled, 20, 0.2));
        }
    }
}
