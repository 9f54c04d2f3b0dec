//! Entropy-aware predictive controller: reward-velocity PID threshold, training
//! phase detection, entropy-gated KL penalty, and the preview step-scaling gate.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::divergence::KlTracker;
use crate::error::{Error, Result};
use crate::numerics::{Ema, RollingWindow};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, bound(deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct PidConfig<T = f64> {
    pub kp: T,
    pub ki: T,
    pub kd: T,
    /// Target per-step improvement of the smoothed reward.
    pub v_target: T,
    pub reward_retention: T,
    /// Anti-windup clamp on the accumulated error.
    pub integral_limit: T,
}

impl<T: Scalar> Default for PidConfig<T> {
    fn default() -> Self {
        Self {
            kp: T::lit(2.0),
            ki: T::lit(0.5),
            kd: T::lit(1.0),
            v_target: T::lit(0.001),
            reward_retention: T::lit(0.95),
            integral_limit: T::one(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PidState<T> {
    pub cfg: PidConfig<T>,
    pub integral: T,
    pub prev_error: T,
    pub reward_ema: Ema<T>,
    pub prev_reward_ema: T,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PidOutput<T> {
    pub error: T,
    pub output: T,
}

impl<T: Scalar> PidState<T> {
    pub fn new(cfg: PidConfig<T>) -> Result<Self> {
        if !(cfg.integral_limit > T::zero()) {
            return Err(Error::Config("pid.integral_limit must be positive".into()));
        }
        Ok(Self {
            reward_ema: Ema::new(cfg.reward_retention)?,
            cfg,
            integral: T::zero(),
            prev_error: T::zero(),
            prev_reward_ema: T::zero(),
        })
    }

    /// One PID update on the velocity of the smoothed reward.
    ///
    /// The first reward only seeds the EMA: no velocity exists yet, so the
    /// error and output are zero and the accumulators stay untouched.
    pub fn step(&mut self, reward: T) -> Result<PidOutput<T>> {
        if !reward.is_finite() {
            return Err(Error::NonFinite("pid_step"));
        }
        if !self.reward_ema.is_initialized() {
            let v = self.reward_ema.update(reward)?;
            self.prev_reward_ema = v;
            return Ok(PidOutput {
                error: T::zero(),
                output: T::zero(),
            });
        }
        let ema = self.reward_ema.update(reward)?;
        let error = (ema - self.prev_reward_ema) - self.cfg.v_target;
        self.prev_reward_ema = ema;
        let lim = self.cfg.integral_limit;
        self.integral = (self.integral + error).max(-lim).min(lim);
        let output = self.cfg.kp * error + self.cfg.ki * self.integral + self.cfg.kd * (error - self.prev_error);
        self.prev_error = error;
        Ok(PidOutput { error, output })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Climbing,
    Plateau,
    Converged,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Warmup => "warmup",
            Phase::Climbing => "climbing",
            Phase::Plateau => "plateau",
            Phase::Converged => "converged",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "warmup" => Ok(Phase::Warmup),
            "climbing" => Ok(Phase::Climbing),
            "plateau" => Ok(Phase::Plateau),
            "converged" => Ok(Phase::Converged),
            other => Err(Error::Config(format!("unknown phase `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, bound(deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct PhaseConfig<T = f64> {
    pub history_capacity: usize,
    pub recent_window: usize,
    pub climb_margin: T,
    pub converged_std: T,
    pub converged_mean: T,
    pub phi_warmup: T,
    pub phi_climbing: T,
    pub phi_plateau: T,
    pub phi_converged: T,
}

impl<T: Scalar> Default for PhaseConfig<T> {
    fn default() -> Self {
        Self {
            history_capacity: 100,
            recent_window: 50,
            climb_margin: T::lit(0.01),
            converged_std: T::lit(0.02),
            converged_mean: T::lit(0.7),
            phi_warmup: T::lit(1.5),
            phi_climbing: T::lit(1.2),
            phi_plateau: T::lit(0.8),
            phi_converged: T::lit(1.0),
        }
    }
}

impl<T: Scalar> PhaseConfig<T> {
    pub fn multiplier(&self, phase: Phase) -> T {
        match phase {
            Phase::Warmup => self.phi_warmup,
            Phase::Climbing => self.phi_climbing,
            Phase::Plateau => self.phi_plateau,
            Phase::Converged => self.phi_converged,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.recent_window == 0 || self.history_capacity < self.recent_window {
            return Err(Error::Config(
                "phase.history_capacity must be at least phase.recent_window > 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseState<T> {
    pub cfg: PhaseConfig<T>,
    history: RollingWindow<T>,
    pub current_phase: Phase,
    pub multiplier: T,
}

impl<T: Scalar> PhaseState<T> {
    pub fn new(cfg: PhaseConfig<T>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            history: RollingWindow::new(cfg.history_capacity)?,
            current_phase: Phase::Warmup,
            multiplier: cfg.phi_warmup,
            cfg,
        })
    }

    pub fn history(&self) -> &RollingWindow<T> {
        &self.history
    }

    /// Append the reward and classify the regime from the last two windows.
    ///
    /// Until the history holds two full windows, the older window is whatever
    /// prefix precedes the most recent one.
    pub fn detect(&mut self, reward: T) -> Result<(Phase, T)> {
        if !reward.is_finite() {
            return Err(Error::NonFinite("detect_phase"));
        }
        self.history.push(reward);
        let n = self.history.len();
        let w = self.cfg.recent_window;
        let phase = if n < w {
            Phase::Warmup
        } else {
            let all = self.history.to_vec();
            let recent = &all[n - w..];
            let old = &all[n.saturating_sub(2 * w)..n - w];
            let recent_mean = crate::scalar::mean(recent);
            let recent_std = crate::scalar::std_dev(recent);
            // an empty prefix (exactly one window observed) cannot show a climb
            let climbing = !old.is_empty() && recent_mean > crate::scalar::mean(old) + self.cfg.climb_margin;
            if climbing {
                Phase::Climbing
            } else if recent_std < self.cfg.converged_std && recent_mean > self.cfg.converged_mean {
                Phase::Converged
            } else {
                Phase::Plateau
            }
        };
        self.current_phase = phase;
        self.multiplier = self.cfg.multiplier(phase);
        Ok((phase, self.multiplier))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, bound(deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct ThresholdConfig<T = f64> {
    pub tau_base: T,
    pub clip_lo: T,
    pub clip_hi: T,
}

impl<T: Scalar> Default for ThresholdConfig<T> {
    fn default() -> Self {
        Self {
            tau_base: T::lit(0.3),
            clip_lo: T::lit(0.1),
            clip_hi: T::lit(0.6),
        }
    }
}

/// `clamp((tau_base + pid_output) * multiplier, clip_lo, clip_hi)`; the clamp is applied last.
pub fn adaptive_threshold<T: Scalar>(pid_output: T, cfg: &ThresholdConfig<T>, multiplier: T) -> T {
    ((cfg.tau_base + pid_output) * multiplier).max(cfg.clip_lo).min(cfg.clip_hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, bound(deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct EntropyGateConfig<T = f64> {
    pub h_floor: T,
    pub epsilon_e: T,
    /// Weight of the gated KL penalty.
    pub lambda_pen: T,
    /// Lower bound on the gate.
    pub gate_min: T,
}

impl<T: Scalar> Default for EntropyGateConfig<T> {
    fn default() -> Self {
        Self {
            h_floor: T::lit(2.0),
            epsilon_e: T::lit(0.1),
            lambda_pen: T::lit(5.0),
            gate_min: T::lit(0.5),
        }
    }
}

/// `max(0.5, h_floor / (entropy + epsilon_e))`.
pub fn entropy_gate<T: Scalar>(entropy: T, cfg: &EntropyGateConfig<T>) -> Result<T> {
    if entropy < T::zero() {
        return Err(Error::NegativeEntropy(entropy.to_f64_lossy()));
    }
    if !entropy.is_finite() {
        return Err(Error::NonFinite("entropy_gate"));
    }
    Ok(cfg.gate_min.max(cfg.h_floor / (entropy + cfg.epsilon_e)))
}

/// Derivative of [`entropy_gate`] with respect to entropy (zero where the floor binds).
pub fn entropy_gate_slope<T: Scalar>(entropy: T, cfg: &EntropyGateConfig<T>) -> T {
    let denom = entropy + cfg.epsilon_e;
    if cfg.h_floor / denom > cfg.gate_min {
        -cfg.h_floor / (denom * denom)
    } else {
        T::zero()
    }
}

/// `lambda * (kl - tau)^2 * gate(entropy)` above the threshold, zero at or below it.
pub fn gated_kl_penalty<T: Scalar>(kl_smoothed: T, tau: T, entropy: T, cfg: &EntropyGateConfig<T>) -> Result<T> {
    Ok(gated_kl_terms(kl_smoothed, tau, entropy, cfg)?.value)
}

/// Gated penalty with its partial derivatives in the smoothed KL and the entropy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GatedTerms<T> {
    pub value: T,
    pub gate: T,
    pub d_kl: T,
    pub d_entropy: T,
}

pub fn gated_kl_terms<T: Scalar>(kl_smoothed: T, tau: T, entropy: T, cfg: &EntropyGateConfig<T>) -> Result<GatedTerms<T>> {
    let gate = entropy_gate(entropy, cfg)?;
    if kl_smoothed <= tau {
        return Ok(GatedTerms {
            value: T::zero(),
            gate,
            d_kl: T::zero(),
            d_entropy: T::zero(),
        });
    }
    let excess = kl_smoothed - tau;
    let base = cfg.lambda_pen * excess * excess;
    Ok(GatedTerms {
        value: base * gate,
        gate,
        d_kl: T::lit(2.0) * cfg.lambda_pen * excess * gate,
        d_entropy: base * entropy_gate_slope(entropy, cfg),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, bound(deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct PreviewConfig<T = f64> {
    /// Ceiling on the post-update KL estimate.
    pub d_max: T,
    pub enabled: bool,
}

impl<T: Scalar> Default for PreviewConfig<T> {
    fn default() -> Self {
        Self {
            d_max: T::lit(0.5),
            enabled: false,
        }
    }
}

/// Step scale in (0, 1] that keeps the previewed KL at or below `d_max`.
pub fn preview_scale<T: Scalar>(kl_preview: T, cfg: &PreviewConfig<T>) -> Result<T> {
    if !kl_preview.is_finite() {
        return Err(Error::NonFinite("preview_scale"));
    }
    if !cfg.enabled || kl_preview <= cfg.d_max {
        Ok(T::one())
    } else {
        Ok(cfg.d_max / kl_preview)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, bound(deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct ControllerConfig<T = f64> {
    pub kl_short_retention: T,
    pub kl_long_retention: T,
    pub pid: PidConfig<T>,
    pub phase: PhaseConfig<T>,
    pub threshold: ThresholdConfig<T>,
    pub gate: EntropyGateConfig<T>,
    pub preview: PreviewConfig<T>,
}

impl<T: Scalar> Default for ControllerConfig<T> {
    fn default() -> Self {
        Self {
            kl_short_retention: T::lit(0.9),
            kl_long_retention: T::lit(0.99),
            pid: PidConfig::default(),
            phase: PhaseConfig::default(),
            threshold: ThresholdConfig::default(),
            gate: EntropyGateConfig::default(),
            preview: PreviewConfig::default(),
        }
    }
}

impl<T: Scalar> ControllerConfig<T> {
    pub fn validate(&self) -> Result<()> {
        self.phase.validate()?;
        if !(self.threshold.clip_lo < self.threshold.clip_hi) {
            return Err(Error::Config("threshold.clip_lo must be below threshold.clip_hi".into()));
        }
        if !(self.gate.h_floor > T::zero() && self.gate.epsilon_e > T::zero()) {
            return Err(Error::Config("gate.h_floor and gate.epsilon_e must be positive".into()));
        }
        if self.gate.lambda_pen < T::zero() {
            return Err(Error::Config("gate.lambda_pen must be nonnegative".into()));
        }
        if !(self.preview.d_max > T::zero()) {
            return Err(Error::Config("preview.d_max must be positive".into()));
        }
        for r in [self.kl_short_retention, self.kl_long_retention, self.pid.reward_retention] {
            if !(r > T::zero() && r <= T::one()) {
                return Err(Error::Config("EMA retentions must lie in (0, 1]".into()));
            }
        }
        Ok(())
    }
}

/// Per-step diagnostics and the gated penalty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlOutput<T> {
    pub penalty: T,
    pub tau_t: T,
    pub phase: Phase,
    pub multiplier: T,
    pub gate: T,
    pub kl_short: T,
    pub kl_long: T,
    pub pid_error: T,
    pub pid_output: T,
    pub integral: T,
}

/// Mutable state of the entropy-aware controller apart from the KL EMAs,
/// which live in the shared [`KlTracker`].
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyAwareController<T> {
    pub cfg: ControllerConfig<T>,
    pub pid: PidState<T>,
    pub phase: PhaseState<T>,
}

impl<T: Scalar> EntropyAwareController<T> {
    pub fn new(cfg: ControllerConfig<T>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            pid: PidState::new(cfg.pid)?,
            phase: PhaseState::new(cfg.phase)?,
            cfg,
        })
    }

    /// A KL tracker whose EMA retentions match this controller.
    pub fn make_tracker(&self, window_w: usize) -> KlTracker<T> {
        KlTracker::with_retention(window_w, self.cfg.kl_short_retention, self.cfg.kl_long_retention)
    }

    /// One controller step, in order: KL EMAs, PID, phase, threshold, gated penalty.
    pub fn step(&mut self, tracker: &mut KlTracker<T>, d_hat: T, entropy: T, reward: T) -> Result<ControlOutput<T>> {
        let (kl_short, kl_long) = tracker.update_emas(d_hat)?;
        let pid = self.pid.step(reward)?;
        let (phase, multiplier) = self.phase.detect(reward)?;
        let tau_t = adaptive_threshold(pid.output, &self.cfg.threshold, multiplier);
        let gated = gated_kl_terms(kl_short, tau_t, entropy, &self.cfg.gate)?;
        Ok(ControlOutput {
            penalty: gated.value,
            tau_t,
            phase,
            multiplier,
            gate: gated.gate,
            kl_short,
            kl_long,
            pid_error: pid.error,
            pid_output: pid.output,
            integral: self.pid.integral,
        })
    }
}
