//! Training loop for the desk-scale environment: rollout, reward
//! normalization, pessimistic advantages, PPO epochs with the configured KL
//! controls, and Polyak target updates. Policy gradients are closed-form.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::control::{gated_kl_terms, preview_scale, ControllerConfig, EntropyAwareController, EntropyGateConfig, Phase};
use crate::critic::{CriticConfig, CriticPair};
use crate::divergence::{akl_terms, estimate_kl, AsymConfig, KlTracker};
use crate::env::{rollout, EnvConfig, Environment, Rollout, SoftmaxPolicy};
use crate::error::{Error, Result};
use crate::numerics::{Ema, ReportConfig, RunningMoments, StabilityReport};
use crate::objective::{compute_advantages, normalize_rewards, ppo_terms, total_loss, LossComponents};

const STREAM_ENV: u64 = 1;
const STREAM_ROLLOUT: u64 = 2;
const STREAM_REWARD: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Clipped surrogate, value loss, and entropy bonus only.
    Ppo,
    /// Adds the asymmetric KL and momentum penalties at a fixed threshold.
    AsymKl,
    /// Adds the entropy-gated penalty at the adaptive threshold on top of `AsymKl`.
    Safe,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Ppo, Mode::AsymKl, Mode::Safe];

    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Ppo => "ppo",
            Mode::AsymKl => "asym-kl",
            Mode::Safe => "safe",
        }
    }

    fn uses_asym(&self) -> bool {
        matches!(self, Mode::AsymKl | Mode::Safe)
    }

    fn uses_gate(&self) -> bool {
        matches!(self, Mode::Safe)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ppo" => Ok(Mode::Ppo),
            "asym-kl" => Ok(Mode::AsymKl),
            "safe" => Ok(Mode::Safe),
            other => Err(Error::Config(format!("unknown mode '{other}' (expected ppo, asym-kl, or safe)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    /// Rollout batches concatenated into each update.
    pub grad_accumulation: usize,
    pub ppo_epochs: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub critic_learning_rate: f64,
    pub grad_clip_policy: f64,
    pub grad_clip_critic: f64,
    pub ppo_epsilon: f64,
    /// Entropy bonus coefficient.
    pub beta: f64,
    pub env: EnvConfig,
    pub critic: CriticConfig,
    pub asym: AsymConfig<f64>,
    pub controller: ControllerConfig<f64>,
    pub report: ReportConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Safe,
            steps: 2000,
            batch_size: 16,
            seq_len: 24,
            grad_accumulation: 1,
            ppo_epochs: 2,
            seed: 0,
            learning_rate: 1e-2,
            critic_learning_rate: 1e-2,
            grad_clip_policy: 1.0,
            grad_clip_critic: 0.5,
            ppo_epsilon: 0.2,
            beta: 0.01,
            env: EnvConfig::default(),
            critic: CriticConfig::default(),
            asym: AsymConfig::default(),
            controller: ControllerConfig::default(),
            report: ReportConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.seq_len == 0 || self.grad_accumulation == 0 || self.ppo_epochs == 0 {
            return Err(Error::Config(
                "batch_size, seq_len, grad_accumulation and ppo_epochs must be positive".into(),
            ));
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("critic_learning_rate", self.critic_learning_rate),
            ("grad_clip_policy", self.grad_clip_policy),
            ("grad_clip_critic", self.grad_clip_critic),
            ("ppo_epsilon", self.ppo_epsilon),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config("beta must be nonnegative".into()));
        }
        self.env.validate()?;
        self.critic.validate()?;
        self.asym.validate()?;
        self.controller.validate()?;
        Ok(())
    }
}

/// One logged training step. Loss terms are evaluated at the pre-update
/// parameters of the step, so they decompose exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub step: usize,
    pub mean_reward: f64,
    pub kl_raw: f64,
    pub kl_short: f64,
    pub kl_long: f64,
    pub tau_t: f64,
    pub phase: Phase,
    pub entropy: f64,
    pub value_loss: f64,
    pub l_ppo: f64,
    pub l_value: f64,
    pub l_kl: f64,
    pub l_gated: f64,
    pub l_asym: f64,
    pub l_mom: f64,
    pub entropy_bonus: f64,
    pub l_total: f64,
    pub gate: f64,
    pub pid_integral: f64,
    pub completion_length: f64,
    pub preview_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub records: Vec<TraceRecord>,
}

impl TrainingTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn push(&mut self, record: TraceRecord) {
        debug_assert!(self.records.last().map_or(true, |r| r.step < record.step));
        self.records.push(record);
    }

    pub fn column(&self, f: impl Fn(&TraceRecord) -> f64) -> Vec<f64> {
        self.records.iter().map(f).collect()
    }

    pub fn report(&self, cfg: &ReportConfig) -> StabilityReport {
        StabilityReport::from_series(
            &self.column(|r| r.mean_reward),
            &self.column(|r| r.kl_raw),
            &self.column(|r| r.value_loss),
            cfg,
        )
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("invalid configuration: {0}")]
    Config(Error),
    #[error("run diverged at step {step}: {source}")]
    Diverged {
        step: usize,
        source: Error,
        /// Records completed before the failing step.
        partial: Box<TrainingTrace>,
    },
}

/// Frozen per-step data the policy loss is evaluated on.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyBatch {
    pub features: Vec<Vec<f64>>,
    pub tokens: Vec<Vec<usize>>,
    pub logp_old: Vec<Vec<f64>>,
    pub logp_ref: Vec<Vec<f64>>,
    /// One standardized advantage per sequence, shared by its tokens.
    pub advantages: Vec<f64>,
}

impl PolicyBatch {
    pub fn token_count(&self) -> usize {
        self.tokens.iter().map(Vec::len).sum()
    }
}

/// Asymmetric penalty with its lagged estimate held fixed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AsymPlan {
    pub cfg: AsymConfig<f64>,
    pub lagged: Option<f64>,
}

/// Gated penalty with the threshold and the previous short EMA held fixed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GatedPlan {
    pub tau_t: f64,
    pub short_ema: Ema<f64>,
    pub gate: EntropyGateConfig<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltyPlan {
    pub ppo_epsilon: f64,
    pub asym: Option<AsymPlan>,
    pub gated: Option<GatedPlan>,
}

/// Policy-side loss terms and their gradients wrt the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyEval {
    pub l_ppo: f64,
    pub clip_fraction: f64,
    pub entropy: f64,
    /// Importance-weighted KL estimate; equals the plain estimate at the rollout parameters.
    pub kl: f64,
    pub kl_smoothed: f64,
    pub l_asym: f64,
    pub l_mom: f64,
    pub l_gated: f64,
    pub gate: f64,
    pub grad_ppo: Vec<f64>,
    pub grad_entropy: Vec<f64>,
    pub grad_kl: Vec<f64>,
    pub grad_akl: Vec<f64>,
    pub grad_gated: Vec<f64>,
}

impl PolicyEval {
    /// `l_ppo + l_kl - beta * entropy`.
    pub fn loss(&self, beta: f64) -> f64 {
        self.l_ppo + (self.l_gated + (self.l_asym + self.l_mom)) - beta * self.entropy
    }

    pub fn grad(&self, beta: f64) -> Vec<f64> {
        (0..self.grad_ppo.len())
            .map(|k| self.grad_ppo[k] - beta * self.grad_entropy[k] + self.grad_akl[k] + self.grad_gated[k])
            .collect()
    }
}

fn add_outer(grad: &mut [f64], u: &[f64], x: &[f64]) {
    let f = x.len();
    for (row, &uv) in grad.chunks_exact_mut(f).zip(u) {
        if uv != 0.0 {
            for (g, &xf) in row.iter_mut().zip(x) {
                *g += uv * xf;
            }
        }
    }
}

/// Evaluate the policy loss terms at `policy` on a frozen batch.
pub fn evaluate_policy(policy: &SoftmaxPolicy, batch: &PolicyBatch, plan: &PenaltyPlan) -> Result<PolicyEval> {
    let b = batch.tokens.len();
    if b == 0 {
        return Err(Error::EmptyBatch("evaluate_policy"));
    }
    let n_tok = batch.token_count();
    let nf = n_tok as f64;
    let dim = policy.weights.len();

    let log_probs: Vec<Vec<f64>> = batch.features.iter().map(|x| policy.log_probs(x)).collect();
    let mut logp_new = Vec::with_capacity(n_tok);
    let mut logp_old = Vec::with_capacity(n_tok);
    let mut adv = Vec::with_capacity(n_tok);
    for i in 0..b {
        for (&a, &old) in batch.tokens[i].iter().zip(&batch.logp_old[i]) {
            logp_new.push(log_probs[i][a]);
            logp_old.push(old);
            adv.push(batch.advantages[i]);
        }
    }
    let ppo = ppo_terms(&logp_new, &logp_old, &adv, plan.ppo_epsilon)?;

    let mut grad_ppo = vec![0.0; dim];
    let mut grad_kl = vec![0.0; dim];
    let mut grad_entropy = vec![0.0; dim];
    let mut entropy = 0.0;
    let mut kl = 0.0;
    let mut tok = 0;
    let mut u_ppo = vec![0.0; policy.vocab_size];
    let mut u_kl = vec![0.0; policy.vocab_size];
    for i in 0..b {
        let lp = &log_probs[i];
        let probs: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
        let h_i = crate::env::entropy_from_log_probs(lp);
        entropy += h_i;

        u_ppo.iter_mut().for_each(|u| *u = 0.0);
        u_kl.iter_mut().for_each(|u| *u = 0.0);
        let (mut c_ppo_sum, mut c_kl_sum) = (0.0, 0.0);
        for (&a, &lref) in batch.tokens[i].iter().zip(&batch.logp_ref[i]) {
            let ratio = (logp_new[tok] - logp_old[tok]).exp();
            let log_ratio_ref = logp_new[tok] - lref;
            kl += ratio * log_ratio_ref;
            let c_kl = ratio * (1.0 + log_ratio_ref) / nf;
            let c_ppo = ppo.d_logp_new[tok];
            u_ppo[a] += c_ppo;
            u_kl[a] += c_kl;
            c_ppo_sum += c_ppo;
            c_kl_sum += c_kl;
            tok += 1;
        }
        for v in 0..policy.vocab_size {
            u_ppo[v] -= c_ppo_sum * probs[v];
            u_kl[v] -= c_kl_sum * probs[v];
        }
        add_outer(&mut grad_ppo, &u_ppo, &batch.features[i]);
        add_outer(&mut grad_kl, &u_kl, &batch.features[i]);

        let u_h: Vec<f64> = probs
            .iter()
            .zip(lp)
            .map(|(&p, &l)| if p > 0.0 { -p * (l + h_i) / b as f64 } else { 0.0 })
            .collect();
        add_outer(&mut grad_entropy, &u_h, &batch.features[i]);
    }
    entropy /= b as f64;
    kl /= nf;
    if !kl.is_finite() || !entropy.is_finite() {
        return Err(Error::NonFinite("evaluate_policy"));
    }

    let (l_asym, l_mom, grad_akl) = match plan.asym {
        Some(ap) => {
            let t = akl_terms(kl, ap.lagged, &ap.cfg);
            (t.l_asym, t.l_mom, grad_kl.iter().map(|g| t.slope * g).collect())
        }
        None => (0.0, 0.0, vec![0.0; dim]),
    };
    let (l_gated, gate, kl_smoothed, grad_gated) = match plan.gated {
        Some(gp) => {
            let smoothed = gp.short_ema.peek(kl);
            let d_smoothed = if gp.short_ema.is_initialized() {
                1.0 - gp.short_ema.retention()
            } else {
                1.0
            };
            let t = gated_kl_terms(smoothed, gp.tau_t, entropy, &gp.gate)?;
            let dk = t.d_kl * d_smoothed;
            let g = grad_kl
                .iter()
                .zip(&grad_entropy)
                .map(|(gk, gh)| dk * gk + t.d_entropy * gh)
                .collect();
            (t.value, t.gate, smoothed, g)
        }
        None => (0.0, 1.0, kl, vec![0.0; dim]),
    };

    Ok(PolicyEval {
        l_ppo: ppo.loss,
        clip_fraction: ppo.clip_fraction,
        entropy,
        kl,
        kl_smoothed,
        l_asym,
        l_mom,
        l_gated,
        gate,
        grad_ppo,
        grad_entropy,
        grad_kl,
        grad_akl,
        grad_gated,
    })
}

/// Rescale `g` in place to norm `clip` if it is longer; returns the pre-clip norm.
pub fn clip_grad_norm(g: &mut [f64], clip: f64) -> f64 {
    let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > clip {
        let s = clip / norm;
        g.iter_mut().for_each(|x| *x *= s);
    }
    norm
}

/// Mutable training state for one run.
#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: RunConfig,
    env: Environment,
    policy: SoftmaxPolicy,
    critic: CriticPair<f64>,
    reward_moments: RunningMoments<f64>,
    tracker: KlTracker<f64>,
    controller: EntropyAwareController<f64>,
    rollout_rng: ChaCha8Rng,
    reward_rng: ChaCha8Rng,
    step: usize,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut env_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        env_rng.set_stream(STREAM_ENV);
        let env = Environment::build(&cfg.env, &mut env_rng)?;
        let mut rollout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rollout_rng.set_stream(STREAM_ROLLOUT);
        let mut reward_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        reward_rng.set_stream(STREAM_REWARD);
        let controller = EntropyAwareController::new(cfg.controller)?;
        let tracker = controller.make_tracker(cfg.asym.window_w);
        Ok(Self {
            policy: env.reference.clone(),
            critic: CriticPair::zeros(cfg.env.feature_dim, cfg.critic.softmin_alpha, cfg.critic.polyak_tau)?,
            reward_moments: RunningMoments::new(),
            tracker,
            controller,
            rollout_rng,
            reward_rng,
            step: 0,
            env,
            cfg,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn policy(&self) -> &SoftmaxPolicy {
        &self.policy
    }

    pub fn environment(&self) -> &Environment {
        &self.env
    }

    pub fn critic(&self) -> &CriticPair<f64> {
        &self.critic
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    fn sample_rollout(&mut self) -> Result<Rollout> {
        let n = self.cfg.batch_size * self.cfg.grad_accumulation;
        let c = self.env.contexts.len();
        let batch: Vec<usize> = (0..n).map(|_| self.rollout_rng.random_range(0..c)).collect();
        rollout(
            &self.policy,
            &self.env.reference,
            &self.env.contexts,
            &batch,
            self.cfg.seq_len,
            &mut self.rollout_rng,
        )
    }

    /// Execute one full training step and return its trace record.
    pub fn safe_step(&mut self) -> Result<TraceRecord> {
        let cfg = self.cfg.clone();
        let ro = self.sample_rollout()?;
        let rewards: Vec<f64> = ro
            .tokens
            .iter()
            .map(|t| self.env.reward_model.score(t, &mut self.reward_rng))
            .collect();
        let mean_reward = crate::scalar::mean(&rewards);
        let rewards_norm = normalize_rewards(&mut self.reward_moments, &rewards)?;
        let kl_raw = estimate_kl(&ro.kl_samples())?;

        let raw_features: Vec<&[f64]> = ro.contexts.iter().map(|&c| self.env.contexts.get(c)).collect();
        for x in &raw_features {
            self.critic.standardizer.observe(x);
        }
        let x_std: Vec<Vec<f64>> = raw_features.iter().map(|x| self.critic.standardizer.transform(x)).collect();
        let mut v_adv = Vec::with_capacity(x_std.len());
        let mut v_old = Vec::with_capacity(x_std.len());
        for x in &x_std {
            v_adv.push(self.critic.predict_standardized(x, cfg.critic.use_target_for_advantages)?.v_soft);
            v_old.push(self.critic.predict_standardized(x, false)?.v_soft);
        }
        let (_, adv_std) = compute_advantages(&rewards_norm, &v_adv)?;

        let short_before = self.tracker.short;
        self.tracker.push_history(kl_raw);
        let ctrl = self.controller.step(&mut self.tracker, kl_raw, ro.entropy, mean_reward)?;
        let plan = PenaltyPlan {
            ppo_epsilon: cfg.ppo_epsilon,
            asym: cfg.mode.uses_asym().then(|| AsymPlan {
                cfg: cfg.asym,
                lagged: self.tracker.lagged(cfg.asym.window_w),
            }),
            gated: cfg.mode.uses_gate().then(|| GatedPlan {
                tau_t: ctrl.tau_t,
                short_ema: short_before,
                gate: cfg.controller.gate,
            }),
        };

        let batch = PolicyBatch {
            features: raw_features.iter().map(|x| x.to_vec()).collect(),
            tokens: ro.tokens,
            logp_old: ro.logp_policy,
            logp_ref: ro.logp_ref,
            advantages: adv_std,
        };

        let mut logged = None;
        for epoch in 0..cfg.ppo_epochs {
            let eval = evaluate_policy(&self.policy, &batch, &plan)?;
            let value = self
                .critic
                .value_loss(&x_std, &rewards_norm, &v_old, cfg.critic.huber_delta, cfg.critic.value_clip)?;
            let breakdown = total_loss(
                &LossComponents {
                    l_ppo: eval.l_ppo,
                    l_value: value.loss,
                    l_gated: eval.l_gated,
                    l_asym: eval.l_asym,
                    l_mom: eval.l_mom,
                    entropy: eval.entropy,
                },
                cfg.beta,
            )?;

            let mut g_pol = eval.grad(cfg.beta);
            clip_grad_norm(&mut g_pol, cfg.grad_clip_policy);
            let mut scale = 1.0;
            if cfg.controller.preview.enabled {
                let mut ahead = self.policy.clone();
                for (w, g) in ahead.weights.iter_mut().zip(&g_pol) {
                    *w -= cfg.learning_rate * g;
                }
                let preview = evaluate_policy(&ahead, &batch, &plan)?;
                scale = preview_scale(preview.kl, &cfg.controller.preview)?;
            }
            for (w, g) in self.policy.weights.iter_mut().zip(&g_pol) {
                *w -= cfg.learning_rate * scale * g;
            }

            let mut g_val = value.grad;
            let norm = g_val.norm();
            if norm > cfg.grad_clip_critic {
                g_val.scale(cfg.grad_clip_critic / norm);
            }
            self.critic.online_a.add_scaled(&g_val.head_a, -cfg.critic_learning_rate);
            self.critic.online_b.add_scaled(&g_val.head_b, -cfg.critic_learning_rate);

            if epoch == 0 {
                logged = Some((eval, value.loss, breakdown, scale));
            }
        }
        if self.policy.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("policy weights"));
        }
        self.critic.polyak_update();

        let (eval, value_loss, bd, scale) = logged.expect("at least one epoch");
        let record = TraceRecord {
            step: self.step,
            mean_reward,
            kl_raw,
            kl_short: ctrl.kl_short,
            kl_long: ctrl.kl_long,
            tau_t: ctrl.tau_t,
            phase: ctrl.phase,
            entropy: eval.entropy,
            value_loss,
            l_ppo: bd.l_ppo,
            l_value: bd.l_value,
            l_kl: bd.l_kl,
            l_gated: bd.l_gated,
            l_asym: bd.l_asym,
            l_mom: bd.l_mom,
            entropy_bonus: bd.entropy_bonus,
            l_total: bd.l_total,
            gate: ctrl.gate,
            pid_integral: ctrl.integral,
            completion_length: cfg.seq_len as f64,
            preview_scale: scale,
        };
        self.step += 1;
        Ok(record)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub trace: TrainingTrace,
    pub report: StabilityReport,
}

/// Run `cfg.steps` training steps from a fresh state.
pub fn run(cfg: &RunConfig) -> std::result::Result<RunOutput, RunError> {
    let mut trainer = Trainer::new(cfg.clone()).map_err(RunError::Config)?;
    let mut trace = TrainingTrace::default();
    for _ in 0..cfg.steps {
        match trainer.safe_step() {
            Ok(rec) => trace.push(rec),
            Err(source) => {
                return Err(RunError::Diverged {
                    step: trainer.steps_done(),
                    source,
                    partial: Box::new(trace),
                })
            }
        }
    }
    let report = trace.report(&cfg.report);
    Ok(RunOutput { trace, report })
}
