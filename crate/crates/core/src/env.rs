//! Desk-scale generation environment: a linear-softmax token policy over a
//! fixed set of context feature vectors, and a synthetic reward model with an
//! optional exploitable artifact token.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::divergence::KlSample;
use crate::error::{Error, Result};

/// Token policy with `logits = weights · features`; weights are row-major `[V × F]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxPolicy {
    pub weights: Vec<f64>,
    pub vocab_size: usize,
    pub feature_dim: usize,
}

impl SoftmaxPolicy {
    pub fn zeros(vocab_size: usize, feature_dim: usize) -> Self {
        Self {
            weights: vec![0.0; vocab_size * feature_dim],
            vocab_size,
            feature_dim,
        }
    }

    pub fn from_weights(weights: Vec<f64>, vocab_size: usize, feature_dim: usize) -> Result<Self> {
        if weights.len() != vocab_size * feature_dim {
            return Err(Error::LengthMismatch {
                op: "SoftmaxPolicy::from_weights",
                left: weights.len(),
                right: vocab_size * feature_dim,
            });
        }
        Ok(Self {
            weights,
            vocab_size,
            feature_dim,
        })
    }

    pub fn logits(&self, features: &[f64]) -> Vec<f64> {
        debug_assert_eq!(features.len(), self.feature_dim);
        self.weights
            .chunks_exact(self.feature_dim)
            .map(|row| row.iter().zip(features).map(|(w, x)| w * x).sum())
            .collect()
    }

    pub fn log_probs(&self, features: &[f64]) -> Vec<f64> {
        log_softmax(&self.logits(features))
    }

    pub fn probs(&self, features: &[f64]) -> Vec<f64> {
        self.log_probs(features).into_iter().map(f64::exp).collect()
    }

    pub fn entropy(&self, features: &[f64]) -> f64 {
        entropy_from_log_probs(&self.log_probs(features))
    }

    pub fn norm(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum::<f64>().sqrt()
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// Shannon entropy in nats; zero-probability entries contribute nothing.
pub fn entropy_from_log_probs(log_probs: &[f64]) -> f64 {
    let h: f64 = log_probs
        .iter()
        .map(|&lp| {
            let p = lp.exp();
            if p > 0.0 {
                -p * lp
            } else {
                0.0
            }
        })
        .sum();
    h.max(0.0)
}

/// Fixed context feature vectors. The first feature of every context is a
/// constant 1, so column 0 of the policy weights acts as a shared bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextSet {
    pub features: Vec<Vec<f64>>,
}

impl ContextSet {
    pub fn generate<R: Rng + ?Sized>(count: usize, feature_dim: usize, scale: f64, rng: &mut R) -> Result<Self> {
        if count == 0 || feature_dim == 0 || !(scale > 0.0) {
            return Err(Error::Config("context count, feature dim, and scale must be positive".into()));
        }
        let normal = Normal::new(0.0, scale).expect("valid normal");
        let features = (0..count)
            .map(|_| {
                let mut x: Vec<f64> = (0..feature_dim).map(|_| normal.sample(rng)).collect();
                x[0] = 1.0;
                x
            })
            .collect();
        Ok(Self { features })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn get(&self, idx: usize) -> &[f64] {
        &self.features[idx]
    }
}

/// One batch of generated sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub contexts: Vec<usize>,
    pub tokens: Vec<Vec<usize>>,
    pub logp_policy: Vec<Vec<f64>>,
    pub logp_ref: Vec<Vec<f64>>,
    /// Mean per-token entropy of the sampling distributions.
    pub entropy: f64,
}

impl Rollout {
    pub fn kl_samples(&self) -> Vec<KlSample<f64>> {
        self.logp_policy
            .iter()
            .flatten()
            .zip(self.logp_ref.iter().flatten())
            .map(|(&logp_policy, &logp_ref)| KlSample { logp_policy, logp_ref })
            .collect()
    }

    pub fn token_count(&self) -> usize {
        self.tokens.iter().map(Vec::len).sum()
    }
}

/// Sample `seq_len` tokens for each requested context.
///
/// Context features are fixed for the whole sequence, so each position draws
/// from the same per-context distribution.
pub fn rollout<R: Rng + ?Sized>(
    policy: &SoftmaxPolicy,
    reference: &SoftmaxPolicy,
    contexts: &ContextSet,
    batch: &[usize],
    seq_len: usize,
    rng: &mut R,
) -> Result<Rollout> {
    if seq_len == 0 {
        return Err(Error::Config("seq_len must be at least 1".into()));
    }
    if batch.is_empty() {
        return Err(Error::EmptyBatch("rollout"));
    }
    let mut tokens = Vec::with_capacity(batch.len());
    let mut logp_policy = Vec::with_capacity(batch.len());
    let mut logp_ref = Vec::with_capacity(batch.len());
    let mut entropy = 0.0;
    for &c in batch {
        let x = contexts.get(c);
        let lp = policy.log_probs(x);
        let lr = reference.log_probs(x);
        if lp.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("rollout"));
        }
        entropy += entropy_from_log_probs(&lp);
        let probs: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
        let dist = WeightedIndex::new(&probs).map_err(|_| Error::NonFinite("rollout"))?;
        let seq: Vec<usize> = (0..seq_len).map(|_| dist.sample(rng)).collect();
        logp_policy.push(seq.iter().map(|&a| lp[a]).collect());
        logp_ref.push(seq.iter().map(|&a| lr[a]).collect());
        tokens.push(seq);
    }
    Ok(Rollout {
        contexts: batch.to_vec(),
        tokens,
        logp_policy,
        logp_ref,
        entropy: entropy / batch.len() as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticRewardModel {
    pub target_distribution: Vec<f64>,
    pub artifact_token: Option<usize>,
    pub artifact_bonus: f64,
    pub noise_std: f64,
    /// Weight on the total-variation distance in the base score.
    pub tv_weight: f64,
}

impl SyntheticRewardModel {
    pub fn new(
        target_distribution: Vec<f64>,
        artifact_token: Option<usize>,
        artifact_bonus: f64,
        noise_std: f64,
    ) -> Result<Self> {
        Self::with_tv_weight(target_distribution, artifact_token, artifact_bonus, noise_std, 0.5)
    }

    pub fn with_tv_weight(
        target_distribution: Vec<f64>,
        artifact_token: Option<usize>,
        artifact_bonus: f64,
        noise_std: f64,
        tv_weight: f64,
    ) -> Result<Self> {
        let total: f64 = target_distribution.iter().sum();
        if target_distribution.iter().any(|p| !(*p >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config("target distribution must be a probability vector".into()));
        }
        if let Some(a) = artifact_token {
            if a >= target_distribution.len() {
                return Err(Error::Config(format!("artifact token {a} outside the vocabulary")));
            }
        }
        if !(artifact_bonus >= 0.0) || !(noise_std >= 0.0) {
            return Err(Error::Config("artifact bonus and noise std must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&tv_weight) {
            return Err(Error::Config("tv_weight must lie in [0, 1]".into()));
        }
        Ok(Self {
            target_distribution,
            artifact_token,
            artifact_bonus,
            noise_std,
            tv_weight,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.target_distribution.len()
    }

    /// Noise-free reward: base score plus the artifact bonus.
    pub fn score_clean(&self, tokens: &[usize]) -> f64 {
        let base = self.base_score(tokens);
        base + self.artifact_term(tokens)
    }

    /// `1 - tv_weight·TV(p̂, q)` with `TV = ½·Σ|p̂ - q|`.
    pub fn base_score(&self, tokens: &[usize]) -> f64 {
        let n = tokens.len() as f64;
        let mut counts = vec![0usize; self.vocab_size()];
        for &t in tokens {
            counts[t] += 1;
        }
        let tv = 0.5
            * counts
                .iter()
                .zip(&self.target_distribution)
                .map(|(&c, &q)| (c as f64 / n - q).abs())
                .sum::<f64>();
        (1.0 - self.tv_weight * tv).clamp(0.0, 1.0)
    }

    fn artifact_term(&self, tokens: &[usize]) -> f64 {
        match self.artifact_token {
            Some(a) => {
                let hits = tokens.iter().filter(|&&t| t == a).count();
                self.artifact_bonus * hits as f64 / tokens.len() as f64
            }
            None => 0.0,
        }
    }

    pub fn score<R: Rng + ?Sized>(&self, tokens: &[usize], rng: &mut R) -> f64 {
        debug_assert!(!tokens.is_empty());
        let clean = self.score_clean(tokens);
        let noise = if self.noise_std > 0.0 {
            Normal::new(0.0, self.noise_std).expect("valid normal").sample(rng)
        } else {
            0.0
        };
        (clean + noise).clamp(0.0, 1.0 + self.artifact_bonus)
    }
}

/// Environment construction parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub num_contexts: usize,
    /// Tokens `0..target_support` carry the target mass.
    pub target_support: usize,
    /// Geometric ratio between consecutive target probabilities.
    pub target_decay: f64,
    pub artifact_token: Option<usize>,
    pub artifact_bonus: f64,
    pub noise_std: f64,
    /// Weight on the total-variation distance in the base score; 1 makes
    /// disjoint support score zero, 0.5 lets the artifact bonus outweigh
    /// the distribution mismatch it causes.
    pub tv_weight: f64,
    /// Std of the non-constant context features.
    pub feature_scale: f64,
    /// Weight of the target in the reference's shared-bias mixture with uniform.
    pub reference_target_mix: f64,
    /// Std of the context-specific reference weights.
    pub init_scale: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            feature_dim: 16,
            num_contexts: 8,
            target_support: 8,
            target_decay: 0.8,
            artifact_token: Some(0),
            artifact_bonus: 0.5,
            noise_std: 0.05,
            tv_weight: 0.5,
            feature_scale: 1.0,
            reference_target_mix: 0.5,
            init_scale: 0.1,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.feature_dim == 0 || self.num_contexts == 0 {
            return Err(Error::Config("env needs vocab_size >= 2 and positive feature_dim, num_contexts".into()));
        }
        if self.target_support == 0 || self.target_support > self.vocab_size {
            return Err(Error::Config("env.target_support must lie in 1..=vocab_size".into()));
        }
        if !(self.target_decay > 0.0) {
            return Err(Error::Config("env.target_decay must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.reference_target_mix) {
            return Err(Error::Config("env.reference_target_mix must lie in [0, 1]".into()));
        }
        if !(self.feature_scale > 0.0) {
            return Err(Error::Config("env.feature_scale must be positive".into()));
        }
        if !(self.init_scale >= 0.0) {
            return Err(Error::Config("env.init_scale must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn target_distribution(&self) -> Vec<f64> {
        let mut q = vec![0.0; self.vocab_size];
        let mut p = 1.0;
        for slot in q.iter_mut().take(self.target_support) {
            *slot = p;
            p *= self.target_decay;
        }
        let total: f64 = q.iter().sum();
        q.iter_mut().for_each(|x| *x /= total);
        q
    }

    pub fn reward_model(&self) -> Result<SyntheticRewardModel> {
        SyntheticRewardModel::with_tv_weight(
            self.target_distribution(),
            self.artifact_token,
            self.artifact_bonus,
            self.noise_std,
            self.tv_weight,
        )
    }
}

/// Everything a run needs that does not change during training.
#[derive(Debug, Clone, PartialEq)]
pub struct Environment {
    pub contexts: ContextSet,
    pub reference: SoftmaxPolicy,
    pub reward_model: SyntheticRewardModel,
}

impl Environment {
    /// Contexts and the reference policy are drawn from `rng`. The reference's
    /// bias column encodes `mix·target + (1 - mix)·uniform`.
    pub fn build<R: Rng + ?Sized>(cfg: &EnvConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let contexts = ContextSet::generate(cfg.num_contexts, cfg.feature_dim, cfg.feature_scale, rng)?;
        let q = cfg.target_distribution();
        let uniform = 1.0 / cfg.vocab_size as f64;
        let mut reference = SoftmaxPolicy::zeros(cfg.vocab_size, cfg.feature_dim);
        let noise = Normal::new(0.0, cfg.init_scale.max(f64::MIN_POSITIVE)).expect("valid normal");
        for (v, row) in reference.weights.chunks_exact_mut(cfg.feature_dim).enumerate() {
            row[0] = (cfg.reference_target_mix * q[v] + (1.0 - cfg.reference_target_mix) * uniform).ln();
            for w in row.iter_mut().skip(1) {
                *w = if cfg.init_scale > 0.0 { noise.sample(rng) } else { 0.0 };
            }
        }
        Ok(Self {
            contexts,
            reference,
            reward_model: cfg.reward_model()?,
        })
    }
}
