//! Twin linear value heads aggregated by a differentiable soft-min.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RunningMoments;
use crate::scalar::Scalar;

/// `-alpha * ln(0.5 * (exp(-v1/alpha) + exp(-v2/alpha)))`.
///
/// Evaluated as `min + alpha*ln2 - alpha*ln(1 + exp(-|v1-v2|/alpha))`, which never
/// exponentiates a positive argument.
pub fn soft_min<T: Scalar>(v1: T, v2: T, alpha: T) -> Result<T> {
    if !(v1.is_finite() && v2.is_finite() && alpha.is_finite()) {
        return Err(Error::NonFinite("soft_min"));
    }
    if alpha <= T::zero() {
        return Err(Error::Config(format!("soft-min temperature must be positive, got {alpha}")));
    }
    let lo = v1.min(v2);
    let gap = (v1 - v2).abs();
    let ln2 = T::lit(std::f64::consts::LN_2);
    let bias = alpha * ln2 - alpha * (-gap / alpha).exp().ln_1p();
    // rounding can push the bias a hair outside [0, alpha*ln2]
    Ok(lo + bias.max(T::zero()).min(alpha * ln2))
}

/// Partial derivatives of [`soft_min`] with respect to `(v1, v2)`; they sum to one.
pub fn soft_min_weights<T: Scalar>(v1: T, v2: T, alpha: T) -> (T, T) {
    let z = (v1 - v2) / alpha;
    // w1 = 1 / (1 + exp(z)), computed on the side that cannot overflow
    let w1 = if z >= T::zero() {
        let e = (-z).exp();
        e / (T::one() + e)
    } else {
        T::one() / (T::one() + z.exp())
    };
    (w1, T::one() - w1)
}

/// Huber penalty on a residual.
pub fn huber<T: Scalar>(err: T, delta: T) -> T {
    let a = err.abs();
    if a <= delta {
        T::lit(0.5) * err * err
    } else {
        delta * (a - T::lit(0.5) * delta)
    }
}

/// Derivative of [`huber`] with respect to the residual.
pub fn huber_grad<T: Scalar>(err: T, delta: T) -> T {
    if err.abs() <= delta {
        err
    } else {
        delta * err.signum()
    }
}

/// `old + clip(v - old, -radius, radius)`.
pub fn clipped_value<T: Scalar>(v: T, old: T, radius: T) -> T {
    old + (v - old).max(-radius).min(radius)
}

/// Average of the Huber losses of the soft-min prediction and its clipped counterpart.
pub fn huber_value_loss<T: Scalar>(v_soft: T, v_clip: T, target: T, delta: T) -> T {
    T::lit(0.5) * (huber(v_soft - target, delta) + huber(v_clip - target, delta))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CriticConfig {
    pub softmin_alpha: f64,
    pub polyak_tau: f64,
    pub huber_delta: f64,
    /// Radius for the PPO-style clipped value prediction.
    pub value_clip: f64,
    /// Bootstrap advantages from the Polyak targets instead of the online heads.
    pub use_target_for_advantages: bool,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self {
            softmin_alpha: 0.1,
            polyak_tau: 0.005,
            huber_delta: 1.0,
            value_clip: 0.2,
            use_target_for_advantages: false,
        }
    }
}

impl CriticConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.softmin_alpha > 0.0) {
            return Err(Error::Config("critic.softmin_alpha must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.polyak_tau) {
            return Err(Error::Config("critic.polyak_tau must lie in [0, 1]".into()));
        }
        if !(self.huber_delta > 0.0) {
            return Err(Error::Config("critic.huber_delta must be positive".into()));
        }
        if !(self.value_clip > 0.0) {
            return Err(Error::Config("critic.value_clip must be positive".into()));
        }
        Ok(())
    }
}

/// One linear value head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearHead<T> {
    pub weights: Vec<T>,
    pub bias: T,
}

impl<T: Scalar> LinearHead<T> {
    pub fn zeros(dim: usize) -> Self {
        Self {
            weights: vec![T::zero(); dim],
            bias: T::zero(),
        }
    }

    pub fn eval(&self, x: &[T]) -> T {
        self.weights.iter().zip(x).map(|(&w, &xi)| w * xi).sum::<T>() + self.bias
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn norm_sq(&self) -> T {
        self.weights.iter().map(|&w| w * w).sum::<T>() + self.bias * self.bias
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        for (w, &g) in self.weights.iter_mut().zip(&other.weights) {
            *w = *w + scale * g;
        }
        self.bias = self.bias + scale * other.bias;
    }

    fn polyak_towards(&mut self, online: &Self, tau: T) {
        let keep = T::one() - tau;
        for (t, &o) in self.weights.iter_mut().zip(&online.weights) {
            *t = keep * *t + tau * o;
        }
        self.bias = keep * self.bias + tau * online.bias;
    }
}

/// Per-feature running standardization feeding the value heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStandardizer<T> {
    moments: Vec<RunningMoments<T>>,
    epsilon: T,
}

impl<T: Scalar> FeatureStandardizer<T> {
    pub fn new(dim: usize, epsilon: T) -> Self {
        Self {
            moments: vec![RunningMoments::new(); dim],
            epsilon,
        }
    }

    pub fn observe(&mut self, x: &[T]) {
        for (m, &xi) in self.moments.iter_mut().zip(x) {
            m.push(xi);
        }
    }

    /// Features with zero observed variance are centered but not rescaled.
    pub fn transform(&self, x: &[T]) -> Vec<T> {
        self.moments
            .iter()
            .zip(x)
            .map(|(m, &xi)| {
                let var = m.variance();
                if var > T::zero() {
                    (xi - m.mean()) / (var.sqrt() + self.epsilon)
                } else {
                    xi - m.mean()
                }
            })
            .collect()
    }
}

/// Output of the twin critic for a single state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValueEstimate<T> {
    pub v1: T,
    pub v2: T,
    pub v_soft: T,
}

/// Gradient of a scalar loss with respect to both online heads.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticGrad<T> {
    pub head_a: LinearHead<T>,
    pub head_b: LinearHead<T>,
}

impl<T: Scalar> CriticGrad<T> {
    pub fn zeros(dim: usize) -> Self {
        Self {
            head_a: LinearHead::zeros(dim),
            head_b: LinearHead::zeros(dim),
        }
    }

    pub fn norm(&self) -> T {
        (self.head_a.norm_sq() + self.head_b.norm_sq()).sqrt()
    }

    pub fn scale(&mut self, s: T) {
        for head in [&mut self.head_a, &mut self.head_b] {
            for w in head.weights.iter_mut() {
                *w = *w * s;
            }
            head.bias = head.bias * s;
        }
    }
}

/// Clipped Huber value loss over a batch, with its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueLoss<T> {
    pub loss: T,
    pub grad: CriticGrad<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticPair<T> {
    pub online_a: LinearHead<T>,
    pub online_b: LinearHead<T>,
    pub target_a: LinearHead<T>,
    pub target_b: LinearHead<T>,
    pub softmin_alpha: T,
    pub polyak_tau: T,
    pub standardizer: FeatureStandardizer<T>,
}

impl<T: Scalar> CriticPair<T> {
    /// Targets start as copies of the online heads.
    pub fn new(head_a: LinearHead<T>, head_b: LinearHead<T>, softmin_alpha: T, polyak_tau: T) -> Result<Self> {
        if head_a.dim() != head_b.dim() {
            return Err(Error::LengthMismatch {
                op: "CriticPair::new",
                left: head_a.dim(),
                right: head_b.dim(),
            });
        }
        if !(softmin_alpha > T::zero()) {
            return Err(Error::Config("soft-min temperature must be positive".into()));
        }
        if !(polyak_tau >= T::zero() && polyak_tau <= T::one()) {
            return Err(Error::Config("polyak tau must lie in [0, 1]".into()));
        }
        let dim = head_a.dim();
        Ok(Self {
            target_a: head_a.clone(),
            target_b: head_b.clone(),
            online_a: head_a,
            online_b: head_b,
            softmin_alpha,
            polyak_tau,
            standardizer: FeatureStandardizer::new(dim, T::lit(1e-8)),
        })
    }

    pub fn zeros(dim: usize, softmin_alpha: T, polyak_tau: T) -> Result<Self> {
        Self::new(LinearHead::zeros(dim), LinearHead::zeros(dim), softmin_alpha, polyak_tau)
    }

    pub fn dim(&self) -> usize {
        self.online_a.dim()
    }

    /// Evaluate on features that have already been standardized.
    pub fn predict_standardized(&self, x: &[T], use_target: bool) -> Result<ValueEstimate<T>> {
        if x.len() != self.dim() {
            return Err(Error::LengthMismatch {
                op: "CriticPair::predict",
                left: x.len(),
                right: self.dim(),
            });
        }
        let (a, b) = if use_target {
            (&self.target_a, &self.target_b)
        } else {
            (&self.online_a, &self.online_b)
        };
        let v1 = a.eval(x);
        let v2 = b.eval(x);
        Ok(ValueEstimate {
            v1,
            v2,
            v_soft: soft_min(v1, v2, self.softmin_alpha)?,
        })
    }

    /// Standardize raw features, then evaluate both heads.
    pub fn predict(&self, features: &[T], use_target: bool) -> Result<ValueEstimate<T>> {
        if features.len() != self.dim() {
            return Err(Error::LengthMismatch {
                op: "CriticPair::predict",
                left: features.len(),
                right: self.dim(),
            });
        }
        self.predict_standardized(&self.standardizer.transform(features), use_target)
    }

    /// `target <- (1 - tau) * target + tau * online` for both heads.
    pub fn polyak_update(&mut self) {
        let tau = self.polyak_tau;
        self.target_a.polyak_towards(&self.online_a, tau);
        self.target_b.polyak_towards(&self.online_b, tau);
    }

    /// Batch mean of [`huber_value_loss`] and its gradient wrt the online heads.
    ///
    /// `x` holds standardized features, `v_old` the pre-update soft-min
    /// predictions used as the clipping anchor.
    pub fn value_loss(
        &self,
        x: &[Vec<T>],
        targets: &[T],
        v_old: &[T],
        delta: T,
        clip_radius: T,
    ) -> Result<ValueLoss<T>> {
        if x.len() != targets.len() || x.len() != v_old.len() {
            return Err(Error::LengthMismatch {
                op: "CriticPair::value_loss",
                left: x.len(),
                right: targets.len().min(v_old.len()),
            });
        }
        if x.is_empty() {
            return Err(Error::EmptyBatch("value_loss"));
        }
        let n = T::from_usize_lossy(x.len());
        let mut loss = T::zero();
        let mut grad = CriticGrad::zeros(self.dim());
        for ((xi, &target), &old) in x.iter().zip(targets).zip(v_old) {
            let est = self.predict_standardized(xi, false)?;
            let v_clip = clipped_value(est.v_soft, old, clip_radius);
            loss = loss + huber_value_loss(est.v_soft, v_clip, target, delta);

            let inside = (est.v_soft - old).abs() < clip_radius;
            let mut dl_dsoft = huber_grad(est.v_soft - target, delta);
            if inside {
                dl_dsoft = dl_dsoft + huber_grad(v_clip - target, delta);
            }
            dl_dsoft = T::lit(0.5) * dl_dsoft / n;
            let (w1, w2) = soft_min_weights(est.v1, est.v2, self.softmin_alpha);
            let ga = dl_dsoft * w1;
            let gb = dl_dsoft * w2;
            for (k, &xk) in xi.iter().enumerate() {
                grad.head_a.weights[k] = grad.head_a.weights[k] + ga * xk;
                grad.head_b.weights[k] = grad.head_b.weights[k] + gb * xk;
            }
            grad.head_a.bias = grad.head_a.bias + ga;
            grad.head_b.bias = grad.head_b.bias + gb;
        }
        Ok(ValueLoss { loss: loss / n, grad })
    }
}
