//! Multi-layer stabilization for on-policy RLHF-style training: a pessimistic
//! twin critic, asymmetric and entropy-gated KL control with a PID-adapted
//! threshold, and a small simulator that exercises the whole stack.
//!
//! The control and loss math is generic over [`Scalar`] (`f32` or `f64`); the
//! simulator runs in `f64`. Concrete aliases for the common case are exported
//! at the crate root.

pub mod control;
pub mod critic;
pub mod divergence;
pub mod env;
pub mod error;
pub mod numerics;
pub mod objective;
pub mod scalar;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Ema64 = numerics::Ema<f64>;
pub type RunningMoments64 = numerics::RunningMoments<f64>;
pub type RollingWindow64 = numerics::RollingWindow<f64>;
pub type CriticPair64 = critic::CriticPair<f64>;
pub type KlTracker64 = divergence::KlTracker<f64>;
pub type AsymConfig64 = divergence::AsymConfig<f64>;
pub type ControllerConfig64 = control::ControllerConfig<f64>;
pub type EntropyAwareController64 = control::EntropyAwareController<f64>;
pub type PenaltyBreakdown64 = objective::PenaltyBreakdown<f64>;

pub type Ema32 = numerics::Ema<f32>;
pub type CriticPair32 = critic::CriticPair<f32>;
pub type KlTracker32 = divergence::KlTracker<f32>;

pub use env::{Environment, SoftmaxPolicy, SyntheticRewardModel};
pub use trainer::{run, Mode, RunConfig, RunError, RunOutput, TraceRecord, Trainer, TrainingTrace};
