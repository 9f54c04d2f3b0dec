use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use safe_core::control::EntropyGateConfig;
use safe_core::divergence::AsymConfig;
use safe_core::env::{rollout, ContextSet, SoftmaxPolicy};
use safe_core::numerics::Ema;
use safe_core::trainer::{evaluate_policy, AsymPlan, GatedPlan, PenaltyPlan, PolicyBatch, PolicyEval};

const V: usize = 8;
const F: usize = 4;
const H: f64 = 1e-5;

struct Instance {
    old: SoftmaxPolicy,
    current: SoftmaxPolicy,
    batch: PolicyBatch,
}

fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.8).unwrap();
    let mut weights = || (0..V * F).map(|_| normal.sample(&mut rng)).collect::<Vec<f64>>();
    let old = SoftmaxPolicy::from_weights(weights(), V, F).unwrap();
    let reference = SoftmaxPolicy::from_weights(weights(), V, F).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000));
    let ctx = ContextSet::generate(3, F, 1.0, &mut rng).unwrap();
    let idx: Vec<usize> = (0..6).map(|_| rng.random_range(0..3)).collect();
    let ro = rollout(&old, &reference, &ctx, &idx, 7, &mut rng).unwrap();
    let mut current = old.clone();
    let step = Normal::new(0.0, 0.15).unwrap();
    current.weights.iter_mut().for_each(|w| *w += step.sample(&mut rng));
    Instance {
        old,
        current,
        batch: PolicyBatch {
            features: idx.iter().map(|&c| ctx.get(c).to_vec()).collect(),
            tokens: ro.tokens,
            logp_old: ro.logp_policy,
            logp_ref: ro.logp_ref,
            advantages: (0..6).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect(),
        },
    }
}

fn central_difference(policy: &SoftmaxPolicy, f: impl Fn(&SoftmaxPolicy) -> f64) -> Vec<f64> {
    (0..policy.weights.len())
        .map(|k| {
            let mut plus = policy.clone();
            plus.weights[k] += H;
            let mut minus = policy.clone();
            minus.weights[k] -= H;
            (f(&plus) - f(&minus)) / (2.0 * H)
        })
        .collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn check(inst: &Instance, plan: &PenaltyPlan, pick: impl Fn(&PolicyEval) -> (f64, Vec<f64>)) -> f64 {
    let eval = evaluate_policy(&inst.current, &inst.batch, plan).unwrap();
    let (_, analytic) = pick(&eval);
    let numeric = central_difference(&inst.current, |p| pick(&evaluate_policy(p, &inst.batch, plan).unwrap()).0);
    rel_err(&analytic, &numeric)
}

fn bare_plan() -> PenaltyPlan {
    PenaltyPlan {
        ppo_epsilon: 0.2,
        asym: None,
        gated: None,
    }
}

/// A plan whose thresholds sit below the instance's KL so every penalty is active.
fn active_plan(inst: &Instance) -> PenaltyPlan {
    let kl = evaluate_policy(&inst.current, &inst.batch, &bare_plan()).unwrap().kl;
    PenaltyPlan {
        ppo_epsilon: 0.2,
        asym: Some(AsymPlan {
            cfg: AsymConfig {
                tau: kl - 0.3,
                lambda_asym: 0.5,
                lambda_mom: 0.5,
                window_w: 4,
            },
            lagged: Some(kl - 0.8),
        }),
        gated: Some(GatedPlan {
            tau_t: kl - 0.2,
            short_ema: Ema::seeded(0.9, kl + 0.1).unwrap(),
            gate: EntropyGateConfig::default(),
        }),
    }
}

#[test]
fn ppo_gradient_matches_finite_differences() {
    for seed in 0..20 {
        let inst = instance(seed);
        let e = check(&inst, &bare_plan(), |ev| (ev.l_ppo, ev.grad_ppo.clone()));
        assert!(e < 1e-4, "seed {seed}: {e}");
    }
}

#[test]
fn ppo_gradient_at_rollout_params() {
    for seed in 0..5 {
        let mut inst = instance(seed);
        inst.current = inst.old.clone();
        let e = check(&inst, &bare_plan(), |ev| (ev.l_ppo, ev.grad_ppo.clone()));
        assert!(e < 1e-4, "seed {seed}: {e}");
    }
}

#[test]
fn entropy_gradient_matches_finite_differences() {
    let beta = 0.01;
    for seed in 0..20 {
        let inst = instance(seed);
        let e = check(&inst, &bare_plan(), |ev| {
            (-beta * ev.entropy, ev.grad_entropy.iter().map(|g| -beta * g).collect())
        });
        assert!(e < 1e-4, "seed {seed}: {e}");
    }
}

#[test]
fn surrogate_kl_gradient_matches_finite_differences() {
    for seed in 0..20 {
        let inst = instance(seed);
        let e = check(&inst, &bare_plan(), |ev| (ev.kl, ev.grad_kl.clone()));
        assert!(e < 1e-4, "seed {seed}: {e}");
    }
}

#[test]
fn gated_penalty_gradient_matches_finite_differences() {
    for seed in 0..20 {
        let inst = instance(seed);
        let plan = active_plan(&inst);
        let eval = evaluate_policy(&inst.current, &inst.batch, &plan).unwrap();
        assert!(eval.l_gated > 0.0);
        let e = check(&inst, &plan, |ev| (ev.l_gated, ev.grad_gated.clone()));
        assert!(e < 1e-4, "seed {seed}: {e}");
    }
}

#[test]
fn asymmetric_penalty_gradient_matches_finite_differences() {
    for seed in 0..20 {
        let inst = instance(seed);
        let plan = active_plan(&inst);
        let eval = evaluate_policy(&inst.current, &inst.batch, &plan).unwrap();
        assert!(eval.l_asym > 0.0 && eval.l_mom > 0.0);
        let e = check(&inst, &plan, |ev| (ev.l_asym + ev.l_mom, ev.grad_akl.clone()));
        assert!(e < 1e-4, "seed {seed}: {e}");
    }
}

#[test]
fn assembled_gradient_matches_finite_differences() {
    let beta = 0.05;
    for seed in 0..20 {
        let inst = instance(seed);
        let plan = active_plan(&inst);
        let e = check(&inst, &plan, |ev| (ev.loss(beta), ev.grad(beta)));
        assert!(e < 1e-4, "seed {seed}: {e}");
    }
}

#[test]
fn ten_dimensional_instance() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let normal = Normal::new(0.0, 0.5).unwrap();
    let policy = SoftmaxPolicy::from_weights((0..10).map(|_| normal.sample(&mut rng)).collect(), 5, 2).unwrap();
    let reference = SoftmaxPolicy::zeros(5, 2);
    let ctx = ContextSet::generate(2, 2, 1.0, &mut rng).unwrap();
    let ro = rollout(&policy, &reference, &ctx, &[0, 1, 1], 6, &mut rng).unwrap();
    let inst = Instance {
        old: policy.clone(),
        current: policy,
        batch: PolicyBatch {
            features: vec![ctx.get(0).to_vec(), ctx.get(1).to_vec(), ctx.get(1).to_vec()],
            tokens: ro.tokens,
            logp_old: ro.logp_policy,
            logp_ref: ro.logp_ref,
            advantages: vec![1.0, -0.5, 0.2],
        },
    };
    let plan = active_plan(&inst);
    let e = check(&inst, &plan, |ev| (ev.loss(0.01), ev.grad(0.01)));
    assert!(e < 1e-4, "{e}");
}
