//! Oracles shared by the integration targets.

use holofair::grpo::{batch_loss_and_grad, ContextLogits, LogitGrad, Policy, Sample, NUM_STEPS, STEPS};
use holofair::taxonomy::DemographicTuple;
use rand::Rng;

pub fn log_softmax(z: &[f64], tau: f64) -> Vec<f64> {
    let lse = z.iter().map(|v| (v / tau).exp()).sum::<f64>().ln();
    z.iter().map(|v| v / tau - lse).collect()
}

/// Direct evaluation of the clipped surrogate plus exact KL, averaged over
/// the minibatch per step, summed over steps and divided by the chain length.
pub fn oracle_loss(policy: &Policy, reference: &Policy, batch: &[Sample], beta: f64, clip: f64) -> f64 {
    let m = batch.len() as f64;
    let tau = policy.temperature;
    let mut total = 0.0;
    for s in batch {
        for t in 0..NUM_STEPS {
            let lp = log_softmax(&policy.contexts[s.context].steps[t], tau);
            let lq = log_softmax(&reference.contexts[s.context].steps[t], reference.temperature);
            let a = s.tuple.get(STEPS[t]);
            let r = (lp[a] - s.old_logprobs[t]).exp();
            let adv = s.advantages[t];
            let surrogate = (-r * adv).max(-r.clamp(1.0 - clip, 1.0 + clip) * adv);
            let kl: f64 = lp.iter().zip(&lq).map(|(p, q)| p.exp() * (p - q)).sum();
            total += (surrogate + beta * kl) / m;
        }
    }
    total / NUM_STEPS as f64
}

pub fn random_policy(rng: &mut impl Rng, contexts: usize, tau: f64) -> Policy {
    Policy {
        contexts: (0..contexts)
            .map(|c| ContextLogits {
                name: format!("ctx{c}"),
                steps: std::array::from_fn(|t| (0..STEPS[t].num_categories()).map(|_| rng.gen_range(-2.0..2.0)).collect()),
            })
            .collect(),
        temperature: tau,
    }
}

pub fn flatten(g: &LogitGrad) -> Vec<f64> {
    g.iter().flat_map(|c| c.iter().flatten().copied()).collect()
}

/// True when some ratio sits close enough to a clip edge that a central
/// difference would straddle the kink.
fn near_kink(policy: &Policy, batch: &[Sample], clip: f64, margin: f64) -> bool {
    batch.iter().any(|s| {
        (0..NUM_STEPS).any(|t| {
            let lp = log_softmax(&policy.contexts[s.context].steps[t], policy.temperature);
            let r = (lp[s.tuple.get(STEPS[t])] - s.old_logprobs[t]).exp();
            (r - (1.0 - clip)).abs() < margin || (r - (1.0 + clip)).abs() < margin
        })
    })
}

/// Norm-wise relative error between analytic and central-difference
/// gradients on `probes` random (logits, advantages, old log-probs, β)
/// draws; returns the worst probe and the loss mismatch against the oracle.
pub fn gradient_check(probes: usize, seed: u64) -> (f64, f64) {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let clip = 0.2;
    let h = 1e-6;
    let mut done = 0;
    let mut worst: f64 = 0.0;
    let mut loss_gap: f64 = 0.0;
    while done < probes {
        let contexts = rng.gen_range(1..=3);
        let tau = rng.gen_range(0.5..2.0);
        let policy = random_policy(&mut rng, contexts, tau);
        let reference = random_policy(&mut rng, contexts, 1.0);
        let beta = rng.gen_range(0.0..1.0);
        let batch: Vec<Sample> = (0..rng.gen_range(1..8))
            .map(|_| {
                let context = rng.gen_range(0..contexts);
                let tuple = DemographicTuple::new(rng.gen_range(0..2), rng.gen_range(0..3), rng.gen_range(0..5)).unwrap();
                let current = policy.tuple_log_probs(context, &tuple);
                Sample {
                    context,
                    tuple,
                    old_logprobs: std::array::from_fn(|t| current[t] + rng.gen_range(-0.4..0.4)),
                    reward: 0.0,
                    advantages: std::array::from_fn(|_| rng.gen_range(-2.0..2.0)),
                }
            })
            .collect();
        if near_kink(&policy, &batch, clip, 1e-4) {
            continue;
        }
        done += 1;
        let refs: Vec<&Sample> = batch.iter().collect();
        let (parts, grad) = batch_loss_and_grad(&policy, &reference, &refs, beta, clip);
        loss_gap = loss_gap.max((parts.total - oracle_loss(&policy, &reference, &batch, beta, clip)).abs());

        let analytic = flatten(&grad);
        let base = policy.flat();
        let mut numeric = vec![0.0; base.len()];
        for i in 0..base.len() {
            let mut p = policy.clone();
            let mut v = base.clone();
            v[i] = base[i] + h;
            p.set_flat(&v);
            let up = oracle_loss(&p, &reference, &batch, beta, clip);
            v[i] = base[i] - h;
            p.set_flat(&v);
            let down = oracle_loss(&p, &reference, &batch, beta, clip);
            numeric[i] = (up - down) / (2.0 * h);
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
        worst = worst.max(diff / norm.max(1e-8));
    }
    (worst, loss_gap)
}
