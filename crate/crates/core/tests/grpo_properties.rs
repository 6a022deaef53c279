mod common;

use common::flatten;
use holofair::grpo::{batch_loss_and_grad, kl_divergence, train, Policy, Preset, Sample, SimConfig, Trainer, NUM_STEPS};
use holofair::reward::RewardConfig;
use holofair::taxonomy::{Attribute, DemographicTuple};

fn neutral() -> Vec<String> {
    vec!["neutral".to_string()]
}

#[test]
fn analytic_gradient_matches_central_differences() {
    let (worst, loss_gap) = common::gradient_check(100, 2024);
    assert!(loss_gap < 1e-12, "loss mismatch {loss_gap:e}");
    assert!(worst <= 1e-4, "relative error {worst:e}");
}

#[test]
fn clipped_ratio_in_favourable_direction_has_no_policy_gradient() {
    let policy = Policy::preset(Preset::BiasedAll, &neutral());
    let tuple = DemographicTuple::new(0, 0, 0).unwrap();
    let lp = policy.tuple_log_probs(0, &tuple);
    // ratio e^0.5 > 1 + clip with positive advantage
    let sample = Sample {
        context: 0,
        tuple,
        old_logprobs: std::array::from_fn(|t| lp[t] - 0.5),
        reward: 1.0,
        advantages: [1.0; NUM_STEPS],
    };
    let (_, grad) = batch_loss_and_grad(&policy, &policy, &[&sample], 0.0, 0.2);
    assert!(flatten(&grad).iter().all(|g| *g == 0.0));
}

#[test]
fn zero_advantage_without_kl_leaves_logits_bit_identical() {
    let reference = Policy::preset(Preset::BiasedAll, &neutral());
    let reward = RewardConfig {
        weights: Attribute::ALL.iter().map(|a| (*a, 0.0)).collect(),
        ..RewardConfig::default()
    };
    let config = SimConfig {
        epochs: 12,
        kl_coeff: 0.0,
        ..SimConfig::default()
    };
    let trajectory = train(config, reward, reference.clone()).unwrap();
    assert!(!trajectory.updates.is_empty());
    let before: Vec<u64> = reference.flat().iter().map(|z| z.to_bits()).collect();
    let after: Vec<u64> = trajectory.final_policy.flat().iter().map(|z| z.to_bits()).collect();
    assert_eq!(before, after);
}

#[test]
fn zero_advantage_with_kl_only_moves_toward_reference() {
    let reference = Policy::preset(Preset::BiasedAll, &neutral());
    let mut trainer = Trainer::new(SimConfig { kl_coeff: 1.0, ..SimConfig::default() }, RewardConfig::default(), reference.clone()).unwrap();
    // start away from the reference
    trainer.policy = Policy::preset(Preset::Uniform, &neutral());
    let tuple = DemographicTuple::new(1, 2, 3).unwrap();
    let sample = Sample {
        context: 0,
        tuple,
        old_logprobs: trainer.policy.tuple_log_probs(0, &tuple),
        reward: 0.0,
        advantages: [0.0; NUM_STEPS],
    };
    let kl_before = kl_divergence(&trainer.policy, &reference, 0);
    trainer.update(&[&sample]);
    let kl_after = kl_divergence(&trainer.policy, &reference, 0);
    assert!(kl_after < kl_before);
}

#[test]
fn identical_configs_give_identical_trajectories() {
    let config = SimConfig { epochs: 20, seed: 9, ..SimConfig::default() };
    let reference = Policy::preset(Preset::BiasedAll, &neutral());
    let a = train(config.clone(), RewardConfig::default(), reference.clone()).unwrap();
    let b = train(config.clone(), RewardConfig::default(), reference.clone()).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    let c = train(SimConfig { seed: 10, ..config }, RewardConfig::default(), reference).unwrap();
    assert_ne!(a.final_policy, c.final_policy);
}

#[test]
fn strong_anchor_stays_near_reference() {
    for preset in [Preset::BiasedAll, Preset::Uniform] {
        let reference = Policy::preset(preset, &neutral());
        let config = SimConfig { kl_coeff: 10.0, ..SimConfig::default() };
        let trajectory = train(config, RewardConfig::default(), reference.clone()).unwrap();
        let kl = kl_divergence(&trajectory.final_policy, &reference, 0);
        assert!(kl < 0.01, "{preset:?}: KL {kl}");
    }
}

fn one_epoch_shift(clip: f64) -> f64 {
    let reference = Policy::preset(Preset::BiasedAll, &neutral());
    let config = SimConfig { ppo_clip: clip, ..SimConfig::default() };
    let mut trainer = Trainer::new(config, RewardConfig::default(), reference.clone()).unwrap();
    let experience = trainer.collect_experience(0).unwrap();
    trainer.optimize(&experience);
    (0..NUM_STEPS)
        .flat_map(|t| {
            let before = reference.probs(0, t);
            let after = trainer.policy.probs(0, t);
            before.into_iter().zip(after).map(|(b, a)| (a - b).abs()).collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}

#[test]
fn tighter_clip_limits_per_epoch_movement() {
    let tight = one_epoch_shift(1e-6);
    let loose = one_epoch_shift(0.2);
    assert!(tight < loose, "tight {tight} loose {loose}");
}

#[test]
fn multi_context_policies_train_every_context() {
    let names: Vec<String> = ["neutral", "aggressive", "professional"].iter().map(|s| s.to_string()).collect();
    let reference = Policy::preset(Preset::BiasedGender, &names);
    let config = SimConfig { contexts: names, epochs: 40, ..SimConfig::default() };
    let trajectory = train(config, RewardConfig::default(), reference.clone()).unwrap();
    let last = trajectory.checkpoints.last().unwrap();
    assert!(last.report.mgbi.is_some());
    for c in 0..3 {
        let p = trajectory.final_policy.probs(c, 0);
        assert!(p[1] > 0.2, "context {c}: {p:?}");
    }
}
