//! Deterministic group-relative policy optimization over a categorical
//! generator.
//!
//! The "generator" is a softmax policy that emits one demographic tuple per
//! image as a three-step chain (gender, then age, then race). Each step plays
//! the role of one denoising timestep: log-probs are stored per step, the
//! terminal reward is broadcast to every step, and the PPO-clip and KL terms
//! are accumulated per step and averaged over the chain. Gradients are exact
//! softmax score-function derivatives.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labels::{Assignment, GroupCounts};
use crate::metrics::{self, MetricsError, MetricsReport};
use crate::reward::{RewardConfig, RewardError, RewardTable, RunningStats, StatsMode};
use crate::taxonomy::{Attribute, DemographicTuple};

/// Decision order of the factorized chain.
pub const STEPS: [Attribute; 3] = [Attribute::Gender, Attribute::Age, Attribute::Race];
pub const NUM_STEPS: usize = STEPS.len();

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("invalid policy: {0}")]
    Policy(String),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Logits of one prompt context, one vector per chain step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ContextLogits {
    pub name: String,
    pub steps: [Vec<f64>; NUM_STEPS],
}

/// Softmax categorical policy over demographic tuples, one logit table per
/// prompt context. Context 0 is the neutral prompt; the rest are trigger
/// contexts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Policy {
    pub contexts: Vec<ContextLogits>,
    pub temperature: f64,
}

fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| ((z - max) / temperature).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn log_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scaled.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    scaled.into_iter().map(|s| s - lse).collect()
}

/// Named reference-policy presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Uniform,
    /// gender 0.9/0.1, age and race uniform
    BiasedGender,
    /// gender 0.9/0.1, age 0.6/0.3/0.1, race 0.6/0.1/0.1/0.1/0.1
    BiasedAll,
}

impl std::str::FromStr for Preset {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniform" => Ok(Preset::Uniform),
            "biased-gender" => Ok(Preset::BiasedGender),
            "biased-all" => Ok(Preset::BiasedAll),
            other => Err(SimError::Policy(format!("unknown preset `{other}`"))),
        }
    }
}

impl Preset {
    pub fn probs(self) -> [Vec<f64>; NUM_STEPS] {
        match self {
            Preset::Uniform => [vec![0.5; 2], vec![1.0 / 3.0; 3], vec![0.2; 5]],
            Preset::BiasedGender => [vec![0.9, 0.1], vec![1.0 / 3.0; 3], vec![0.2; 5]],
            Preset::BiasedAll => [
                vec![0.9, 0.1],
                vec![0.6, 0.3, 0.1],
                vec![0.6, 0.1, 0.1, 0.1, 0.1],
            ],
        }
    }
}

impl Policy {
    /// Policy whose every context has the given per-step probabilities.
    pub fn from_probs(
        context_names: &[String],
        probs: &[Vec<f64>; NUM_STEPS],
    ) -> Result<Self, SimError> {
        let steps: [Vec<f64>; NUM_STEPS] = std::array::from_fn(|t| {
            probs[t].iter().map(|p| p.ln()).collect::<Vec<f64>>()
        });
        let policy = Self {
            contexts: context_names
                .iter()
                .map(|n| ContextLogits {
                    name: n.clone(),
                    steps: steps.clone(),
                })
                .collect(),
            temperature: 1.0,
        };
        policy.validate()?;
        Ok(policy)
    }

    pub fn preset(preset: Preset, context_names: &[String]) -> Self {
        Self::from_probs(context_names, &preset.probs()).expect("presets are valid")
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.contexts.is_empty() {
            return Err(SimError::Policy("no contexts".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(SimError::Policy("temperature must be positive".into()));
        }
        for ctx in &self.contexts {
            for (t, attr) in STEPS.iter().enumerate() {
                if ctx.steps[t].len() != attr.num_categories() {
                    return Err(SimError::Policy(format!(
                        "context `{}` step {t} needs {} logits",
                        ctx.name,
                        attr.num_categories()
                    )));
                }
                if ctx.steps[t].iter().any(|z| z.is_nan() || *z == f64::INFINITY) {
                    return Err(SimError::Policy(format!("context `{}` has invalid logits", ctx.name)));
                }
            }
        }
        Ok(())
    }

    pub fn num_contexts(&self) -> usize {
        self.contexts.len()
    }

    pub fn probs(&self, context: usize, step: usize) -> Vec<f64> {
        softmax(&self.contexts[context].steps[step], self.temperature)
    }

    pub fn log_probs(&self, context: usize, step: usize) -> Vec<f64> {
        log_softmax(&self.contexts[context].steps[step], self.temperature)
    }

    /// Per-step log-probabilities of a tuple.
    pub fn tuple_log_probs(&self, context: usize, tuple: &DemographicTuple) -> [f64; NUM_STEPS] {
        std::array::from_fn(|t| self.log_probs(context, t)[tuple.get(STEPS[t])])
    }

    fn zeros_like(&self) -> Vec<[Vec<f64>; NUM_STEPS]> {
        self.contexts
            .iter()
            .map(|c| std::array::from_fn(|t| vec![0.0; c.steps[t].len()]))
            .collect()
    }

    /// Flattened view of all logits, context-major then step-major.
    pub fn flat(&self) -> Vec<f64> {
        self.contexts
            .iter()
            .flat_map(|c| c.steps.iter().flatten().copied())
            .collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) {
        let mut it = values.iter();
        for c in &mut self.contexts {
            for step in &mut c.steps {
                for z in step.iter_mut() {
                    *z = *it.next().expect("length matches");
                }
            }
        }
    }
}

fn sample_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left the cumulative sum just under 1
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(probs.len() - 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledGroup {
    pub tuples: Vec<DemographicTuple>,
    pub old_logprobs: Vec<[f64; NUM_STEPS]>,
}

/// Draws `n` independent tuples from the chain for `context`.
pub fn sample_group(policy: &Policy, context: usize, n: usize, rng: &mut impl Rng) -> SampledGroup {
    let probs: [Vec<f64>; NUM_STEPS] = std::array::from_fn(|t| policy.probs(context, t));
    let logp: [Vec<f64>; NUM_STEPS] = std::array::from_fn(|t| policy.log_probs(context, t));
    let mut tuples = Vec::with_capacity(n);
    let mut old = Vec::with_capacity(n);
    for _ in 0..n {
        let mut tuple = DemographicTuple { gender: 0, age: 0, race: 0 };
        let mut lp = [0.0; NUM_STEPS];
        for t in 0..NUM_STEPS {
            let k = sample_index(&probs[t], rng);
            tuple.set(STEPS[t], k);
            lp[t] = logp[t][k];
        }
        tuples.push(tuple);
        old.push(lp);
    }
    SampledGroup {
        tuples,
        old_logprobs: old,
    }
}

/// Row-stochastic confusion matrix per attribute (row = true category).
pub type Confusion = BTreeMap<Attribute, Vec<Vec<f64>>>;

pub fn validate_confusion(confusion: &Confusion) -> Result<(), SimError> {
    for (a, m) in confusion {
        let k = a.num_categories();
        if m.len() != k || m.iter().any(|row| row.len() != k) {
            return Err(SimError::Config(format!("confusion for {a} must be {k}x{k}")));
        }
        for (i, row) in m.iter().enumerate() {
            let s: f64 = row.iter().sum();
            if row.iter().any(|p| *p < 0.0) || (s - 1.0).abs() > 1e-9 {
                return Err(SimError::Config(format!(
                    "confusion row {i} for {a} is not a probability vector"
                )));
            }
        }
    }
    Ok(())
}

/// Stand-in classifier: identity without a confusion matrix, otherwise each
/// attribute label is redrawn from its confusion row.
pub fn classify(
    tuples: &[DemographicTuple],
    confusion: Option<&Confusion>,
    rng: &mut impl Rng,
) -> Result<Vec<DemographicTuple>, SimError> {
    let Some(conf) = confusion else {
        return Ok(tuples.to_vec());
    };
    validate_confusion(conf)?;
    Ok(tuples
        .iter()
        .map(|t| {
            let mut out = *t;
            for (a, m) in conf {
                out.set(*a, sample_index(&m[t.get(*a)], rng));
            }
            out
        })
        .collect())
}

/// `max(-r A, -clip(r, 1-γ, 1+γ) A)` with `r = exp(new - old)`.
pub fn ppo_clip_loss(new_logprob: f64, old_logprob: f64, advantage: f64, clip: f64) -> f64 {
    let ratio = (new_logprob - old_logprob).exp();
    let unclipped = -ratio * advantage;
    let clipped = -ratio.clamp(1.0 - clip, 1.0 + clip) * advantage;
    unclipped.max(clipped)
}

fn categorical_kl(p: &[f64], log_p: &[f64], log_q: &[f64]) -> f64 {
    p.iter()
        .zip(log_p.iter().zip(log_q))
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, (lp, lq))| pi * (lp - lq))
        .sum()
}

/// Exact KL(π || π_ref) summed over the chain steps of one context.
pub fn kl_divergence(policy: &Policy, reference: &Policy, context: usize) -> f64 {
    (0..NUM_STEPS)
        .map(|t| {
            categorical_kl(
                &policy.probs(context, t),
                &policy.log_probs(context, t),
                &reference.log_probs(context, t),
            )
            .max(0.0)
        })
        .sum()
}

/// `(L_policy + β L_KL) / T`.
pub fn total_loss(policy_loss: f64, kl_loss: f64, beta: f64, timesteps: usize) -> f64 {
    (policy_loss + beta * kl_loss) / timesteps as f64
}

/// One image's experience, ready for the update phase.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub context: usize,
    pub tuple: DemographicTuple,
    pub old_logprobs: [f64; NUM_STEPS],
    pub reward: f64,
    /// One advantage per step (the terminal reward is broadcast, but the
    /// running statistics are keyed per step).
    pub advantages: [f64; NUM_STEPS],
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub policy: f64,
    pub kl: f64,
    pub total: f64,
}

/// Gradient of the total loss w.r.t. every logit, shaped like the policy.
pub type LogitGrad = Vec<[Vec<f64>; NUM_STEPS]>;

/// Minibatch loss and its analytic gradient.
///
/// Per step the PPO-clip surrogate and the exact KL are averaged over the
/// minibatch; the step terms are summed and the total divided by the chain
/// length.
pub fn batch_loss_and_grad(
    policy: &Policy,
    reference: &Policy,
    batch: &[&Sample],
    beta: f64,
    clip: f64,
) -> (LossParts, LogitGrad) {
    let mut grad = policy.zeros_like();
    let mut parts = LossParts::default();
    if batch.is_empty() {
        return (parts, grad);
    }
    let m = batch.len() as f64;
    let tau = policy.temperature;
    // per-context per-step caches
    let cache: Vec<[(Vec<f64>, Vec<f64>, Vec<f64>, f64); NUM_STEPS]> = (0..policy.num_contexts())
        .map(|c| {
            std::array::from_fn(|t| {
                let p = policy.probs(c, t);
                let lp = policy.log_probs(c, t);
                let lq = reference.log_probs(c, t);
                let kl = categorical_kl(&p, &lp, &lq);
                (p, lp, lq, kl)
            })
        })
        .collect();

    for sample in batch {
        let c = sample.context;
        for t in 0..NUM_STEPS {
            let (p, lp, lq, kl) = &cache[c][t];
            let action = sample.tuple.get(STEPS[t]);
            let adv = sample.advantages[t];
            let ratio = (lp[action] - sample.old_logprobs[t]).exp();
            let unclipped = -ratio * adv;
            let clipped = -ratio.clamp(1.0 - clip, 1.0 + clip) * adv;
            parts.policy += unclipped.max(clipped) / m;
            parts.kl += kl / m;

            let g = &mut grad[c][t];
            if unclipped >= clipped {
                // d(-r A)/dz_j = -A r (δ_aj - p_j) / τ
                let coef = -adv * ratio / (tau * m);
                for (j, gj) in g.iter_mut().enumerate() {
                    let indicator = if j == action { 1.0 } else { 0.0 };
                    *gj += coef * (indicator - p[j]);
                }
            }
            if beta != 0.0 {
                // dKL/dz_j = p_j (log p_j - log q_j - KL) / τ
                for (j, gj) in g.iter_mut().enumerate() {
                    if p[j] > 0.0 {
                        *gj += beta * p[j] * (lp[j] - lq[j] - kl) / (tau * m);
                    }
                }
            }
        }
    }
    let steps = NUM_STEPS as f64;
    parts.total = total_loss(parts.policy, parts.kl, beta, NUM_STEPS);
    for ctx in grad.iter_mut() {
        for step in ctx.iter_mut() {
            for g in step.iter_mut() {
                *g /= steps;
            }
        }
    }
    (parts, grad)
}

/// How rewards are turned into advantages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageMode {
    /// Per-(prompt, timestep) running statistics.
    Running,
    /// Standardize within each sampled group.
    Batch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default)]
pub struct SimConfig {
    pub epochs: usize,
    pub inner_epochs: usize,
    /// Groups sampled per epoch.
    pub sampling_batches: usize,
    /// Minibatch size M for the update phase.
    pub train_batch: usize,
    /// Images per prompt group N.
    pub group_size: usize,
    /// Chain length; must equal the number of factorized steps.
    pub timesteps: usize,
    pub kl_coeff: f64,
    pub ppo_clip: f64,
    pub learning_rate: f64,
    pub max_grad_norm: f64,
    pub seed: u64,
    pub classifier_noise: Option<Confusion>,
    /// Context names; the first is the neutral prompt.
    pub contexts: Vec<String>,
    pub advantage_mode: AdvantageMode,
    pub stats_mode: StatsMode,
    pub advantage_epsilon: f64,
    /// EMA weight on the previous smoothed reward.
    pub reward_smoothing: f64,
    pub checkpoint_every: usize,
    pub eval_samples: usize,
    pub q: f64,
    /// Stop once this many optimizer steps have been taken.
    pub max_updates: Option<usize>,
    pub divergence_patience: usize,
    pub divergence_tolerance: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            epochs: 80,
            inner_epochs: 1,
            sampling_batches: 4,
            train_batch: 20,
            group_size: 20,
            timesteps: NUM_STEPS,
            kl_coeff: 0.05,
            ppo_clip: 0.2,
            learning_rate: 0.1,
            max_grad_norm: 1.0,
            seed: 0,
            classifier_noise: None,
            contexts: vec!["neutral".to_string()],
            advantage_mode: AdvantageMode::Running,
            stats_mode: StatsMode::default(),
            advantage_epsilon: 1e-6,
            reward_smoothing: 0.9,
            checkpoint_every: 4,
            eval_samples: 500,
            q: metrics::DEFAULT_Q,
            max_updates: None,
            divergence_patience: 10,
            divergence_tolerance: 0.5,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let counts = [
            ("epochs", self.epochs),
            ("inner_epochs", self.inner_epochs),
            ("sampling_batches", self.sampling_batches),
            ("train_batch", self.train_batch),
            ("group_size", self.group_size),
            ("checkpoint_every", self.checkpoint_every),
            ("eval_samples", self.eval_samples),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(SimError::Config(format!("{name} must be at least 1")));
            }
        }
        if self.timesteps != NUM_STEPS {
            return Err(SimError::Config(format!(
                "timesteps must be {NUM_STEPS} for the factorized chain"
            )));
        }
        if !(self.ppo_clip > 0.0 && self.ppo_clip < 1.0) {
            return Err(SimError::Config("ppo_clip must lie in (0, 1)".into()));
        }
        if !(self.kl_coeff >= 0.0) {
            return Err(SimError::Config("kl_coeff must be nonnegative".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(SimError::Config("learning_rate must be positive".into()));
        }
        if self.contexts.is_empty() {
            return Err(SimError::Config("at least one context required".into()));
        }
        if let Some(c) = &self.classifier_noise {
            validate_confusion(c)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct UpdateRecord {
    pub epoch: usize,
    pub update: usize,
    pub smoothed_reward: f64,
    pub policy_loss: f64,
    pub kl_loss: f64,
    pub total_loss: f64,
    pub grad_norm: f64,
    /// Id of the checkpoint taken in this update's epoch, if any.
    pub checkpoint: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Checkpoint {
    pub id: usize,
    pub epoch: usize,
    /// Optimizer steps taken before this evaluation.
    pub update: usize,
    pub smoothed_reward: f64,
    /// Geometric-mean entropy score (MGBI with triggers, ID otherwise).
    pub fairness: f64,
    pub mean_kl_to_reference: f64,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Warning {
    pub epoch: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Trajectory {
    pub updates: Vec<UpdateRecord>,
    pub checkpoints: Vec<Checkpoint>,
    pub warnings: Vec<Warning>,
    pub final_policy: Policy,
}

impl Trajectory {
    /// Spearman correlation between smoothed reward and fairness across
    /// checkpoints.
    pub fn reward_fairness_correlation(&self) -> f64 {
        let r: Vec<f64> = self.checkpoints.iter().map(|c| c.smoothed_reward).collect();
        let f: Vec<f64> = self.checkpoints.iter().map(|c| c.fairness).collect();
        metrics::spearman(&r, &f)
    }

    /// First checkpoint whose fairness reaches `threshold`.
    pub fn first_reaching(&self, threshold: f64) -> Option<&Checkpoint> {
        self.checkpoints.iter().find(|c| c.fairness >= threshold)
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "update", "smoothed_reward", "policy_loss", "kl_loss", "total_loss", "checkpoint", "fairness"])?;
        for u in &self.updates {
            let fairness = u
                .checkpoint
                .and_then(|id| self.checkpoints.get(id))
                .map(|c| c.fairness.to_string())
                .unwrap_or_default();
            w.write_record([
                u.epoch.to_string(),
                u.update.to_string(),
                u.smoothed_reward.to_string(),
                u.policy_loss.to_string(),
                u.kl_loss.to_string(),
                u.total_loss.to_string(),
                u.checkpoint.map(|c| c.to_string()).unwrap_or_default(),
                fairness,
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn tuple_assignment(t: &DemographicTuple) -> Assignment {
    Attribute::ALL.iter().map(|a| (*a, Some(t.get(*a)))).collect()
}

fn group_counts_of(prompt: &str, labels: &[DemographicTuple]) -> GroupCounts {
    let mut g = GroupCounts::empty(prompt, labels.len() as u64);
    for t in labels {
        for a in Attribute::ALL {
            g.per_attribute.get_mut(&a).expect("present")[t.get(a)] += 1;
        }
    }
    for a in Attribute::ALL {
        g.abstained.insert(a, 0);
    }
    g
}

/// Stateful training loop. `run` drives the whole schedule; the phase
/// methods are public so tests can step through an epoch.
pub struct Trainer {
    pub config: SimConfig,
    pub reward_config: RewardConfig,
    pub reference: Policy,
    pub policy: Policy,
    pub stats: RunningStats,
    rng: ChaCha8Rng,
    updates: usize,
}

impl Trainer {
    pub fn new(
        config: SimConfig,
        reward_config: RewardConfig,
        reference: Policy,
    ) -> Result<Self, SimError> {
        config.validate()?;
        reward_config.validate()?;
        reference.validate()?;
        if reference.num_contexts() != config.contexts.len() {
            return Err(SimError::Config(format!(
                "reference policy has {} contexts, config names {}",
                reference.num_contexts(),
                config.contexts.len()
            )));
        }
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            stats: RunningStats::new(config.stats_mode),
            policy: reference.clone(),
            reference,
            reward_config,
            config,
            rng,
            updates: 0,
        })
    }

    pub fn updates(&self) -> usize {
        self.updates
    }

    /// Sampling, classification, reward and advantage for one epoch.
    pub fn collect_experience(&mut self, epoch: usize) -> Result<Vec<Sample>, SimError> {
        let cfg = &self.config;
        let mut out = Vec::with_capacity(cfg.sampling_batches * cfg.group_size);
        for b in 0..cfg.sampling_batches {
            let context = (epoch * cfg.sampling_batches + b) % self.policy.num_contexts();
            let prompt = self.policy.contexts[context].name.clone();
            let group = sample_group(&self.policy, context, cfg.group_size, &mut self.rng);
            let labels = classify(&group.tuples, cfg.classifier_noise.as_ref(), &mut self.rng)?;
            let counts = group_counts_of(&prompt, &labels);
            let table = RewardTable::build(&counts, &self.reward_config)?;
            let rewards: Vec<f64> = labels
                .iter()
                .map(|t| table.image_reward(&tuple_assignment(t), &self.reward_config))
                .collect::<Result<_, _>>()?;

            let advantages: Vec<[f64; NUM_STEPS]> = match cfg.advantage_mode {
                AdvantageMode::Running => rewards
                    .iter()
                    .map(|&r| {
                        std::array::from_fn(|t| {
                            self.stats.advantage(r, &prompt, t, cfg.advantage_epsilon)
                        })
                    })
                    .collect(),
                AdvantageMode::Batch => {
                    let n = rewards.len() as f64;
                    let mean = rewards.iter().sum::<f64>() / n;
                    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
                    rewards
                        .iter()
                        .map(|r| [(r - mean) / (std + cfg.advantage_epsilon); NUM_STEPS])
                        .collect()
                }
            };

            for i in 0..cfg.group_size {
                out.push(Sample {
                    context,
                    tuple: group.tuples[i],
                    old_logprobs: group.old_logprobs[i],
                    reward: rewards[i],
                    advantages: advantages[i],
                });
            }
        }
        Ok(out)
    }

    /// One optimizer step (gradient descent with global-norm clipping).
    pub fn update(&mut self, batch: &[&Sample]) -> (LossParts, f64) {
        let (parts, grad) = batch_loss_and_grad(
            &self.policy,
            &self.reference,
            batch,
            self.config.kl_coeff,
            self.config.ppo_clip,
        );
        let norm = grad
            .iter()
            .flat_map(|c| c.iter().flatten())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        let scale = if norm > self.config.max_grad_norm {
            self.config.max_grad_norm / norm
        } else {
            1.0
        };
        let lr = self.config.learning_rate;
        for (ctx, g) in self.policy.contexts.iter_mut().zip(&grad) {
            for (step, gs) in ctx.steps.iter_mut().zip(g) {
                for (z, gz) in step.iter_mut().zip(gs) {
                    *z -= lr * scale * gz;
                }
            }
        }
        self.updates += 1;
        (parts, norm)
    }

    fn budget_left(&self) -> bool {
        self.config.max_updates.map_or(true, |m| self.updates < m)
    }

    /// Inner epochs over shuffled minibatches of the experience buffer.
    pub fn optimize(&mut self, experience: &[Sample]) -> Vec<(LossParts, f64)> {
        let mut out = Vec::new();
        let mut order: Vec<usize> = (0..experience.len()).collect();
        for _ in 0..self.config.inner_epochs {
            order.shuffle(&mut self.rng);
            for chunk in order.chunks(self.config.train_batch) {
                if !self.budget_left() {
                    return out;
                }
                let batch: Vec<&Sample> = chunk.iter().map(|&i| &experience[i]).collect();
                out.push(self.update(&batch));
            }
        }
        out
    }

    /// Evaluates the current policy on fresh samples from a dedicated RNG
    /// stream, leaving the training stream untouched.
    pub fn evaluate(&self, checkpoint_id: usize) -> Result<(MetricsReport, f64), SimError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(1 + checkpoint_id as u64);
        let mut neutral = BTreeMap::new();
        let mut triggers = BTreeMap::new();
        for c in 0..self.policy.num_contexts() {
            let group = sample_group(&self.policy, c, self.config.eval_samples, &mut rng);
            let labels = classify(&group.tuples, self.config.classifier_noise.as_ref(), &mut rng)?;
            let counts = group_counts_of("eval", &labels);
            let ents = Attribute::ALL
                .iter()
                .map(|&a| Ok((a, metrics::normalized_entropy_counts(counts.counts(a))?)))
                .collect::<Result<BTreeMap<_, _>, MetricsError>>()?;
            if c == 0 {
                neutral = ents;
            } else {
                triggers.insert(self.policy.contexts[c].name.clone(), ents);
            }
        }
        let report = MetricsReport::compute(&neutral, &triggers, self.config.q, metrics::DEFAULT_EPSILON)?;
        let kl = (0..self.policy.num_contexts())
            .map(|c| kl_divergence(&self.policy, &self.reference, c))
            .sum::<f64>()
            / self.policy.num_contexts() as f64;
        Ok((report, kl))
    }

    pub fn run(mut self) -> Result<Trajectory, SimError> {
        let mut updates = Vec::new();
        let mut checkpoints: Vec<Checkpoint> = Vec::new();
        let mut warnings = Vec::new();
        let mut smoothed: Option<f64> = None;
        let mut best = f64::NEG_INFINITY;
        let mut declining = 0usize;

        for epoch in 0..self.config.epochs {
            if !self.budget_left() {
                break;
            }
            let experience = self.collect_experience(epoch)?;
            let mean_reward =
                experience.iter().map(|s| s.reward).sum::<f64>() / experience.len() as f64;
            let alpha = self.config.reward_smoothing;
            let s = match smoothed {
                None => mean_reward,
                Some(prev) => alpha * prev + (1.0 - alpha) * mean_reward,
            };
            smoothed = Some(s);

            if s > best {
                best = s;
                declining = 0;
            } else if best - s > self.config.divergence_tolerance {
                declining += 1;
                if declining == self.config.divergence_patience {
                    warnings.push(Warning {
                        epoch,
                        message: format!(
                            "smoothed reward {s:.4} has stayed more than {} below its best {best:.4} for {declining} epochs",
                            self.config.divergence_tolerance
                        ),
                    });
                }
            } else {
                declining = 0;
            }

            let checkpoint = if epoch % self.config.checkpoint_every == 0 || epoch + 1 == self.config.epochs {
                let id = checkpoints.len();
                let (report, kl) = self.evaluate(id)?;
                checkpoints.push(Checkpoint {
                    id,
                    epoch,
                    update: self.updates,
                    smoothed_reward: s,
                    fairness: report.headline(),
                    mean_kl_to_reference: kl,
                    report,
                });
                Some(id)
            } else {
                None
            };

            for (parts, grad_norm) in self.optimize(&experience) {
                updates.push(UpdateRecord {
                    epoch,
                    update: self.updates,
                    smoothed_reward: s,
                    policy_loss: parts.policy,
                    kl_loss: parts.kl,
                    total_loss: parts.total,
                    grad_norm,
                    checkpoint,
                });
            }
        }
        Ok(Trajectory {
            updates,
            checkpoints,
            warnings,
            final_policy: self.policy,
        })
    }
}

/// Runs the full schedule from `reference`.
pub fn train(
    config: SimConfig,
    reward_config: RewardConfig,
    reference: Policy,
) -> Result<Trajectory, SimError> {
    Trainer::new(config, reward_config, reference)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn neutral() -> Vec<String> {
        vec!["neutral".to_string()]
    }

    #[test]
    fn point_mass_policy_samples_identical_tuples() {
        let mut p = Policy::preset(Preset::Uniform, &neutral());
        p.contexts[0].steps[0][1] = 30.0;
        p.contexts[0].steps[1][2] = 30.0;
        p.contexts[0].steps[2][3] = 30.0;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = sample_group(&p, 0, 50, &mut rng);
        assert!(g.tuples.iter().all(|t| *t == DemographicTuple { gender: 1, age: 2, race: 3 }));
    }

    #[test]
    fn uniform_policy_gender_frequency_concentrates() {
        let p = Policy::preset(Preset::Uniform, &neutral());
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = sample_group(&p, 0, 3000, &mut rng);
        let male = g.tuples.iter().filter(|t| t.gender == 1).count() as f64 / 3000.0;
        assert!((0.47..=0.53).contains(&male), "{male}");
    }

    #[test]
    fn sampling_is_deterministic_and_logprobs_exact() {
        let p = Policy::preset(Preset::BiasedAll, &neutral());
        let a = sample_group(&p, 0, 40, &mut ChaCha8Rng::seed_from_u64(5));
        let b = sample_group(&p, 0, 40, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        for (t, lp) in a.tuples.iter().zip(&a.old_logprobs) {
            let probs = Preset::BiasedAll.probs();
            for s in 0..NUM_STEPS {
                assert_abs_diff_eq!(lp[s], probs[s][t.get(STEPS[s])].ln(), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn classify_identity_paths() {
        let tuples: Vec<_> = DemographicTuple::all().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(classify(&tuples, None, &mut rng).unwrap(), tuples);
        let eye: Confusion = Attribute::ALL
            .iter()
            .map(|a| {
                let k = a.num_categories();
                (*a, (0..k).map(|i| (0..k).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect())
            })
            .collect();
        assert_eq!(classify(&tuples, Some(&eye), &mut rng).unwrap(), tuples);
    }

    #[test]
    fn classify_flip_rate_matches_confusion() {
        let conf: Confusion = [(Attribute::Gender, vec![vec![0.9, 0.1], vec![0.1, 0.9]])]
            .into_iter()
            .collect();
        let tuples = vec![DemographicTuple { gender: 0, age: 0, race: 0 }; 10_000];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = classify(&tuples, Some(&conf), &mut rng).unwrap();
        let flips = out.iter().filter(|t| t.gender == 1).count() as f64 / 1e4;
        assert!((flips - 0.1).abs() < 0.01, "{flips}");
        let bad: Confusion = [(Attribute::Gender, vec![vec![0.5, 0.4], vec![0.1, 0.9]])]
            .into_iter()
            .collect();
        assert!(classify(&tuples, Some(&bad), &mut rng).is_err());
    }

    #[test]
    fn ppo_clip_examples() {
        assert_eq!(ppo_clip_loss(0.0, 0.0, 1.0, 0.2), -1.0);
        assert_abs_diff_eq!(ppo_clip_loss(2f64.ln(), 0.0, 1.0, 0.2), -1.2, epsilon = 1e-12);
        assert_abs_diff_eq!(ppo_clip_loss(0.5f64.ln(), 0.0, -1.0, 0.2), 0.8, epsilon = 1e-12);
    }

    #[test]
    fn kl_examples() {
        let names = neutral();
        let p = Policy::from_probs(&names, &[vec![0.9, 0.1], vec![1.0 / 3.0; 3], vec![0.2; 5]]).unwrap();
        let q = Policy::preset(Preset::Uniform, &names);
        assert_abs_diff_eq!(kl_divergence(&q, &q, 0), 0.0, epsilon = 1e-15);
        let expected = 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln();
        assert_abs_diff_eq!(kl_divergence(&p, &q, 0), expected, epsilon = 1e-12);
        assert_abs_diff_eq!(expected, 0.3681, epsilon = 1e-4);
        assert!((kl_divergence(&p, &q, 0) - kl_divergence(&q, &p, 0)).abs() > 1e-3);
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(-1.0, 2.0, 0.0, 1), -1.0);
        assert_abs_diff_eq!(total_loss(-1.0, 2.0, 0.05, 1), -0.9, epsilon = 1e-15);
        assert_eq!(total_loss(-3.0, 7.0, 0.0, 3), -1.0);
        assert_eq!(SimConfig::default().kl_coeff, 0.05);
    }

    #[test]
    fn config_validation() {
        SimConfig::default().validate().unwrap();
        let bad = SimConfig { ppo_clip: 1.0, ..SimConfig::default() };
        assert!(bad.validate().is_err());
        let bad = SimConfig { timesteps: 2, ..SimConfig::default() };
        assert!(bad.validate().is_err());
        let bad = SimConfig { group_size: 0, ..SimConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn temperature_scales_gradient() {
        let names = neutral();
        let mut p = Policy::preset(Preset::BiasedAll, &names);
        p.temperature = 2.0;
        let sample = Sample {
            context: 0,
            tuple: DemographicTuple { gender: 1, age: 2, race: 4 },
            old_logprobs: p.tuple_log_probs(0, &DemographicTuple { gender: 1, age: 2, race: 4 }),
            reward: 1.0,
            advantages: [1.0; 3],
        };
        let (_, g) = batch_loss_and_grad(&p, &p, &[&sample], 0.0, 0.2);
        // at ratio 1: dL/dz = -(onehot - p) / (τ T)
        let probs = p.probs(0, 0);
        assert_abs_diff_eq!(g[0][0][1], -(1.0 - probs[1]) / (2.0 * 3.0), epsilon = 1e-12);
    }
}
