//! Multi-attribute per-prompt group reward.
//!
//! Pipeline per attribute: log-ratio base reward from within-group counts,
//! zero-centering across categories, clipping to `[r_min, r_max]`; then a
//! weighted sum across attributes per image. Advantages are standardized
//! against a per-(prompt, timestep) running mean/std table.

use std::collections::{BTreeMap, HashMap};

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labels::{Assignment, GroupCounts};
use crate::taxonomy::Attribute;

#[derive(Debug, Error, PartialEq)]
pub enum RewardError {
    #[error("count {n_k} exceeds group size {n}")]
    CountExceedsGroup { n_k: u64, n: u64 },
    #[error("group size must be at least 1")]
    EmptyGroup,
    #[error("target proportion {0} outside [0, 1]")]
    InvalidProportion(f64),
    #[error("missing reward for attribute {0}")]
    MissingAttribute(Attribute),
    #[error("non-finite reward for attribute {0}")]
    NonFinite(Attribute),
    #[error("invalid reward config: {0}")]
    Config(String),
    #[error("assignment for image {image} uses category {category} not present in the counts for {attribute}")]
    Inconsistent {
        image: usize,
        attribute: Attribute,
        category: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum TargetMode {
    /// Uniform target `N / |C_a|` via `log((N - N_k + eps) / (N_k + eps))`.
    Uniform,
    /// Explicit per-category proportions via `log((N p_k + eps) / (N_k + eps))`.
    Explicit { targets: BTreeMap<Attribute, Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default)]
pub struct RewardConfig {
    pub epsilon: f64,
    pub r_min: f64,
    pub r_max: f64,
    pub weights: BTreeMap<Attribute, f64>,
    pub target: TargetMode,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-6,
            r_min: -5.0,
            r_max: 5.0,
            weights: Attribute::ALL.iter().map(|a| (*a, 1.0)).collect(),
            target: TargetMode::Uniform,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        if !(self.r_min < 0.0 && 0.0 < self.r_max) {
            return Err(RewardError::Config(format!(
                "need r_min < 0 < r_max, got [{}, {}]",
                self.r_min, self.r_max
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(RewardError::Config("epsilon must be positive".into()));
        }
        for a in Attribute::ALL {
            match self.weights.get(&a) {
                Some(w) if *w >= 0.0 && w.is_finite() => {}
                Some(w) => return Err(RewardError::Config(format!("weight for {a} is {w}"))),
                None => return Err(RewardError::Config(format!("missing weight for {a}"))),
            }
        }
        if let TargetMode::Explicit { targets } = &self.target {
            for a in Attribute::ALL {
                let p = targets
                    .get(&a)
                    .ok_or_else(|| RewardError::Config(format!("missing targets for {a}")))?;
                if p.len() != a.num_categories() || p.iter().any(|x| *x < 0.0) {
                    return Err(RewardError::Config(format!("bad target vector for {a}")));
                }
                let s: f64 = p.iter().sum();
                if (s - 1.0).abs() > 1e-9 {
                    return Err(RewardError::Config(format!("targets for {a} sum to {s}")));
                }
            }
        }
        Ok(())
    }
}

fn check_counts(n_k: u64, n: u64) -> Result<(), RewardError> {
    if n == 0 {
        return Err(RewardError::EmptyGroup);
    }
    if n_k > n {
        return Err(RewardError::CountExceedsGroup { n_k, n });
    }
    Ok(())
}

/// `log(a) - log(b)` keeps `f(x) = -f(mirror x)` bit-exact.
fn log_ratio(num: f64, den: f64) -> f64 {
    num.ln() - den.ln()
}

/// `log((N - N_k + eps) / (N_k + eps))`.
pub fn base_reward(n_k: u64, n: u64, epsilon: f64) -> Result<f64, RewardError> {
    check_counts(n_k, n)?;
    Ok(log_ratio((n - n_k) as f64 + epsilon, n_k as f64 + epsilon))
}

/// Base reward for a real-valued count, used for reward-shape curves where
/// the remaining mass is spread evenly.
pub fn base_reward_real(n_k: f64, n: f64, epsilon: f64) -> f64 {
    log_ratio(n - n_k + epsilon, n_k + epsilon)
}

/// `log((N p_k + eps) / (N_k + eps))`.
///
/// An expected count `N p_k` within a few ulps of an integer is snapped to it
/// so that a group hitting its target exactly scores exactly zero.
pub fn nonuniform_base_reward(n_k: u64, n: u64, p_k: f64, epsilon: f64) -> Result<f64, RewardError> {
    check_counts(n_k, n)?;
    if !(0.0..=1.0).contains(&p_k) {
        return Err(RewardError::InvalidProportion(p_k));
    }
    let mut target = n as f64 * p_k;
    let nearest = target.round();
    if (target - nearest).abs() <= 8.0 * f64::EPSILON * nearest.max(1.0) {
        target = nearest;
    }
    Ok(log_ratio(target + epsilon, n_k as f64 + epsilon))
}

/// Subtracts the arithmetic mean. The mean is taken as an offset from the
/// first element, so a constant input centers to exact zeros.
pub fn center_rewards(values: &[f64]) -> Vec<f64> {
    let Some(&pivot) = values.first() else {
        return Vec::new();
    };
    let offset = values.iter().map(|v| v - pivot).sum::<f64>() / values.len() as f64;
    let mean = pivot + offset;
    values.iter().map(|v| v - mean).collect()
}

pub fn clip_reward(r: f64, config: &RewardConfig) -> f64 {
    r.clamp(config.r_min, config.r_max)
}

/// `sum_a w_a * r_a`.
pub fn aggregate_reward(
    per_attribute: &BTreeMap<Attribute, f64>,
    config: &RewardConfig,
) -> Result<f64, RewardError> {
    let mut total = 0.0;
    for a in Attribute::ALL {
        let r = *per_attribute.get(&a).ok_or(RewardError::MissingAttribute(a))?;
        if !r.is_finite() {
            return Err(RewardError::NonFinite(a));
        }
        total += config.weights.get(&a).copied().unwrap_or(0.0) * r;
    }
    Ok(total)
}

/// One attribute's per-category rewards at each pipeline stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct CategoryRewards {
    pub counts: Vec<u64>,
    pub base: Vec<f64>,
    pub centered: Vec<f64>,
    pub clipped: Vec<f64>,
}

/// base → center → clip for every category of `attribute`.
pub fn category_rewards(
    attribute: Attribute,
    counts: &[u64],
    group_size: u64,
    config: &RewardConfig,
) -> Result<CategoryRewards, RewardError> {
    let base: Vec<f64> = match &config.target {
        TargetMode::Uniform => counts
            .iter()
            .map(|&c| base_reward(c, group_size, config.epsilon))
            .collect::<Result<_, _>>()?,
        TargetMode::Explicit { targets } => {
            let p = targets
                .get(&attribute)
                .ok_or_else(|| RewardError::Config(format!("missing targets for {attribute}")))?;
            counts
                .iter()
                .zip(p)
                .map(|(&c, &pk)| nonuniform_base_reward(c, group_size, pk, config.epsilon))
                .collect::<Result<_, _>>()?
        }
    };
    let centered = center_rewards(&base);
    let clipped = centered.iter().map(|r| clip_reward(*r, config)).collect();
    Ok(CategoryRewards {
        counts: counts.to_vec(),
        base,
        centered,
        clipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct RewardTable {
    pub prompt_id: String,
    pub group_size: u64,
    pub per_attribute: BTreeMap<Attribute, CategoryRewards>,
}

impl RewardTable {
    pub fn build(counts: &GroupCounts, config: &RewardConfig) -> Result<Self, RewardError> {
        let per_attribute = Attribute::ALL
            .iter()
            .map(|&a| {
                Ok((
                    a,
                    category_rewards(a, counts.counts(a), counts.group_size, config)?,
                ))
            })
            .collect::<Result<_, RewardError>>()?;
        Ok(Self {
            prompt_id: counts.prompt_id.clone(),
            group_size: counts.group_size,
            per_attribute,
        })
    }

    /// Aggregated reward of one image. Abstained attributes contribute 0.
    pub fn image_reward(&self, assignment: &Assignment, config: &RewardConfig) -> Result<f64, RewardError> {
        let per: BTreeMap<Attribute, f64> = Attribute::ALL
            .iter()
            .map(|&a| {
                let r = match assignment.get(&a).copied().flatten() {
                    Some(k) => self.per_attribute[&a].clipped[k],
                    None => 0.0,
                };
                (a, r)
            })
            .collect();
        aggregate_reward(&per, config)
    }
}

/// Rewards for every image of a group, in the order of `assignments`.
pub fn group_rewards(
    counts: &GroupCounts,
    assignments: &[Assignment],
    config: &RewardConfig,
) -> Result<Vec<f64>, RewardError> {
    let table = RewardTable::build(counts, config)?;
    assignments
        .iter()
        .enumerate()
        .map(|(image, asg)| {
            for a in Attribute::ALL {
                if let Some(Some(k)) = asg.get(&a) {
                    if counts.counts(a).get(*k).copied().unwrap_or(0) == 0 {
                        return Err(RewardError::Inconsistent {
                            image,
                            attribute: a,
                            category: *k,
                        });
                    }
                }
            }
            table.image_reward(asg, config)
        })
        .collect()
}

/// One point of the reward-shape curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub n_k: u64,
    pub base: f64,
    pub centered: f64,
    pub clipped: f64,
}

/// Sweeps `N_k = 0..=N` for one category, spreading the remaining `N - N_k`
/// images evenly over the other `num_categories - 1` categories.
pub fn reward_curve(
    group_size: u64,
    num_categories: usize,
    config: &RewardConfig,
) -> Result<Vec<CurvePoint>, RewardError> {
    if group_size == 0 {
        return Err(RewardError::EmptyGroup);
    }
    if num_categories < 2 {
        return Err(RewardError::Config("curve needs at least 2 categories".into()));
    }
    let n = group_size as f64;
    Ok((0..=group_size)
        .map(|n_k| {
            let others = (n - n_k as f64) / (num_categories - 1) as f64;
            let mut base = vec![base_reward_real(others, n, config.epsilon); num_categories];
            base[0] = base_reward_real(n_k as f64, n, config.epsilon);
            let centered = center_rewards(&base)[0];
            CurvePoint {
                n_k,
                base: base[0],
                centered,
                clipped: clip_reward(centered, config),
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StatsMode {
    /// Exponential moving averages of mean and variance.
    Ema { decay: f64 },
    /// Exact running mean and sample variance.
    Welford,
}

impl Default for StatsMode {
    fn default() -> Self {
        StatsMode::Ema { decay: 0.99 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatsEntry {
    pub mean: f64,
    /// Variance for EMA mode, sum of squared deviations for Welford mode.
    pub spread: f64,
    pub count: u64,
}

/// Std reported before two observations exist.
const INITIAL_STD: f64 = 1.0;

impl StatsEntry {
    pub fn std(&self, mode: StatsMode) -> f64 {
        if self.count < 2 {
            return INITIAL_STD;
        }
        match mode {
            StatsMode::Ema { .. } => self.spread.max(0.0).sqrt(),
            StatsMode::Welford => (self.spread / (self.count - 1) as f64).max(0.0).sqrt(),
        }
    }

    fn observe(&mut self, r: f64, mode: StatsMode) {
        self.count += 1;
        match mode {
            StatsMode::Ema { decay } => {
                let diff = r - self.mean;
                let incr = (1.0 - decay) * diff;
                self.mean += incr;
                self.spread = decay * (self.spread + diff * incr);
            }
            StatsMode::Welford => {
                let delta = r - self.mean;
                self.mean += delta / self.count as f64;
                self.spread += delta * (r - self.mean);
            }
        }
    }
}

/// Key of the running-statistics table.
pub type StatsKey = (String, usize);

/// Per-(prompt, timestep) running reward statistics. Entries are created on
/// first observation with the mean set to that observation.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunningStats {
    pub mode: StatsMode,
    table: HashMap<StatsKey, StatsEntry>,
}

impl RunningStats {
    pub fn new(mode: StatsMode) -> Self {
        Self {
            mode,
            table: HashMap::new(),
        }
    }

    pub fn get(&self, prompt_id: &str, timestep: usize) -> Option<&StatsEntry> {
        self.table.get(&(prompt_id.to_string(), timestep))
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    /// Standardizes `reward` against the current entry, then folds it in.
    pub fn advantage(&mut self, reward: f64, prompt_id: &str, timestep: usize, epsilon: f64) -> f64 {
        let mode = self.mode;
        let entry = self
            .table
            .entry((prompt_id.to_string(), timestep))
            .or_insert(StatsEntry {
                mean: reward,
                spread: 0.0,
                count: 0,
            });
        let adv = (reward - entry.mean) / (entry.std(mode) + epsilon);
        if entry.count == 0 {
            // the seeded mean already equals the first observation
            entry.count = 1;
        } else {
            entry.observe(reward, mode);
        }
        adv
    }
}

/// Free-function form of [`RunningStats::advantage`].
pub fn advantage(
    reward: f64,
    key: (&str, usize),
    stats: &mut RunningStats,
    epsilon: f64,
) -> f64 {
    stats.advantage(reward, key.0, key.1, epsilon)
}
