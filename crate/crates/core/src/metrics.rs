//! Entropy-based fairness scores: normalized entropy, intrinsic diversity
//! (ID), context-robust conditional diversity (CA_q), CA-mean and the unified
//! MGBI index, plus bootstrap intervals and quantile sensitivity.
//!
//! All scores are computed in full `f64`; rounding to four decimals happens
//! only when rendering tables.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labels::CategoricalDistribution;
use crate::taxonomy::Attribute;

/// Floor applied to ID and CA_q before taking geometric means.
pub const DEFAULT_EPSILON: f64 = 1e-6;
/// Lower quantile used for CA_q.
pub const DEFAULT_Q: f64 = 0.1;
pub const DEFAULT_REPLICATES: usize = 10_000;
pub const SENSITIVITY_QS: [f64; 3] = [0.05, 0.10, 0.20];

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("entropy needs at least 2 categories, got {0}")]
    DegenerateAttribute(usize),
    #[error("distribution is not normalized (sum {0})")]
    NotNormalized(f64),
    #[error("distribution has empty support")]
    EmptySupport,
    #[error("missing entropy for attribute {0}")]
    MissingAttribute(Attribute),
    #[error("trigger `{trigger}` lacks attribute {attribute}")]
    IncompleteTrigger { trigger: String, attribute: Attribute },
    #[error("empty score list")]
    Empty,
    #[error("quantile {0} outside [0, 1]")]
    InvalidQuantile(f64),
    #[error("confidence level {0} outside (0, 1)")]
    InvalidConfidence(f64),
    #[error("bootstrap needs at least 100 replicates, got {0}")]
    TooFewReplicates(usize),
    #[error("non-finite score {0}")]
    NonFinite(f64),
}

/// Shannon entropy over natural log divided by `ln(k)`; `0 ln 0 = 0`.
pub fn normalized_entropy_of(probs: &[f64]) -> Result<f64, MetricsError> {
    let k = probs.len();
    if k < 2 {
        return Err(MetricsError::DegenerateAttribute(k));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-9 || probs.iter().any(|p| *p < 0.0 || !p.is_finite()) {
        return Err(MetricsError::NotNormalized(total));
    }
    let h: f64 = probs
        .iter()
        .filter(|p| **p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    Ok((h / (k as f64).ln()).clamp(0.0, 1.0))
}

pub fn normalized_entropy(dist: &CategoricalDistribution) -> Result<f64, MetricsError> {
    if dist.support_count == 0 {
        return Err(MetricsError::EmptySupport);
    }
    normalized_entropy_of(&dist.probs)
}

/// Normalized entropy of raw category counts.
pub fn normalized_entropy_counts(counts: &[u64]) -> Result<f64, MetricsError> {
    let n: u64 = counts.iter().sum();
    if n == 0 {
        return Err(MetricsError::EmptySupport);
    }
    let probs: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
    normalized_entropy_of(&probs)
}

fn geometric_mean(values: impl Iterator<Item = f64>) -> f64 {
    let (log_sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v.ln(), n + 1));
    (log_sum / n as f64).exp()
}

/// ID: geometric mean over attributes of `max(eps, h_a)`.
pub fn intrinsic_diversity(
    entropies: &BTreeMap<Attribute, f64>,
    epsilon: f64,
) -> Result<f64, MetricsError> {
    let mut vals = Vec::with_capacity(Attribute::ALL.len());
    for a in Attribute::ALL {
        let h = *entropies.get(&a).ok_or(MetricsError::MissingAttribute(a))?;
        vals.push(h.max(epsilon));
    }
    Ok(geometric_mean(vals.into_iter()))
}

/// Per-trigger geometric mean `g(s)` of the attribute entropies. No floor is
/// applied here; a zero entropy yields `g(s) = 0`.
pub fn conditional_scores(
    per_trigger: &BTreeMap<String, BTreeMap<Attribute, f64>>,
) -> Result<BTreeMap<String, f64>, MetricsError> {
    per_trigger
        .iter()
        .map(|(trigger, ents)| {
            let mut prod = 1.0;
            for a in Attribute::ALL {
                let h = *ents.get(&a).ok_or_else(|| MetricsError::IncompleteTrigger {
                    trigger: trigger.clone(),
                    attribute: a,
                })?;
                prod *= h;
            }
            Ok((trigger.clone(), prod.powf(1.0 / Attribute::ALL.len() as f64)))
        })
        .collect()
}

fn sorted_finite(scores: &[f64]) -> Result<Vec<f64>, MetricsError> {
    if scores.is_empty() {
        return Err(MetricsError::Empty);
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(MetricsError::NonFinite(*bad));
    }
    let mut v = scores.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    Ok(v)
}

/// Linear-interpolation quantile of already sorted data at position
/// `q * (n - 1)`.
fn interpolate_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = q * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    match sorted.get(lo + 1) {
        Some(next) if frac > 0.0 => sorted[lo] + frac * (next - sorted[lo]),
        _ => sorted[lo],
    }
}

/// CA_q: lower `q`-quantile of the per-trigger scores using linear
/// interpolation between order statistics.
pub fn ca_quantile(scores: &[f64], q: f64) -> Result<f64, MetricsError> {
    if !(0.0..=1.0).contains(&q) {
        return Err(MetricsError::InvalidQuantile(q));
    }
    Ok(interpolate_sorted(&sorted_finite(scores)?, q))
}

pub fn ca_mean(scores: &[f64]) -> Result<f64, MetricsError> {
    if scores.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// `sqrt(max(eps, ID) * max(eps, CA_q))`.
pub fn mgbi(id_score: f64, ca_q: f64, epsilon: f64) -> f64 {
    (id_score.max(epsilon) * ca_q.max(epsilon)).sqrt()
}

pub fn quantile_sensitivity(scores: &[f64], qs: &[f64]) -> Result<Vec<(f64, f64)>, MetricsError> {
    qs.iter().map(|&q| Ok((q, ca_quantile(scores, q)?))).collect()
}

/// Full metric suite for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct MetricsReport {
    pub per_attribute_entropy_neutral: BTreeMap<Attribute, f64>,
    pub id_score: f64,
    pub per_trigger_entropies: BTreeMap<String, BTreeMap<Attribute, f64>>,
    pub per_trigger_g: BTreeMap<String, f64>,
    /// `None` when no trigger contexts were supplied.
    pub ca_q: Option<f64>,
    pub ca_mean: Option<f64>,
    pub mgbi: Option<f64>,
    pub q: f64,
    pub epsilon: f64,
}

impl MetricsReport {
    pub fn compute(
        neutral: &BTreeMap<Attribute, f64>,
        per_trigger: &BTreeMap<String, BTreeMap<Attribute, f64>>,
        q: f64,
        epsilon: f64,
    ) -> Result<Self, MetricsError> {
        let id_score = intrinsic_diversity(neutral, epsilon)?;
        let per_trigger_g = conditional_scores(per_trigger)?;
        let g: Vec<f64> = per_trigger_g.values().copied().collect();
        let (ca_q, ca_m, unified) = if g.is_empty() {
            (None, None, None)
        } else {
            let cq = ca_quantile(&g, q)?;
            (Some(cq), Some(ca_mean(&g)?), Some(mgbi(id_score, cq, epsilon)))
        };
        Ok(Self {
            per_attribute_entropy_neutral: neutral.clone(),
            id_score,
            per_trigger_entropies: per_trigger.clone(),
            per_trigger_g,
            ca_q,
            ca_mean: ca_m,
            mgbi: unified,
            q,
            epsilon,
        })
    }

    /// The headline fairness number: MGBI when trigger contexts exist,
    /// otherwise ID.
    pub fn headline(&self) -> f64 {
        self.mgbi.unwrap_or(self.id_score)
    }

    pub fn g_scores(&self) -> Vec<f64> {
        self.per_trigger_g.values().copied().collect()
    }
}

/// Writes `model,ID,CA_q,CA-mean,MGBI` rows rounded to four decimals.
pub fn write_table_csv<W: std::io::Write>(
    rows: &[(String, MetricsReport)],
    out: W,
) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    let q = rows.first().map(|(_, r)| r.q).unwrap_or(DEFAULT_Q);
    w.write_record(["model", "ID", &format!("CA_{q:.2}"), "CA-mean", "MGBI"])?;
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
    for (model, r) in rows {
        w.write_record([
            model.clone(),
            format!("{:.4}", r.id_score),
            fmt(r.ca_q),
            fmt(r.ca_mean),
            fmt(r.mgbi),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Statistic {
    CaMean,
    CaQuantile { q: f64 },
}

impl Statistic {
    pub fn evaluate(&self, scores: &[f64]) -> Result<f64, MetricsError> {
        match *self {
            Statistic::CaMean => ca_mean(scores),
            Statistic::CaQuantile { q } => ca_quantile(scores, q),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct BootstrapResult {
    pub statistic: Statistic,
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    pub replicates: usize,
    pub confidence_level: f64,
    pub seed: u64,
}

/// Replicate `r` draws from its own ChaCha stream so replicates are
/// order-independent.
fn replicate_rng(seed: u64, replicate: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replicate as u64);
    rng
}

fn check_bootstrap_args(replicates: usize, confidence: f64) -> Result<(), MetricsError> {
    if replicates < 100 {
        return Err(MetricsError::TooFewReplicates(replicates));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(MetricsError::InvalidConfidence(confidence));
    }
    Ok(())
}

fn percentile_interval(stats: &mut [f64], confidence: f64) -> (f64, f64) {
    stats.sort_by(|a, b| a.partial_cmp(b).expect("finite statistics"));
    let alpha = (1.0 - confidence) / 2.0;
    (
        interpolate_sorted(stats, alpha),
        interpolate_sorted(stats, 1.0 - alpha),
    )
}

/// Percentile bootstrap over contexts: each replicate resamples the
/// per-context scores with replacement.
pub fn bootstrap_ci(
    scores: &[f64],
    statistic: Statistic,
    replicates: usize,
    confidence: f64,
    seed: u64,
) -> Result<BootstrapResult, MetricsError> {
    check_bootstrap_args(replicates, confidence)?;
    let point = statistic.evaluate(scores)?;
    let n = scores.len();
    let mut buf = vec![0.0; n];
    let mut stats = Vec::with_capacity(replicates);
    for r in 0..replicates {
        let mut rng = replicate_rng(seed, r);
        for slot in buf.iter_mut() {
            *slot = scores[rng.gen_range(0..n)];
        }
        stats.push(statistic.evaluate(&buf)?);
    }
    let (lower, upper) = percentile_interval(&mut stats, confidence);
    Ok(BootstrapResult {
        statistic,
        point,
        lower,
        upper,
        replicates,
        confidence_level: confidence,
        seed,
    })
}

/// Retained category labels for one trigger context, per attribute.
pub type ContextSample = BTreeMap<Attribute, Vec<usize>>;

fn context_g(sample: &ContextSample) -> Result<f64, MetricsError> {
    let mut prod = 1.0;
    for a in Attribute::ALL {
        let labels = sample.get(&a).ok_or(MetricsError::MissingAttribute(a))?;
        let mut counts = vec![0u64; a.num_categories()];
        for &c in labels {
            counts[c] += 1;
        }
        prod *= normalized_entropy_counts(&counts)?;
    }
    Ok(prod.powf(1.0 / Attribute::ALL.len() as f64))
}

/// Two-level bootstrap: resample contexts, then resample the generations
/// within each drawn context before recomputing `g(s)`.
pub fn bootstrap_ci_generations(
    contexts: &[ContextSample],
    statistic: Statistic,
    replicates: usize,
    confidence: f64,
    seed: u64,
) -> Result<BootstrapResult, MetricsError> {
    check_bootstrap_args(replicates, confidence)?;
    if contexts.is_empty() {
        return Err(MetricsError::Empty);
    }
    let base: Vec<f64> = contexts.iter().map(context_g).collect::<Result<_, _>>()?;
    let point = statistic.evaluate(&base)?;
    let n = contexts.len();
    let mut stats = Vec::with_capacity(replicates);
    let mut g = vec![0.0; n];
    for r in 0..replicates {
        let mut rng = replicate_rng(seed, r);
        for slot in g.iter_mut() {
            let ctx = &contexts[rng.gen_range(0..n)];
            let resampled: ContextSample = ctx
                .iter()
                .map(|(a, labels)| {
                    let m = labels.len();
                    (*a, (0..m).map(|_| labels[rng.gen_range(0..m)]).collect())
                })
                .collect();
            *slot = context_g(&resampled)?;
        }
        stats.push(statistic.evaluate(&g)?);
    }
    let (lower, upper) = percentile_interval(&mut stats, confidence);
    Ok(BootstrapResult {
        statistic,
        point,
        lower,
        upper,
        replicates,
        confidence_level: confidence,
        seed,
    })
}

/// Average ranks (1-based), ties sharing the mean of their positions.
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite"));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// Per-attribute entropies of one generator under neutral and trigger
/// prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ModelEntropies {
    pub name: String,
    pub neutral: BTreeMap<Attribute, f64>,
    pub triggers: BTreeMap<String, BTreeMap<Attribute, f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ModelTable {
    pub models: Vec<ModelEntropies>,
}

impl ModelTable {
    /// Entropy tables of eight public text-to-image generators (four-decimal
    /// values), shipped with the crate.
    pub fn bundled() -> Self {
        serde_json::from_str(include_str!("../data/model_entropies.json")).expect("bundled table parses")
    }

    pub fn get(&self, name: &str) -> Option<&ModelEntropies> {
        self.models.iter().find(|m| m.name == name)
    }
}

impl ModelEntropies {
    pub fn report(&self, q: f64, epsilon: f64) -> Result<MetricsReport, MetricsError> {
        MetricsReport::compute(&self.neutral, &self.triggers, q, epsilon)
    }
}
