//! Command-line front end. The `holofair` binary only forwards its arguments
//! to [`run`].

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::freqview::{self, Boundary, FreqError, ImageStack};
use crate::grpo::{self, Policy, Preset, SimConfig, SimError, Trajectory};
use crate::labels::{self, LabelError, LabelRecord};
use crate::metrics::{self, ContextSample, MetricsError, MetricsReport, Statistic};
use crate::prompts::{PromptError, PromptForge, PromptKind, PromptSet, TrainVocabulary};
use crate::reward::{self, RewardConfig, RewardError, RewardTable};
use crate::taxonomy::{Attribute, Taxonomy, TaxonomyError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_INTERNAL: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Io { .. } => EXIT_IO,
            CliError::Internal(_) => EXIT_INTERNAL,
        }
    }

    fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

macro_rules! validation_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Validation(e.to_string())
            }
        }
    )*};
}
validation_from!(MetricsError, RewardError, SimError, PromptError, TaxonomyError, serde_json::Error);

impl From<LabelError> for CliError {
    fn from(e: LabelError) -> Self {
        match e {
            LabelError::Io(source) => CliError::Io {
                path: PathBuf::from("<labels>"),
                source,
            },
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<FreqError> for CliError {
    fn from(e: FreqError) -> Self {
        match e {
            FreqError::Image(image::ImageError::IoError(source)) => CliError::Io {
                path: PathBuf::from("<image>"),
                source,
            },
            other => CliError::Validation(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "holofair", version, about = "Multi-attribute fairness metrics and group-relative debiasing tools")]
pub struct Cli {
    /// Print the effective configuration manifest and exit.
    #[arg(long, global = true)]
    pub manifest_only: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    /// Fairness report from classifier labels.
    Eval(EvalArgs),
    /// Confidence interval for the context-robust scores.
    Bootstrap(BootstrapArgs),
    /// Group reward tables and reward curves.
    Reward(RewardArgs),
    /// Run the policy-optimization simulator.
    Simulate(SimulateArgs),
    /// Build Gen / Eval / Train prompt sets.
    Prompts(PromptsArgs),
    /// Wavelet frequency view of a PNG image.
    Freqview(FreqviewArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Eval(_) => "eval",
            Command::Bootstrap(_) => "bootstrap",
            Command::Reward(_) => "reward",
            Command::Simulate(_) => "simulate",
            Command::Prompts(_) => "prompts",
            Command::Freqview(_) => "freqview",
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct LabelInput {
    /// Label file (JSONL, or CSV when the extension is .csv).
    #[arg(long)]
    pub labels: PathBuf,
    /// Prompt JSONL mapping prompt ids to contexts. Without it, prompt ids
    /// are read as `<context>/<rest>` with context `neutral` or a trigger.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    /// Taxonomy JSON (defaults to $HOLOFAIR_TAXONOMY, then built-in).
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    /// Abstention threshold.
    #[arg(long, default_value_t = 0.0)]
    pub tau: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[command(flatten)]
    pub input: LabelInput,
    #[arg(long, default_value_t = metrics::DEFAULT_Q)]
    pub q: f64,
    #[arg(long, default_value_t = metrics::DEFAULT_EPSILON)]
    pub epsilon: f64,
    /// Model name used in the CSV row.
    #[arg(long, default_value = "model")]
    pub model: String,
    /// Report JSON destination.
    #[arg(long)]
    pub out: PathBuf,
    /// Table-shaped CSV destination.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Resample {
    Contexts,
    Generations,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StatisticArg {
    CaMean,
    CaQuantile,
}

#[derive(Debug, Args, Serialize)]
pub struct BootstrapArgs {
    /// JSON array of per-context scores, or an object mapping context to score.
    #[arg(long, conflicts_with = "labels")]
    pub scores: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long, requires = "labels")]
    pub prompts: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    pub tau: f64,
    #[arg(long, value_enum, default_value_t = Resample::Contexts)]
    pub resample: Resample,
    #[arg(long, value_enum, default_value_t = StatisticArg::CaMean)]
    pub statistic: StatisticArg,
    #[arg(long, default_value_t = metrics::DEFAULT_Q)]
    pub q: f64,
    #[arg(long, default_value_t = metrics::DEFAULT_REPLICATES)]
    pub replicates: usize,
    #[arg(long, default_value_t = 0.95)]
    pub confidence: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct RewardArgs {
    /// GroupCounts JSON.
    #[arg(long, required_unless_present = "curve")]
    pub counts: Option<PathBuf>,
    /// Labels for the group; adds per-image rewards to the output.
    #[arg(long, requires = "counts")]
    pub labels: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    pub tau: f64,
    /// RewardConfig JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Reward curve spec, e.g. `N=20 C=2`.
    #[arg(long, num_args = 1..=2)]
    pub curve: Option<Vec<String>>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    /// JSON with optional `sim` (SimConfig) and `reward` (RewardConfig).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Preset name (uniform, biased-gender, biased-all) or Policy JSON file.
    #[arg(long, default_value = "biased-all")]
    pub ref_policy: String,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Trajectory JSONL destination.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-update CSV destination.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptSetArg {
    Gen,
    Eval,
    Train,
}

#[derive(Debug, Args, Serialize)]
pub struct PromptsArgs {
    #[arg(long, value_enum)]
    pub kind: PromptSetArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Train set size.
    #[arg(long, default_value_t = crate::prompts::TRAIN_DEFAULT)]
    pub n: usize,
    /// Train vocabulary JSON (defaults to the bundled placeholder).
    #[arg(long)]
    pub vocabulary: Option<PathBuf>,
    /// Neutral-only train set (empty vocabulary).
    #[arg(long, conflicts_with = "vocabulary")]
    pub neutral_only: bool,
    /// Seed of the Eval set the Train set must avoid.
    #[arg(long, default_value_t = 0)]
    pub eval_seed: u64,
    /// Pools / triggers / conflict-table override JSON.
    #[arg(long)]
    pub pools: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryArg {
    Symmetric,
    Periodization,
}

impl From<BoundaryArg> for Boundary {
    fn from(b: BoundaryArg) -> Self {
        match b {
            BoundaryArg::Symmetric => Boundary::Symmetric,
            BoundaryArg::Periodization => Boundary::Periodization,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct FreqviewArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// 3-channel frequency-view PNG destination.
    #[arg(long)]
    pub out: PathBuf,
    /// Unnormalized view as JSON.
    #[arg(long)]
    pub raw: Option<PathBuf>,
    /// Directory receiving cA/cH/cV/cD PNGs and their raw JSON.
    #[arg(long)]
    pub bands: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = BoundaryArg::Symmetric)]
    pub boundary: BoundaryArg,
}

/// Provenance record written next to every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct RunManifest {
    pub subcommand: String,
    pub version: String,
    pub seed: Option<u64>,
    /// Effective arguments, defaults included.
    pub config: serde_json::Value,
    /// File path → sha256 hex digest.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn manifest_for(command: &Command, extra_config: Option<serde_json::Value>) -> Result<RunManifest, CliError> {
    let mut inputs = BTreeMap::new();
    let mut digest = |p: &Option<PathBuf>| -> Result<(), CliError> {
        if let Some(p) = p {
            inputs.insert(p.display().to_string(), sha256_file(p)?);
        }
        Ok(())
    };
    let (seed, outputs): (Option<u64>, Vec<&PathBuf>) = match command {
        Command::Eval(a) => {
            digest(&Some(a.input.labels.clone()))?;
            digest(&a.input.prompts)?;
            digest(&a.input.taxonomy)?;
            (None, std::iter::once(&a.out).chain(a.csv.iter()).collect())
        }
        Command::Bootstrap(a) => {
            digest(&a.scores)?;
            digest(&a.labels)?;
            digest(&a.prompts)?;
            (Some(a.seed), vec![&a.out])
        }
        Command::Reward(a) => {
            digest(&a.counts)?;
            digest(&a.labels)?;
            digest(&a.config)?;
            (None, vec![&a.out])
        }
        Command::Simulate(a) => {
            digest(&a.config)?;
            let policy_file = PathBuf::from(&a.ref_policy);
            if policy_file.is_file() {
                digest(&Some(policy_file))?;
            }
            (a.seed, std::iter::once(&a.out).chain(a.csv.iter()).collect())
        }
        Command::Prompts(a) => {
            digest(&a.vocabulary)?;
            digest(&a.pools)?;
            (Some(a.seed), vec![&a.out])
        }
        Command::Freqview(a) => {
            digest(&Some(a.input.clone()))?;
            (None, std::iter::once(&a.out).chain(a.raw.iter()).chain(a.bands.iter()).collect())
        }
    };
    let mut config = serde_json::to_value(command)?;
    if let (Some(extra), serde_json::Value::Object(map)) = (extra_config, &mut config) {
        map.insert("effective".into(), extra);
    }
    Ok(RunManifest {
        subcommand: command.name().to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed,
        config,
        inputs,
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
    })
}

/// `<output>.manifest.json`.
pub fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    output.with_file_name(name)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn read_labels(path: &Path) -> Result<Vec<LabelRecord>, CliError> {
    let file = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let records = if is_csv {
        labels::parse_labels_csv(file)
    } else {
        labels::parse_labels(BufReader::new(file))
    };
    records.map_err(|e| match e {
        LabelError::Io(source) => CliError::io(path, source),
        other => other.into(),
    })
}

fn load_taxonomy(path: Option<&Path>) -> Result<Taxonomy, CliError> {
    match path {
        Some(p) => Ok(Taxonomy::from_json(&read_text(p)?)?),
        None => Ok(Taxonomy::from_env()?),
    }
}

/// Evaluation context of a prompt group.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Context {
    Neutral,
    Trigger(String),
}

/// Resolves prompt ids to contexts, from a prompt file or the
/// `<context>/<rest>` naming convention.
#[derive(Debug, Clone, Default)]
pub struct ContextMap {
    pub by_prompt: BTreeMap<String, Context>,
}

impl ContextMap {
    pub fn from_prompt_set(set: &PromptSet) -> Self {
        let by_prompt = set
            .prompts
            .iter()
            .filter_map(|p| {
                let ctx = match (p.kind, &p.trigger) {
                    (PromptKind::EvalTrigger, Some(t)) => Context::Trigger(t.clone()),
                    (PromptKind::EvalNeutral, _) => Context::Neutral,
                    _ => return None,
                };
                Some((p.id.clone(), ctx))
            })
            .collect();
        Self { by_prompt }
    }

    pub fn resolve(&self, prompt_id: &str, taxonomy: &Taxonomy) -> Result<Context, CliError> {
        if let Some(c) = self.by_prompt.get(prompt_id) {
            return Ok(c.clone());
        }
        let head = prompt_id.split('/').next().unwrap_or_default();
        if head == "neutral" {
            Ok(Context::Neutral)
        } else if taxonomy.triggers.triggers.contains_key(head) {
            Ok(Context::Trigger(head.to_string()))
        } else {
            Err(CliError::Validation(format!(
                "cannot place prompt `{prompt_id}` in a context; supply --prompts or name it `neutral/...` or `<trigger>/...`"
            )))
        }
    }
}

fn load_context_map(path: Option<&Path>) -> Result<ContextMap, CliError> {
    match path {
        None => Ok(ContextMap::default()),
        Some(p) => {
            let file = fs::File::open(p).map_err(|e| CliError::io(p, e))?;
            let set = PromptSet::read_jsonl(crate::prompts::SetKind::Eval, 0, BufReader::new(file))?;
            Ok(ContextMap::from_prompt_set(&set))
        }
    }
}

/// Records grouped by context.
pub fn split_by_context(
    records: &[LabelRecord],
    contexts: &ContextMap,
    taxonomy: &Taxonomy,
) -> Result<BTreeMap<Context, Vec<LabelRecord>>, CliError> {
    let mut out: BTreeMap<Context, Vec<LabelRecord>> = BTreeMap::new();
    for r in records {
        out.entry(contexts.resolve(&r.prompt_id, taxonomy)?)
            .or_default()
            .push(r.clone());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct EvalOutput {
    pub report: MetricsReport,
    pub warnings: Vec<String>,
}

fn context_entropies(records: &[LabelRecord], tau: f64) -> Result<BTreeMap<Attribute, f64>, LabelError> {
    Attribute::ALL
        .iter()
        .map(|&a| {
            let d = labels::empirical_distribution(records, a, tau)?;
            Ok((a, metrics::normalized_entropy(&d).expect("distribution is normalized")))
        })
        .collect()
}

/// Full metrics report from labels. Trigger contexts are optional; without
/// them the report carries ID only and a warning.
pub fn report_from_labels(
    records: &[LabelRecord],
    contexts: &ContextMap,
    taxonomy: &Taxonomy,
    tau: f64,
    q: f64,
    epsilon: f64,
) -> Result<EvalOutput, CliError> {
    let groups = split_by_context(records, contexts, taxonomy)?;
    let mut empty = Vec::new();
    let mut per_context = BTreeMap::new();
    for (ctx, recs) in &groups {
        match context_entropies(recs, tau) {
            Ok(e) => {
                per_context.insert(ctx.clone(), e);
            }
            Err(LabelError::EmptySupport { attribute, .. }) => {
                empty.push(format!("{ctx:?}/{attribute}"));
            }
            Err(other) => return Err(other.into()),
        }
    }
    if !empty.is_empty() {
        return Err(CliError::Validation(format!(
            "groups with empty support at tau = {tau}: {}",
            empty.join(", ")
        )));
    }
    let neutral = per_context
        .remove(&Context::Neutral)
        .ok_or_else(|| CliError::Validation("no neutral-prompt labels".into()))?;
    let triggers: BTreeMap<String, BTreeMap<Attribute, f64>> = per_context
        .into_iter()
        .filter_map(|(c, e)| match c {
            Context::Trigger(t) => Some((t, e)),
            Context::Neutral => None,
        })
        .collect();
    let mut warnings = Vec::new();
    if triggers.is_empty() {
        warnings.push("no trigger-prompt labels; CA_q, CA-mean and MGBI omitted".to_string());
    }
    let report = MetricsReport::compute(&neutral, &triggers, q, epsilon)?;
    Ok(EvalOutput { report, warnings })
}

fn cmd_eval(a: &EvalArgs) -> Result<Vec<String>, CliError> {
    let taxonomy = load_taxonomy(a.input.taxonomy.as_deref())?;
    let records = read_labels(&a.input.labels)?;
    let contexts = load_context_map(a.input.prompts.as_deref())?;
    let out = report_from_labels(&records, &contexts, &taxonomy, a.input.tau, a.q, a.epsilon)?;
    write_json(&a.out, &out)?;
    if let Some(csv_path) = &a.csv {
        let mut buf = Vec::new();
        metrics::write_table_csv(&[(a.model.clone(), out.report.clone())], &mut buf)
            .map_err(|e| CliError::Internal(e.to_string()))?;
        write_bytes(csv_path, &buf)?;
    }
    Ok(out.warnings)
}

fn statistic_of(arg: StatisticArg, q: f64) -> Statistic {
    match arg {
        StatisticArg::CaMean => Statistic::CaMean,
        StatisticArg::CaQuantile => Statistic::CaQuantile { q },
    }
}

fn read_scores(path: &Path) -> Result<Vec<f64>, CliError> {
    let value: serde_json::Value = serde_json::from_str(&read_text(path)?)?;
    let scores = match value {
        serde_json::Value::Object(map) => map.into_values().map(serde_json::from_value).collect(),
        other => serde_json::from_value(other),
    }?;
    Ok(scores)
}

/// Per-trigger retained labels, one entry per image and attribute.
pub fn context_samples(
    records: &[LabelRecord],
    contexts: &ContextMap,
    taxonomy: &Taxonomy,
    tau: f64,
) -> Result<Vec<ContextSample>, CliError> {
    let groups = split_by_context(records, contexts, taxonomy)?;
    Ok(groups
        .into_iter()
        .filter(|(c, _)| matches!(c, Context::Trigger(_)))
        .map(|(_, recs)| {
            Attribute::ALL
                .iter()
                .map(|&a| {
                    let labels = recs
                        .iter()
                        .filter(|r| r.attribute == a && r.confidence >= tau)
                        .map(|r| r.category)
                        .collect();
                    (a, labels)
                })
                .collect()
        })
        .collect())
}

fn cmd_bootstrap(a: &BootstrapArgs) -> Result<Vec<String>, CliError> {
    let statistic = statistic_of(a.statistic, a.q);
    let result = match (&a.scores, &a.labels) {
        (Some(path), _) => {
            if a.resample == Resample::Generations {
                return Err(CliError::Validation("--resample generations needs --labels".into()));
            }
            metrics::bootstrap_ci(&read_scores(path)?, statistic, a.replicates, a.confidence, a.seed)?
        }
        (None, Some(path)) => {
            let taxonomy = Taxonomy::from_env()?;
            let records = read_labels(path)?;
            let contexts = load_context_map(a.prompts.as_deref())?;
            match a.resample {
                Resample::Contexts => {
                    let out = report_from_labels(&records, &contexts, &taxonomy, a.tau, a.q, metrics::DEFAULT_EPSILON)?;
                    metrics::bootstrap_ci(&out.report.g_scores(), statistic, a.replicates, a.confidence, a.seed)?
                }
                Resample::Generations => {
                    let samples = context_samples(&records, &contexts, &taxonomy, a.tau)?;
                    metrics::bootstrap_ci_generations(&samples, statistic, a.replicates, a.confidence, a.seed)?
                }
            }
        }
        (None, None) => return Err(CliError::Validation("supply --scores or --labels".into())),
    };
    write_json(&a.out, &result)?;
    Ok(vec![])
}

/// Parses `N=20 C=2` (as one or two tokens).
pub fn parse_curve_spec(tokens: &[String]) -> Result<(u64, usize), CliError> {
    let mut n = None;
    let mut c = None;
    for part in tokens.iter().flat_map(|t| t.split([' ', ','])).filter(|s| !s.is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| CliError::Validation(format!("bad curve term `{part}`")))?;
        let bad = || CliError::Validation(format!("bad curve value `{part}`"));
        match k.trim() {
            "N" | "n" => n = Some(v.trim().parse().map_err(|_| bad())?),
            "C" | "c" => c = Some(v.trim().parse().map_err(|_| bad())?),
            _ => return Err(bad()),
        }
    }
    match (n, c) {
        (Some(n), Some(c)) => Ok((n, c)),
        _ => Err(CliError::Validation("curve spec needs N=<group size> C=<categories>".into())),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct RewardOutput {
    pub table: RewardTable,
    /// Image id → aggregated reward, when labels were supplied.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub image_rewards: BTreeMap<String, f64>,
}

fn cmd_reward(a: &RewardArgs) -> Result<Vec<String>, CliError> {
    let config: RewardConfig = match &a.config {
        Some(p) => serde_json::from_str(&read_text(p)?)?,
        None => RewardConfig::default(),
    };
    config.validate()?;
    if let Some(spec) = &a.curve {
        let (n, c) = parse_curve_spec(spec)?;
        let points = reward::reward_curve(n, c, &config)?;
        let mut w = csv::Writer::from_writer(Vec::new());
        let internal = |e: csv::Error| CliError::Internal(e.to_string());
        w.write_record(["n_k", "base", "centered", "clipped"]).map_err(internal)?;
        for p in &points {
            w.serialize((p.n_k, p.base, p.centered, p.clipped)).map_err(internal)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Internal(e.to_string()))?;
        write_bytes(&a.out, &bytes)?;
        return Ok(vec![]);
    }
    let counts_path = a.counts.as_ref().expect("clap enforces --counts");
    let counts: labels::GroupCounts = serde_json::from_str(&read_text(counts_path)?)?;
    counts.validate()?;
    let table = RewardTable::build(&counts, &config)?;
    let mut image_rewards = BTreeMap::new();
    if let Some(path) = &a.labels {
        let records = read_labels(path)?;
        for (image, assignment) in labels::assignments_by_image(&records, &counts.prompt_id, a.tau) {
            image_rewards.insert(image, table.image_reward(&assignment, &config)?);
        }
    }
    write_json(&a.out, &RewardOutput { table, image_rewards })?;
    Ok(vec![])
}

/// Simulator configuration file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize, JsonSchema)]
#[serde(default)]
pub struct SimulateConfig {
    pub sim: SimConfig,
    pub reward: RewardConfig,
}

/// One line of the trajectory JSONL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TrajectoryLine {
    Update(grpo::UpdateRecord),
    Checkpoint(grpo::Checkpoint),
    Warning(grpo::Warning),
    FinalPolicy(Policy),
}

pub fn trajectory_lines(t: &Trajectory) -> Vec<TrajectoryLine> {
    t.updates
        .iter()
        .cloned()
        .map(TrajectoryLine::Update)
        .chain(t.checkpoints.iter().cloned().map(TrajectoryLine::Checkpoint))
        .chain(t.warnings.iter().cloned().map(TrajectoryLine::Warning))
        .chain(std::iter::once(TrajectoryLine::FinalPolicy(t.final_policy.clone())))
        .collect()
}

fn simulate_setup(a: &SimulateArgs) -> Result<(SimulateConfig, Policy), CliError> {
    let mut cfg: SimulateConfig = match &a.config {
        Some(p) => serde_json::from_str(&read_text(p)?)?,
        None => SimulateConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.sim.seed = seed;
    }
    let policy = match a.ref_policy.parse::<Preset>() {
        Ok(preset) => Policy::preset(preset, &cfg.sim.contexts),
        Err(_) => {
            let path = Path::new(&a.ref_policy);
            if !path.is_file() {
                return Err(CliError::Validation(format!(
                    "--ref-policy `{}` is neither a preset (uniform, biased-gender, biased-all) nor a file",
                    a.ref_policy
                )));
            }
            let p: Policy = serde_json::from_str(&read_text(path)?)?;
            p.validate()?;
            p
        }
    };
    Ok((cfg, policy))
}

fn cmd_simulate(a: &SimulateArgs) -> Result<Vec<String>, CliError> {
    let (cfg, policy) = simulate_setup(a)?;
    let trajectory = grpo::train(cfg.sim, cfg.reward, policy)?;
    let mut buf = Vec::new();
    for line in trajectory_lines(&trajectory) {
        serde_json::to_writer(&mut buf, &line)?;
        buf.push(b'\n');
    }
    write_bytes(&a.out, &buf)?;
    if let Some(csv_path) = &a.csv {
        let mut out = Vec::new();
        trajectory.write_csv(&mut out).map_err(|e| CliError::Internal(e.to_string()))?;
        write_bytes(csv_path, &out)?;
    }
    Ok(trajectory.warnings.iter().map(|w| format!("epoch {}: {}", w.epoch, w.message)).collect())
}

fn cmd_prompts(a: &PromptsArgs) -> Result<Vec<String>, CliError> {
    let forge = match &a.pools {
        Some(p) => PromptForge::from_json(&read_text(p)?)?,
        None => PromptForge::default(),
    };
    let set = match a.kind {
        PromptSetArg::Gen => forge.build_gen_set(a.seed)?,
        PromptSetArg::Eval => forge.build_eval_set(a.seed)?,
        PromptSetArg::Train => {
            let vocab = if a.neutral_only {
                TrainVocabulary::default()
            } else {
                match &a.vocabulary {
                    Some(p) => TrainVocabulary::from_json(&read_text(p)?)?,
                    None => TrainVocabulary::placeholder(),
                }
            };
            let eval = forge.build_eval_set(a.eval_seed)?;
            forge.build_train_set(a.n, a.seed, &vocab, Some(&eval))?
        }
    };
    let mut buf = Vec::new();
    set.write_jsonl(&mut buf).map_err(|e| CliError::Internal(e.to_string()))?;
    write_bytes(&a.out, &buf)?;
    Ok(vec![])
}

fn cmd_freqview(a: &FreqviewArgs) -> Result<Vec<String>, CliError> {
    freqview::db4_self_check()?;
    if !a.input.is_file() {
        return Err(CliError::io(
            &a.input,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        ));
    }
    let rgb = ImageStack::read_png(&a.input)?;
    let gray = freqview::grayscale(&rgb)?;
    let boundary: Boundary = a.boundary.into();
    let view = freqview::frequency_view(&gray, boundary)?;
    view.write_png(&a.out)?;
    let bands = freqview::dwt2_db4(&gray, boundary)?;
    if let Some(raw) = &a.raw {
        let stack = ImageStack {
            channels: vec![bands.ca.clone(), bands.ch.clone(), bands.cv.clone()],
        };
        write_json(raw, &stack)?;
    }
    if let Some(dir) = &a.bands {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        for (name, band) in [("ca", &bands.ca), ("ch", &bands.ch), ("cv", &bands.cv), ("cd", &bands.cd)] {
            let normalized = freqview::min_max_normalize(band, band.min_max());
            ImageStack { channels: vec![normalized] }.write_png(dir.join(format!("{name}.png")))?;
        }
        write_json(&dir.join("bands.json"), &bands)?;
    }
    Ok(vec![])
}

fn primary_output(command: &Command) -> &Path {
    match command {
        Command::Eval(a) => &a.out,
        Command::Bootstrap(a) => &a.out,
        Command::Reward(a) => &a.out,
        Command::Simulate(a) => &a.out,
        Command::Prompts(a) => &a.out,
        Command::Freqview(a) => &a.out,
    }
}

fn effective_config(command: &Command) -> Result<Option<serde_json::Value>, CliError> {
    Ok(match command {
        Command::Simulate(a) => {
            let (cfg, policy) = simulate_setup(a)?;
            Some(serde_json::json!({ "config": cfg, "ref_policy": policy }))
        }
        Command::Reward(a) => {
            let cfg: RewardConfig = match &a.config {
                Some(p) => serde_json::from_str(&read_text(p)?)?,
                None => RewardConfig::default(),
            };
            Some(serde_json::to_value(cfg)?)
        }
        _ => None,
    })
}

/// Executes a parsed command line, returning warnings for stderr.
pub fn execute(cli: &Cli, stdout: &mut dyn Write) -> Result<Vec<String>, CliError> {
    let manifest = manifest_for(&cli.command, effective_config(&cli.command)?)?;
    if cli.manifest_only {
        let text = serde_json::to_string_pretty(&manifest)?;
        writeln!(stdout, "{text}").map_err(|e| CliError::io(Path::new("<stdout>"), e))?;
        return Ok(vec![]);
    }
    let warnings = match &cli.command {
        Command::Eval(a) => cmd_eval(a)?,
        Command::Bootstrap(a) => cmd_bootstrap(a)?,
        Command::Reward(a) => cmd_reward(a)?,
        Command::Simulate(a) => cmd_simulate(a)?,
        Command::Prompts(a) => cmd_prompts(a)?,
        Command::Freqview(a) => cmd_freqview(a)?,
    };
    write_json(&manifest_path(primary_output(&cli.command)), &manifest)?;
    Ok(warnings)
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    match execute(&cli, &mut std::io::stdout()) {
        Ok(warnings) => {
            for w in warnings {
                eprintln!("warning: {w}");
            }
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// JSON schemas of every machine-readable output, keyed by file stem.
pub fn output_schemas() -> BTreeMap<&'static str, schemars::schema::RootSchema> {
    BTreeMap::from([
        ("eval_output", schemars::schema_for!(EvalOutput)),
        ("bootstrap_result", schemars::schema_for!(metrics::BootstrapResult)),
        ("reward_output", schemars::schema_for!(RewardOutput)),
        ("trajectory_line", schemars::schema_for!(TrajectoryLine)),
        ("prompt", schemars::schema_for!(crate::prompts::Prompt)),
        ("run_manifest", schemars::schema_for!(RunManifest)),
        ("simulate_config", schemars::schema_for!(SimulateConfig)),
        ("group_counts", schemars::schema_for!(labels::GroupCounts)),
        ("label_record", schemars::schema_for!(labels::RawLabel)),
    ])
}
