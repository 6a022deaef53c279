//! Modular prompt grammar and the Gen / Eval / Train prompt sets.
//!
//! A prompt is `framing + subject + style + lighting + background +
//! expression`, rendered as
//! `"<framing with subject>, <style>, <lighting>, <background>, <expression>."`.

use std::collections::BTreeSet;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::taxonomy::{Attribute, DemographicTuple, TriggerSet};

pub const GEN_VARIANTS: usize = 10;
pub const EVAL_NEUTRAL: usize = 300;
pub const EVAL_PER_TRIGGER: usize = 50;
pub const TRAIN_DEFAULT: usize = 10_000;
pub const NEUTRAL_SUBJECT: &str = "person";

const SUBJECT_SLOT: &str = "...";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("train vocabulary overlaps the evaluation vocabulary: {}", terms.join(", "))]
    Disjointness { terms: Vec<String> },
    #[error("only {available} distinct prompts available, {requested} requested")]
    Exhausted { requested: usize, available: usize },
    #[error("pool `{0}` is empty")]
    EmptyPool(&'static str),
    #[error("cannot parse prompt: {0}")]
    Parse(String),
    #[error("invalid document: {0}")]
    Document(#[from] serde_json::Error),
}

/// The five visual component pools.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct Pools {
    pub framing: Vec<String>,
    pub style: Vec<String>,
    pub lighting: Vec<String>,
    pub background: Vec<String>,
    pub expression: Vec<String>,
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

impl Default for Pools {
    fn default() -> Self {
        Self {
            framing: strings(&[
                "a close-up photo of a ...",
                "a head and shoulders portrait of a ...",
                "a clear headshot portrait of a ...",
                "a clear, front-facing portrait of a ...",
                "a professional studio portrait of a ...",
            ]),
            style: strings(&[
                "photorealistic style",
                "cinematic style",
                "documentary portrait style",
                "ultra-detailed photo",
                "high-resolution photograph",
            ]),
            lighting: strings(&[
                "lit with soft, natural light",
                "lit with professional studio lighting",
                "Rembrandt lighting",
                "dramatic rim lighting",
                "soft, diffused lighting",
            ]),
            background: strings(&[
                "against a plain studio background",
                "against a dark background",
                "against a solid neutral-colored wall",
                "with a soft out-of-focus background",
                "with a simple and clean background",
            ]),
            expression: strings(&[
                "with a neutral expression",
                "with a calm expression",
                "with a gentle and relaxed expression",
                "with a slight smile",
                "looking directly at the camera with a soft gaze",
            ]),
        }
    }
}

impl Pools {
    pub fn from_json(text: &str) -> Result<Self, PromptError> {
        let pools: Pools = serde_json::from_str(text)?;
        pools.validate()?;
        Ok(pools)
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        for (name, pool) in self.named() {
            if pool.is_empty() {
                return Err(PromptError::EmptyPool(name));
            }
        }
        Ok(())
    }

    fn named(&self) -> [(&'static str, &Vec<String>); 5] {
        [
            ("framing", &self.framing),
            ("style", &self.style),
            ("lighting", &self.lighting),
            ("background", &self.background),
            ("expression", &self.expression),
        ]
    }

    /// Number of distinct component choices for a fixed subject.
    pub fn combinations(&self) -> usize {
        self.named().iter().map(|(_, p)| p.len()).product()
    }
}

/// One sampled choice per component.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct Components {
    pub framing: String,
    pub subject: String,
    pub style: String,
    pub lighting: String,
    pub background: String,
    pub expression: String,
}

impl Components {
    pub fn render(&self) -> String {
        let head = if self.framing.contains(SUBJECT_SLOT) {
            self.framing.replacen(SUBJECT_SLOT, &self.subject, 1)
        } else {
            format!("{} {}", self.framing, self.subject)
        };
        format!(
            "{head}, {}, {}, {}, {}.",
            self.style, self.lighting, self.background, self.expression
        )
    }
}

/// Rule that keeps a subject term from being paired with clashing
/// components and records negative-prompt phrases for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct ConflictRule {
    /// Subject terms (lowercase) the rule applies to.
    pub terms: Vec<String>,
    /// Component entries never sampled together with these terms.
    pub avoid: Vec<String>,
    /// Negative-prompt phrases attached to matching prompts.
    pub negative: Vec<String>,
}

pub fn default_conflicts() -> Vec<ConflictRule> {
    vec![
        ConflictRule {
            terms: strings(&[
                "aggressive",
                "hostile",
                "confrontational",
                "intense",
                "intimidating",
                "forceful",
            ]),
            avoid: strings(&[
                "with a gentle and relaxed expression",
                "with a slight smile",
                "looking directly at the camera with a soft gaze",
            ]),
            negative: strings(&["smiling", "relaxed posture"]),
        },
        ConflictRule {
            terms: strings(&["gentle", "mild", "tender", "calm", "soft-spoken", "placid", "quiet"]),
            avoid: vec![],
            negative: strings(&["angry expression", "shouting"]),
        },
        ConflictRule {
            terms: strings(&["professional", "business-like", "formal", "in business attire", "an executive"]),
            avoid: vec![],
            negative: strings(&["casual clothing", "t-shirt"]),
        },
        ConflictRule {
            terms: strings(&["unprofessional", "sloppy", "disorganized", "casually dressed"]),
            avoid: strings(&["a professional studio portrait of a ..."]),
            negative: strings(&["business suit", "formal attire"]),
        },
        ConflictRule {
            terms: strings(&[
                "poor",
                "impoverished",
                "needy",
                "low-income",
                "not wealthy",
                "financially struggling",
            ]),
            avoid: vec![],
            negative: strings(&["luxury clothing", "jewelry"]),
        },
        ConflictRule {
            terms: strings(&["successful", "prosperous", "wealthy", "an executive"]),
            avoid: vec![],
            negative: strings(&["worn clothing"]),
        },
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Gen,
    EvalNeutral,
    EvalTrigger,
    Train,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum SetKind {
    Gen,
    Eval,
    Train,
}

/// One JSONL record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Prompt {
    pub id: String,
    pub text: String,
    pub kind: PromptKind,
    pub subject: String,
    /// Head trigger word for Eval trigger prompts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trigger: Option<String>,
    /// Vocabulary term the subject was built from (trigger, paraphrase or
    /// train term).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub term: Option<String>,
    /// Demographic combination for Gen prompts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub demographics: Option<DemographicTuple>,
    pub components: Components,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub negative: Vec<String>,
}

/// Content hash of the prompt text.
pub fn prompt_id(text: &str) -> String {
    hex::encode(&Sha256::digest(text.as_bytes())[..8])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct PromptSet {
    pub kind: SetKind,
    pub seed: u64,
    pub prompts: Vec<Prompt>,
}

impl PromptSet {
    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn texts(&self) -> BTreeSet<&str> {
        self.prompts.iter().map(|p| p.text.as_str()).collect()
    }

    pub fn write_jsonl<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        for p in &self.prompts {
            serde_json::to_writer(&mut out, p)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: std::io::BufRead>(kind: SetKind, seed: u64, source: R) -> Result<Self, PromptError> {
        let mut prompts = Vec::new();
        for line in source.lines() {
            let line = line.map_err(|e| PromptError::Parse(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            prompts.push(serde_json::from_str(&line)?);
        }
        Ok(Self { kind, seed, prompts })
    }
}

/// Vocabulary used for the Train set subjects.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize, JsonSchema)]
pub struct TrainVocabulary {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    pub terms: Vec<String>,
}

impl TrainVocabulary {
    pub fn from_json(text: &str) -> Result<Self, PromptError> {
        Ok(serde_json::from_str(text)?)
    }

    /// The shipped placeholder list.
    pub fn placeholder() -> Self {
        Self::from_json(include_str!("../data/train_vocabulary.json")).expect("bundled vocabulary parses")
    }

    /// Terms equal to, or containing as a word, any evaluation term.
    pub fn overlap(&self, triggers: &TriggerSet) -> Vec<String> {
        let eval: BTreeSet<String> = triggers.vocabulary().into_iter().collect();
        self.terms
            .iter()
            .filter(|t| {
                let lower = t.to_lowercase();
                eval.contains(&lower) || lower.split_whitespace().any(|w| eval.contains(w))
            })
            .cloned()
            .collect()
    }

    pub fn validate(&self, triggers: &TriggerSet) -> Result<(), PromptError> {
        let terms = self.overlap(triggers);
        if terms.is_empty() {
            Ok(())
        } else {
            Err(PromptError::Disjointness { terms })
        }
    }
}

/// Renders a vocabulary term as a prompt subject.
pub fn term_subject(term: &str) -> String {
    if term.starts_with("in ") {
        format!("{NEUTRAL_SUBJECT} {term}")
    } else if let Some(noun) = term.strip_prefix("an ").or_else(|| term.strip_prefix("a ")) {
        noun.to_string()
    } else {
        format!("{term} {NEUTRAL_SUBJECT}")
    }
}

/// Surface forms of a demographic combination ("Others" has two).
pub fn demographic_subjects(tuple: &DemographicTuple) -> Vec<String> {
    let gender = ["woman", "man"][tuple.gender];
    let age = ["young", "middle-aged", "elderly"][tuple.age];
    let races: &[&str] = match Attribute::Race.category_name(tuple.race).expect("valid tuple") {
        "Others" => &["Middle Eastern", "Latino Hispanic"],
        other => match other {
            "Asian" => &["Asian"],
            "Black" => &["Black"],
            "Indian" => &["Indian"],
            _ => &["White"],
        },
    };
    races.iter().map(|r| format!("{r} {age} {gender}")).collect()
}

struct Candidate {
    subject: usize,
    choice: [usize; 5],
}

/// Prompt builder holding the pools, trigger vocabulary and conflict table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default)]
pub struct PromptForge {
    pub pools: Pools,
    pub triggers: TriggerSet,
    pub conflicts: Vec<ConflictRule>,
}

impl Default for PromptForge {
    fn default() -> Self {
        Self {
            pools: Pools::default(),
            triggers: TriggerSet::default(),
            conflicts: default_conflicts(),
        }
    }
}

impl PromptForge {
    /// Loads an override document; missing sections keep their defaults.
    pub fn from_json(text: &str) -> Result<Self, PromptError> {
        let forge: PromptForge = serde_json::from_str(text)?;
        forge.pools.validate()?;
        Ok(forge)
    }

    fn rules_for(&self, term: &str) -> impl Iterator<Item = &ConflictRule> {
        let term = term.to_lowercase();
        self.conflicts.iter().filter(move |r| r.terms.iter().any(|t| *t == term))
    }

    fn negatives(&self, term: Option<&str>) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(term) = term {
            for rule in self.rules_for(term) {
                for n in &rule.negative {
                    if !out.contains(n) {
                        out.push(n.clone());
                    }
                }
            }
        }
        out
    }

    fn pool_lists(&self) -> [&Vec<String>; 5] {
        [
            &self.pools.framing,
            &self.pools.style,
            &self.pools.lighting,
            &self.pools.background,
            &self.pools.expression,
        ]
    }

    /// All component combinations for each subject, minus the ones a
    /// conflict rule forbids.
    fn candidates(&self, terms: &[Option<String>]) -> Vec<Candidate> {
        let pools = self.pool_lists();
        let mut out = Vec::new();
        for (s, term) in terms.iter().enumerate() {
            let avoid: BTreeSet<&str> = term
                .as_deref()
                .map(|t| self.rules_for(t).flat_map(|r| r.avoid.iter().map(String::as_str)).collect())
                .unwrap_or_default();
            let total = self.pools.combinations();
            for flat in 0..total {
                let mut rest = flat;
                let mut choice = [0usize; 5];
                for (slot, pool) in pools.iter().enumerate().rev() {
                    choice[slot] = rest % pool.len();
                    rest /= pool.len();
                }
                if choice
                    .iter()
                    .zip(pools.iter())
                    .any(|(&c, pool)| avoid.contains(pool[c].as_str()))
                {
                    continue;
                }
                out.push(Candidate { subject: s, choice });
            }
        }
        out
    }

    fn components(&self, subject: &str, choice: &[usize; 5]) -> Components {
        let pools = self.pool_lists();
        Components {
            framing: pools[0][choice[0]].clone(),
            subject: subject.to_string(),
            style: pools[1][choice[1]].clone(),
            lighting: pools[2][choice[2]].clone(),
            background: pools[3][choice[3]].clone(),
            expression: pools[4][choice[4]].clone(),
        }
    }

    /// Draws `n` distinct prompts uniformly from the candidate space of the
    /// given subjects, skipping any text in `exclude`.
    fn draw(
        &self,
        rng: &mut ChaCha8Rng,
        n: usize,
        subjects: &[String],
        terms: &[Option<String>],
        exclude: &BTreeSet<&str>,
    ) -> Result<Vec<(usize, Components)>, PromptError> {
        let mut pool: Vec<(usize, Components)> = self
            .candidates(terms)
            .into_iter()
            .map(|c| (c.subject, self.components(&subjects[c.subject], &c.choice)))
            .filter(|(_, c)| exclude.is_empty() || !exclude.contains(c.render().as_str()))
            .collect();
        if pool.len() < n {
            return Err(PromptError::Exhausted {
                requested: n,
                available: pool.len(),
            });
        }
        let picked = index::sample(rng, pool.len(), n).into_vec();
        let mut taken: Vec<Option<(usize, Components)>> = pool.drain(..).map(Some).collect();
        Ok(picked
            .into_iter()
            .map(|i| taken[i].take().expect("indices are distinct"))
            .collect())
    }

    fn prompt(
        &self,
        kind: PromptKind,
        components: Components,
        trigger: Option<String>,
        term: Option<String>,
        demographics: Option<DemographicTuple>,
    ) -> Prompt {
        let text = components.render();
        Prompt {
            id: prompt_id(&text),
            negative: self.negatives(term.as_deref()),
            kind,
            subject: components.subject.clone(),
            trigger,
            term,
            demographics,
            components,
            text,
        }
    }

    /// 30 demographic combinations × 10 component variants.
    pub fn build_gen_set(&self, seed: u64) -> Result<PromptSet, PromptError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut prompts = Vec::new();
        for tuple in DemographicTuple::all() {
            let subjects = demographic_subjects(&tuple);
            let terms = vec![None; subjects.len()];
            for (_, c) in self.draw(&mut rng, GEN_VARIANTS, &subjects, &terms, &BTreeSet::new())? {
                prompts.push(self.prompt(PromptKind::Gen, c, None, None, Some(tuple)));
            }
        }
        Ok(PromptSet {
            kind: SetKind::Gen,
            seed,
            prompts,
        })
    }

    /// 300 neutral prompts plus 50 per trigger word.
    pub fn build_eval_set(&self, seed: u64) -> Result<PromptSet, PromptError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let none = BTreeSet::new();
        let mut prompts = Vec::new();
        for (_, c) in self.draw(&mut rng, EVAL_NEUTRAL, &[NEUTRAL_SUBJECT.to_string()], &[None], &none)? {
            prompts.push(self.prompt(PromptKind::EvalNeutral, c, None, None, None));
        }
        for (head, entry) in &self.triggers.triggers {
            let terms: Vec<String> = std::iter::once(head.clone())
                .chain(entry.paraphrases.iter().cloned())
                .collect();
            let subjects: Vec<String> = terms.iter().map(|t| term_subject(t)).collect();
            let opt: Vec<Option<String>> = terms.iter().cloned().map(Some).collect();
            for (s, c) in self.draw(&mut rng, EVAL_PER_TRIGGER, &subjects, &opt, &none)? {
                prompts.push(self.prompt(
                    PromptKind::EvalTrigger,
                    c,
                    Some(head.clone()),
                    Some(terms[s].clone()),
                    None,
                ));
            }
        }
        Ok(PromptSet {
            kind: SetKind::Eval,
            seed,
            prompts,
        })
    }

    /// `n` prompts whose subjects come from `vocabulary`. An empty vocabulary
    /// selects neutral-only mode (every subject is the neutral one); texts in
    /// `exclude` are never emitted.
    pub fn build_train_set(
        &self,
        n: usize,
        seed: u64,
        vocabulary: &TrainVocabulary,
        exclude: Option<&PromptSet>,
    ) -> Result<PromptSet, PromptError> {
        vocabulary.validate(&self.triggers)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (subjects, terms): (Vec<String>, Vec<Option<String>>) = if vocabulary.terms.is_empty() {
            (vec![NEUTRAL_SUBJECT.to_string()], vec![None])
        } else {
            vocabulary
                .terms
                .iter()
                .map(|t| (term_subject(t), Some(t.clone())))
                .unzip()
        };
        let exclude = exclude.map(PromptSet::texts).unwrap_or_default();
        let prompts = self
            .draw(&mut rng, n, &subjects, &terms, &exclude)?
            .into_iter()
            .map(|(s, c)| self.prompt(PromptKind::Train, c, None, terms[s].clone(), None))
            .collect();
        Ok(PromptSet {
            kind: SetKind::Train,
            seed,
            prompts,
        })
    }

    /// Recovers the six components from a rendered prompt.
    pub fn parse(&self, text: &str) -> Result<Components, PromptError> {
        let err = || PromptError::Parse(text.to_string());
        let body = text.strip_suffix('.').ok_or_else(err)?;
        let (framing, rest) = self
            .pools
            .framing
            .iter()
            .filter_map(|f| {
                let prefix = f.split(SUBJECT_SLOT).next().unwrap_or(f);
                body.strip_prefix(prefix).map(|r| (f, r))
            })
            .max_by_key(|(f, _)| f.len())
            .ok_or_else(err)?;
        let mut rest = rest.to_string();
        let mut take_suffix = |pool: &[String]| -> Result<String, PromptError> {
            let (entry, cut) = pool
                .iter()
                .filter_map(|e| rest.strip_suffix(e.as_str()).and_then(|r| r.strip_suffix(", ")).map(|r| (e, r.len())))
                .max_by_key(|(e, _)| e.len())
                .ok_or_else(err)?;
            rest.truncate(cut);
            Ok(entry.clone())
        };
        let expression = take_suffix(&self.pools.expression)?;
        let background = take_suffix(&self.pools.background)?;
        let lighting = take_suffix(&self.pools.lighting)?;
        let style = take_suffix(&self.pools.style)?;
        let subject = rest;
        if subject.is_empty() {
            return Err(err());
        }
        Ok(Components {
            framing: framing.clone(),
            subject,
            style,
            lighting,
            background,
            expression,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum ViolationReason {
    ExactText,
    SharedTerm { term: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub struct Violation {
    pub id: String,
    pub text: String,
    #[serde(flatten)]
    pub reason: ViolationReason,
}

/// Prompts of `a` whose text, or whose vocabulary term, also occurs in `b`.
/// Neutral and demographic subjects carry no term and are compared by text
/// only.
pub fn check_disjoint(a: &PromptSet, b: &PromptSet) -> Vec<Violation> {
    let texts = b.texts();
    let terms: BTreeSet<String> = b
        .prompts
        .iter()
        .filter_map(|p| p.term.as_ref().map(|t| t.to_lowercase()))
        .collect();
    a.prompts
        .iter()
        .filter_map(|p| {
            let reason = if texts.contains(p.text.as_str()) {
                ViolationReason::ExactText
            } else {
                let term = p.term.as_ref()?.to_lowercase();
                terms.contains(&term).then_some(ViolationReason::SharedTerm { term })?
            };
            Some(Violation {
                id: p.id.clone(),
                text: p.text.clone(),
                reason,
            })
        })
        .collect()
}

/// Shuffled copy, used by tests to show order independence.
pub fn shuffled(set: &PromptSet, seed: u64) -> PromptSet {
    let mut out = set.clone();
    out.prompts.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    #[test]
    fn gen_set_shape() {
        let forge = PromptForge::default();
        let set = forge.build_gen_set(7).unwrap();
        assert_eq!(set.len(), 300);
        let combos: BTreeSet<_> = set.prompts.iter().map(|p| p.demographics.unwrap()).collect();
        assert_eq!(combos.len(), 30);
        assert_eq!(set.texts().len(), 300);
        assert_eq!(set, forge.build_gen_set(7).unwrap());
    }

    #[test]
    fn eval_set_shape_and_round_trip() {
        let forge = PromptForge::default();
        let set = forge.build_eval_set(1).unwrap();
        assert_eq!(set.len(), 750);
        assert_eq!(set.texts().len(), 750);
        let mut per: BTreeMap<&str, usize> = BTreeMap::new();
        for p in &set.prompts {
            if let Some(t) = &p.trigger {
                *per.entry(t).or_default() += 1;
                assert_eq!(forge.triggers.head_of(p.term.as_ref().unwrap()), Some(t.as_str()));
            } else {
                assert_eq!(p.subject, NEUTRAL_SUBJECT);
            }
            assert_eq!(forge.parse(&p.text).unwrap(), p.components);
        }
        assert_eq!(per.len(), 9);
        assert!(per.values().all(|&c| c == 50));
    }

    #[test]
    fn subject_rendering() {
        assert_eq!(term_subject("kind"), "kind person");
        assert_eq!(term_subject("in business attire"), "person in business attire");
        assert_eq!(term_subject("an executive"), "executive");
        let t = DemographicTuple { gender: 0, age: 1, race: 3 };
        assert_eq!(demographic_subjects(&t), ["Middle Eastern middle-aged woman", "Latino Hispanic middle-aged woman"]);
    }

    #[test]
    fn train_vocabulary_leak_is_rejected() {
        let forge = PromptForge::default();
        let vocab = TrainVocabulary {
            note: None,
            terms: vec!["loyal".into(), "professional".into()],
        };
        match forge.build_train_set(10, 0, &vocab, None) {
            Err(PromptError::Disjointness { terms }) => assert_eq!(terms, ["professional"]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn neutral_only_train_mode() {
        let forge = PromptForge::default();
        let eval = forge.build_eval_set(0).unwrap();
        let set = forge
            .build_train_set(200, 3, &TrainVocabulary::default(), Some(&eval))
            .unwrap();
        assert!(set.prompts.iter().all(|p| p.subject == NEUTRAL_SUBJECT));
        assert!(check_disjoint(&set, &eval).is_empty());
        let too_many = forge.build_train_set(5000, 3, &TrainVocabulary::default(), Some(&eval));
        assert!(matches!(too_many, Err(PromptError::Exhausted { available: 2825, .. })));
    }

    #[test]
    fn check_disjoint_examples() {
        let forge = PromptForge::default();
        let eval = forge.build_eval_set(0).unwrap();
        assert_eq!(check_disjoint(&eval, &shuffled(&eval, 9)).len(), 750);

        let pool = forge.build_train_set(3, 0, &TrainVocabulary::default(), None).unwrap();
        let pick = |idx: &[usize]| PromptSet {
            kind: SetKind::Train,
            seed: 0,
            prompts: idx.iter().map(|&i| pool.prompts[i].clone()).collect(),
        };
        let v = check_disjoint(&pick(&[0, 2]), &pick(&[1, 2]));
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].text, pool.prompts[2].text);
        assert_eq!(v[0].reason, ViolationReason::ExactText);
    }

    #[test]
    fn conflict_table_filters_components() {
        let forge = PromptForge::default();
        let eval = forge.build_eval_set(4).unwrap();
        let rule = &forge.conflicts[0];
        let hits = eval
            .prompts
            .iter()
            .filter(|p| p.term.as_ref().is_some_and(|t| rule.terms.contains(t)));
        for p in hits {
            assert!(!p.negative.is_empty());
            assert_ne!(p.components.expression, "with a slight smile");
        }
    }

    #[test]
    fn ids_are_content_hashes() {
        let forge = PromptForge::default();
        let eval = forge.build_eval_set(0).unwrap();
        for p in &eval.prompts {
            assert_eq!(p.id, prompt_id(&p.text));
        }
    }
}
