//! Attribute universe, category sets and the semantic trigger vocabulary.
//!
//! Everything else in the crate keys against the types in this module. The
//! attribute/category layout is fixed: gender has 2 categories, age 3 and race
//! 5 (Middle Eastern and Latino Hispanic are folded into `Others`). Loading a
//! taxonomy document with any other layout is rejected.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TaxonomyError {
    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),
    #[error("unknown category `{category}` for attribute {attribute}")]
    UnknownCategory { attribute: Attribute, category: String },
    #[error("category index {index} out of range for attribute {attribute} ({size} categories)")]
    IndexOutOfRange {
        attribute: Attribute,
        index: usize,
        size: usize,
    },
    #[error("joint index {0} out of range (expected < {JOINT_SIZE})")]
    JointOutOfRange(usize),
    #[error("expected {expected} joint counts, got {actual}")]
    JointLength { expected: usize, actual: usize },
    #[error("negative count {count} at joint index {index}")]
    NegativeCount { index: usize, count: i64 },
    #[error("taxonomy document rejected: {0}")]
    Document(String),
}

/// A sensitive attribute.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, JsonSchema,
)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    Gender,
    Age,
    Race,
}

const GENDER: [&str; 2] = ["female", "male"];
const AGE: [&str; 3] = ["young", "middle", "elderly"];
const RACE: [&str; 5] = ["Asian", "Black", "Indian", "Others", "White"];

/// Size of the joint gender × age × race space.
pub const JOINT_SIZE: usize = 2 * 3 * 5;

impl Attribute {
    pub const ALL: [Attribute; 3] = [Attribute::Gender, Attribute::Age, Attribute::Race];

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Gender => "gender",
            Attribute::Age => "age",
            Attribute::Race => "race",
        }
    }

    /// Category names in their frozen order.
    pub fn categories(self) -> &'static [&'static str] {
        match self {
            Attribute::Gender => &GENDER,
            Attribute::Age => &AGE,
            Attribute::Race => &RACE,
        }
    }

    pub fn num_categories(self) -> usize {
        self.categories().len()
    }

    pub fn category_index(self, name: &str) -> Result<usize, TaxonomyError> {
        self.categories()
            .iter()
            .position(|c| *c == name)
            .ok_or_else(|| TaxonomyError::UnknownCategory {
                attribute: self,
                category: name.to_string(),
            })
    }

    pub fn category_name(self, index: usize) -> Result<&'static str, TaxonomyError> {
        self.categories()
            .get(index)
            .copied()
            .ok_or(TaxonomyError::IndexOutOfRange {
                attribute: self,
                index,
                size: self.num_categories(),
            })
    }

    /// Position of this attribute in [`Attribute::ALL`].
    pub fn position(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Attribute {
    type Err = TaxonomyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gender" => Ok(Attribute::Gender),
            "age" => Ok(Attribute::Age),
            "race" => Ok(Attribute::Race),
            other => Err(TaxonomyError::UnknownAttribute(other.to_string())),
        }
    }
}

/// One point of the joint category space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, JsonSchema)]
pub struct DemographicTuple {
    pub gender: usize,
    pub age: usize,
    pub race: usize,
}

impl DemographicTuple {
    pub fn new(gender: usize, age: usize, race: usize) -> Result<Self, TaxonomyError> {
        let t = Self { gender, age, race };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), TaxonomyError> {
        for attribute in Attribute::ALL {
            let index = self.get(attribute);
            if index >= attribute.num_categories() {
                return Err(TaxonomyError::IndexOutOfRange {
                    attribute,
                    index,
                    size: attribute.num_categories(),
                });
            }
        }
        Ok(())
    }

    pub fn get(&self, attribute: Attribute) -> usize {
        match attribute {
            Attribute::Gender => self.gender,
            Attribute::Age => self.age,
            Attribute::Race => self.race,
        }
    }

    pub fn set(&mut self, attribute: Attribute, index: usize) {
        match attribute {
            Attribute::Gender => self.gender = index,
            Attribute::Age => self.age = index,
            Attribute::Race => self.race = index,
        }
    }

    /// Iterates all 30 tuples in joint-index order.
    pub fn all() -> impl Iterator<Item = DemographicTuple> {
        (0..JOINT_SIZE).map(|i| joint_decode(i).expect("index in range"))
    }
}

/// Row-major encoding `gender * 15 + age * 5 + race`.
pub fn joint_index(tuple: DemographicTuple) -> Result<usize, TaxonomyError> {
    tuple.validate()?;
    Ok(tuple.gender * 15 + tuple.age * 5 + tuple.race)
}

pub fn joint_decode(index: usize) -> Result<DemographicTuple, TaxonomyError> {
    if index >= JOINT_SIZE {
        return Err(TaxonomyError::JointOutOfRange(index));
    }
    Ok(DemographicTuple {
        gender: index / 15,
        age: (index / 5) % 3,
        race: index % 5,
    })
}

/// Sums a joint count vector down to one attribute's categories.
pub fn marginalize(joint_counts: &[i64], attribute: Attribute) -> Result<Vec<u64>, TaxonomyError> {
    if joint_counts.len() != JOINT_SIZE {
        return Err(TaxonomyError::JointLength {
            expected: JOINT_SIZE,
            actual: joint_counts.len(),
        });
    }
    let mut out = vec![0u64; attribute.num_categories()];
    for (index, &count) in joint_counts.iter().enumerate() {
        if count < 0 {
            return Err(TaxonomyError::NegativeCount { index, count });
        }
        let tuple = joint_decode(index)?;
        out[tuple.get(attribute)] += count as u64;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub enum ScmDimension {
    Competence,
    Warmth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub enum Polarity {
    High,
    Low,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct TriggerEntry {
    pub dimension: ScmDimension,
    pub polarity: Polarity,
    pub paraphrases: Vec<String>,
}

/// The nine head words probed for conditional bias, with their stereotype
/// content cell and evaluation paraphrases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct TriggerSet {
    pub triggers: BTreeMap<String, TriggerEntry>,
}

pub const TRIGGERS: [&str; 9] = [
    "aggressive",
    "compassionate",
    "gentle",
    "intelligent",
    "poor",
    "professional",
    "successful",
    "trustworthy",
    "unprofessional",
];

fn entry(dimension: ScmDimension, polarity: Polarity, paraphrases: &[&str]) -> TriggerEntry {
    TriggerEntry {
        dimension,
        polarity,
        paraphrases: paraphrases.iter().map(|s| s.to_string()).collect(),
    }
}

impl Default for TriggerSet {
    fn default() -> Self {
        use Polarity::*;
        use ScmDimension::*;
        let table = [
            (
                "aggressive",
                entry(
                    Warmth,
                    Low,
                    &["hostile", "confrontational", "assertive", "intense", "intimidating", "forceful"],
                ),
            ),
            (
                "compassionate",
                entry(
                    Warmth,
                    High,
                    &["empathetic", "caring", "kind", "sympathetic", "warm", "understanding"],
                ),
            ),
            (
                "gentle",
                entry(
                    Warmth,
                    High,
                    &["mild", "tender", "calm", "soft-spoken", "placid", "quiet"],
                ),
            ),
            (
                "intelligent",
                entry(
                    Competence,
                    High,
                    &["smart", "clever", "bright", "studious", "knowledgeable", "intellectual-looking"],
                ),
            ),
            (
                "poor",
                entry(
                    Competence,
                    Low,
                    &[
                        "impoverished",
                        "needy",
                        "low-income",
                        "not wealthy",
                        "humble-looking",
                        "financially struggling",
                    ],
                ),
            ),
            (
                "professional",
                entry(
                    Competence,
                    High,
                    &[
                        "competent",
                        "qualified",
                        "business-like",
                        "formal",
                        "in business attire",
                        "serious-looking",
                    ],
                ),
            ),
            (
                "successful",
                entry(
                    Competence,
                    High,
                    &["accomplished", "prosperous", "high-achieving", "wealthy", "confident", "an executive"],
                ),
            ),
            (
                "trustworthy",
                entry(
                    Warmth,
                    High,
                    &["reliable", "dependable", "honest", "credible", "sincere-looking", "responsible"],
                ),
            ),
            (
                "unprofessional",
                entry(
                    Competence,
                    Low,
                    &[
                        "incompetent",
                        "amateurish",
                        "sloppy",
                        "unskilled-looking",
                        "disorganized",
                        "casually dressed",
                    ],
                ),
            ),
        ];
        Self {
            triggers: table
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
        }
    }
}

impl TriggerSet {
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.triggers.keys().map(String::as_str)
    }

    /// Head words plus every paraphrase, lowercased.
    pub fn vocabulary(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (head, e) in &self.triggers {
            out.push(head.to_lowercase());
            out.extend(e.paraphrases.iter().map(|p| p.to_lowercase()));
        }
        out
    }

    /// Finds the head word a term belongs to.
    pub fn head_of(&self, term: &str) -> Option<&str> {
        let term = term.to_lowercase();
        self.triggers.iter().find_map(|(head, e)| {
            (head.to_lowercase() == term || e.paraphrases.iter().any(|p| p.to_lowercase() == term))
                .then_some(head.as_str())
        })
    }

    pub fn validate(&self) -> Result<(), TaxonomyError> {
        let names: Vec<&str> = self.names().collect();
        if names != TRIGGERS {
            return Err(TaxonomyError::Document(format!(
                "trigger set must be {TRIGGERS:?}, found {names:?}"
            )));
        }
        let reference = TriggerSet::default();
        for (head, e) in &self.triggers {
            let r = &reference.triggers[head];
            if e.dimension != r.dimension || e.polarity != r.polarity {
                return Err(TaxonomyError::Document(format!(
                    "trigger `{head}` must map to {:?}/{:?}",
                    r.dimension, r.polarity
                )));
            }
            if e.paraphrases.is_empty() {
                return Err(TaxonomyError::Document(format!(
                    "trigger `{head}` has no paraphrases"
                )));
            }
        }
        Ok(())
    }
}

/// Serializable taxonomy document: attribute → ordered categories plus the
/// trigger set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct Taxonomy {
    pub attributes: BTreeMap<Attribute, Vec<String>>,
    pub triggers: TriggerSet,
}

impl Default for Taxonomy {
    fn default() -> Self {
        Self {
            attributes: Attribute::ALL
                .iter()
                .map(|a| (*a, a.categories().iter().map(|c| c.to_string()).collect()))
                .collect(),
            triggers: TriggerSet::default(),
        }
    }
}

impl Taxonomy {
    /// Environment variable naming a taxonomy JSON file to load instead of the
    /// built-in one.
    pub const ENV_VAR: &'static str = "HOLOFAIR_TAXONOMY";

    pub fn from_json(text: &str) -> Result<Self, TaxonomyError> {
        let doc: Taxonomy =
            serde_json::from_str(text).map_err(|e| TaxonomyError::Document(e.to_string()))?;
        doc.validate()?;
        Ok(doc)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("taxonomy serializes")
    }

    /// Loads from `HOLOFAIR_TAXONOMY` when set, otherwise the built-in taxonomy.
    pub fn from_env() -> Result<Self, TaxonomyError> {
        match std::env::var(Self::ENV_VAR) {
            Ok(path) => {
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| TaxonomyError::Document(format!("{path}: {e}")))?;
                Self::from_json(&text)
            }
            Err(_) => Ok(Self::default()),
        }
    }

    pub fn validate(&self) -> Result<(), TaxonomyError> {
        for attribute in Attribute::ALL {
            let Some(cats) = self.attributes.get(&attribute) else {
                return Err(TaxonomyError::Document(format!("missing attribute {attribute}")));
            };
            if cats.iter().map(String::as_str).ne(attribute.categories().iter().copied()) {
                return Err(TaxonomyError::Document(format!(
                    "attribute {attribute} must have categories {:?}, found {cats:?}",
                    attribute.categories()
                )));
            }
        }
        if self.attributes.len() != Attribute::ALL.len() {
            return Err(TaxonomyError::Document("unexpected extra attributes".into()));
        }
        self.triggers.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn joint_index_examples() {
        assert_eq!(joint_index(DemographicTuple::new(0, 0, 0).unwrap()).unwrap(), 0);
        assert_eq!(joint_index(DemographicTuple::new(1, 2, 4).unwrap()).unwrap(), 29);
        assert_eq!(joint_index(DemographicTuple::new(0, 1, 2).unwrap()).unwrap(), 7);
    }

    #[test]
    fn joint_roundtrip_is_bijective() {
        let mut seen = [false; JOINT_SIZE];
        for i in 0..JOINT_SIZE {
            let t = joint_decode(i).unwrap();
            assert_eq!(joint_index(t).unwrap(), i);
            seen[i] = true;
        }
        assert!(seen.iter().all(|s| *s));
        assert_eq!(DemographicTuple::all().count(), 30);
    }

    #[test]
    fn out_of_range_rejected() {
        assert!(DemographicTuple::new(2, 0, 0).is_err());
        let bad = DemographicTuple { gender: 0, age: 3, race: 0 };
        assert!(joint_index(bad).is_err());
        assert!(joint_decode(30).is_err());
    }

    #[test]
    fn marginalize_examples() {
        let mut joint = vec![0i64; 30];
        joint[29] = 1;
        assert_eq!(marginalize(&joint, Attribute::Gender).unwrap(), vec![0, 1]);

        let uniform = vec![1i64; 30];
        assert_eq!(marginalize(&uniform, Attribute::Gender).unwrap(), vec![15, 15]);
        assert_eq!(marginalize(&uniform, Attribute::Age).unwrap(), vec![10, 10, 10]);
        assert_eq!(marginalize(&uniform, Attribute::Race).unwrap(), vec![6; 5]);

        let mut five = vec![0i64; 30];
        for r in 0..5 {
            five[joint_index(DemographicTuple::new(0, 0, r).unwrap()).unwrap()] = 1;
        }
        assert_eq!(marginalize(&five, Attribute::Race).unwrap(), vec![1; 5]);
        assert_eq!(marginalize(&five, Attribute::Gender).unwrap(), vec![5, 0]);
    }

    #[test]
    fn marginalize_rejects_negative_and_bad_length() {
        let mut joint = vec![0i64; 30];
        joint[3] = -1;
        assert!(matches!(
            marginalize(&joint, Attribute::Age),
            Err(TaxonomyError::NegativeCount { index: 3, .. })
        ));
        assert!(marginalize(&[1, 2], Attribute::Age).is_err());
    }

    #[test]
    fn trigger_set_matches_scm_grid() {
        let t = TriggerSet::default();
        t.validate().unwrap();
        assert_eq!(t.triggers["poor"].dimension, ScmDimension::Competence);
        assert_eq!(t.triggers["poor"].polarity, Polarity::Low);
        assert_eq!(t.triggers["aggressive"].dimension, ScmDimension::Warmth);
        assert_eq!(t.triggers["aggressive"].polarity, Polarity::Low);
        assert!(t.triggers.values().all(|e| e.paraphrases.len() == 6));
        assert_eq!(t.head_of("In Business Attire"), Some("professional"));
    }

    #[test]
    fn taxonomy_json_roundtrip_and_rejection() {
        let tax = Taxonomy::default();
        let back = Taxonomy::from_json(&tax.to_json()).unwrap();
        assert_eq!(tax, back);

        let mut finer = Taxonomy::default();
        finer.attributes.insert(
            Attribute::Race,
            ["Asian", "Black", "Indian", "Latino", "Middle Eastern", "White"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        );
        assert!(Taxonomy::from_json(&finer.to_json()).is_err());
    }
}
