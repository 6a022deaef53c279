//! Classifier label ingestion: JSONL/CSV parsing, abstention filtering and
//! per-group aggregation into distributions and counts.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::BufRead;
use std::ops::AddAssign;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taxonomy::Attribute;

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: schema error: {message}")]
    Schema { line: usize, message: String },
    #[error("line {line}: duplicate record for ({prompt_id}, {image_id}, {attribute})")]
    Duplicate {
        line: usize,
        prompt_id: String,
        image_id: String,
        attribute: Attribute,
    },
    #[error("line {line}: confidence {value} outside [0, 1]")]
    Range { line: usize, value: f64 },
    #[error("no records for attribute {attribute} survive threshold {tau}")]
    EmptySupport { attribute: Attribute, tau: f64 },
    #[error("prompt group `{prompt_id}` has {found} distinct images but group size is {group_size}")]
    GroupSize {
        prompt_id: String,
        found: usize,
        group_size: u64,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Wire form of one JSONL label line.
#[derive(Debug, Clone, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct RawLabel {
    pub prompt_id: String,
    pub image_id: String,
    pub attribute: String,
    pub category: String,
    pub confidence: f64,
}

/// One validated classifier prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelRecord {
    pub prompt_id: String,
    pub image_id: String,
    pub attribute: Attribute,
    /// Index into `attribute.categories()`.
    pub category: usize,
    pub confidence: f64,
}

impl LabelRecord {
    pub fn new(
        prompt_id: impl Into<String>,
        image_id: impl Into<String>,
        attribute: Attribute,
        category: &str,
        confidence: f64,
    ) -> Result<Self, LabelError> {
        let raw = RawLabel {
            prompt_id: prompt_id.into(),
            image_id: image_id.into(),
            attribute: attribute.name().to_string(),
            category: category.to_string(),
            confidence,
        };
        Self::from_raw(raw, 0)
    }

    fn from_raw(raw: RawLabel, line: usize) -> Result<Self, LabelError> {
        let attribute: Attribute = raw.attribute.parse().map_err(|e| LabelError::Schema {
            line,
            message: format!("{e}"),
        })?;
        let category = attribute
            .category_index(&raw.category)
            .map_err(|e| LabelError::Schema {
                line,
                message: format!("{e}"),
            })?;
        if !(0.0..=1.0).contains(&raw.confidence) {
            return Err(LabelError::Range {
                line,
                value: raw.confidence,
            });
        }
        Ok(Self {
            prompt_id: raw.prompt_id,
            image_id: raw.image_id,
            attribute,
            category,
            confidence: raw.confidence,
        })
    }

    pub fn to_raw(&self) -> RawLabel {
        RawLabel {
            prompt_id: self.prompt_id.clone(),
            image_id: self.image_id.clone(),
            attribute: self.attribute.name().to_string(),
            category: self.attribute.categories()[self.category].to_string(),
            confidence: self.confidence,
        }
    }

    pub fn category_name(&self) -> &'static str {
        self.attribute.categories()[self.category]
    }
}

struct DuplicateGuard(HashSet<(String, String, Attribute)>);

impl DuplicateGuard {
    fn check(&mut self, r: &LabelRecord, line: usize) -> Result<(), LabelError> {
        if self
            .0
            .insert((r.prompt_id.clone(), r.image_id.clone(), r.attribute))
        {
            Ok(())
        } else {
            Err(LabelError::Duplicate {
                line,
                prompt_id: r.prompt_id.clone(),
                image_id: r.image_id.clone(),
                attribute: r.attribute,
            })
        }
    }
}

/// Parses a JSONL label stream. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn parse_labels<R: BufRead>(source: R) -> Result<Vec<LabelRecord>, LabelError> {
    let mut out = Vec::new();
    let mut guard = DuplicateGuard(HashSet::new());
    for (i, line) in source.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawLabel = serde_json::from_str(&line).map_err(|e| LabelError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        let record = LabelRecord::from_raw(raw, line_no)?;
        guard.check(&record, line_no)?;
        out.push(record);
    }
    Ok(out)
}

/// CSV import shim. Expects a header row with the same five field names as
/// the JSONL schema.
pub fn parse_labels_csv<R: std::io::Read>(source: R) -> Result<Vec<LabelRecord>, LabelError> {
    let mut reader = csv::Reader::from_reader(source);
    let mut out = Vec::new();
    let mut guard = DuplicateGuard(HashSet::new());
    for (i, row) in reader.deserialize::<RawLabel>().enumerate() {
        // header occupies line 1
        let line_no = i + 2;
        let raw = row.map_err(|e| LabelError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        let record = LabelRecord::from_raw(raw, line_no)?;
        guard.check(&record, line_no)?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_labels<W: std::io::Write>(
    records: &[LabelRecord],
    mut out: W,
) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, &r.to_raw())?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Normalized empirical distribution over one attribute's categories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalDistribution {
    pub attribute: Attribute,
    pub probs: Vec<f64>,
    pub support_count: u64,
}

impl CategoricalDistribution {
    /// Builds a distribution from raw category counts.
    pub fn from_counts(attribute: Attribute, counts: &[u64]) -> Result<Self, LabelError> {
        let support: u64 = counts.iter().sum();
        if support == 0 {
            return Err(LabelError::EmptySupport { attribute, tau: 0.0 });
        }
        Ok(Self {
            attribute,
            probs: counts.iter().map(|&c| c as f64 / support as f64).collect(),
            support_count: support,
        })
    }
}

/// Distribution of `attribute` over records whose confidence is at least
/// `tau`. Records for other attributes are ignored.
pub fn empirical_distribution(
    records: &[LabelRecord],
    attribute: Attribute,
    tau: f64,
) -> Result<CategoricalDistribution, LabelError> {
    let mut counts = vec![0u64; attribute.num_categories()];
    for r in records
        .iter()
        .filter(|r| r.attribute == attribute && r.confidence >= tau)
    {
        counts[r.category] += 1;
    }
    CategoricalDistribution::from_counts(attribute, &counts)
        .map_err(|_| LabelError::EmptySupport { attribute, tau })
}

/// Within-group category counts for one prompt.
///
/// Invariant: for every attribute, `sum(per_attribute[a]) + abstained[a] ==
/// group_size`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
pub struct GroupCounts {
    pub prompt_id: String,
    pub group_size: u64,
    pub per_attribute: BTreeMap<Attribute, Vec<u64>>,
    pub abstained: BTreeMap<Attribute, u64>,
}

impl GroupCounts {
    pub fn empty(prompt_id: impl Into<String>, group_size: u64) -> Self {
        Self {
            prompt_id: prompt_id.into(),
            group_size,
            per_attribute: Attribute::ALL
                .iter()
                .map(|a| (*a, vec![0; a.num_categories()]))
                .collect(),
            abstained: Attribute::ALL.iter().map(|a| (*a, group_size)).collect(),
        }
    }

    /// Builds counts directly from per-attribute vectors; images not covered
    /// are treated as abstentions.
    pub fn from_vectors(
        prompt_id: impl Into<String>,
        group_size: u64,
        per_attribute: BTreeMap<Attribute, Vec<u64>>,
    ) -> Result<Self, LabelError> {
        let mut g = Self::empty(prompt_id, group_size);
        for (a, v) in per_attribute {
            if v.len() != a.num_categories() {
                return Err(LabelError::Schema {
                    line: 0,
                    message: format!("{a} expects {} counts, got {}", a.num_categories(), v.len()),
                });
            }
            g.per_attribute.insert(a, v);
        }
        g.recompute_abstained()?;
        Ok(g)
    }

    fn recompute_abstained(&mut self) -> Result<(), LabelError> {
        for a in Attribute::ALL {
            let covered: u64 = self.per_attribute[&a].iter().sum();
            if covered > self.group_size {
                return Err(LabelError::GroupSize {
                    prompt_id: self.prompt_id.clone(),
                    found: covered as usize,
                    group_size: self.group_size,
                });
            }
            self.abstained.insert(a, self.group_size - covered);
        }
        Ok(())
    }

    pub fn counts(&self, attribute: Attribute) -> &[u64] {
        &self.per_attribute[&attribute]
    }

    /// Checks the conservation invariant and vector shapes.
    pub fn validate(&self) -> Result<(), LabelError> {
        for a in Attribute::ALL {
            let Some(v) = self.per_attribute.get(&a) else {
                return Err(LabelError::Schema {
                    line: 0,
                    message: format!("missing counts for {a}"),
                });
            };
            if v.len() != a.num_categories() {
                return Err(LabelError::Schema {
                    line: 0,
                    message: format!("{a} expects {} counts", a.num_categories()),
                });
            }
            let abst = self.abstained.get(&a).copied().unwrap_or(0);
            if v.iter().sum::<u64>() + abst != self.group_size {
                return Err(LabelError::Schema {
                    line: 0,
                    message: format!("counts for {a} do not add up to group size"),
                });
            }
        }
        Ok(())
    }
}

impl AddAssign<&GroupCounts> for GroupCounts {
    /// Merges shards of the same prompt group.
    fn add_assign(&mut self, rhs: &GroupCounts) {
        self.group_size += rhs.group_size;
        for a in Attribute::ALL {
            let lhs = self.per_attribute.get_mut(&a).expect("all attributes present");
            for (l, r) in lhs.iter_mut().zip(&rhs.per_attribute[&a]) {
                *l += r;
            }
            *self.abstained.get_mut(&a).expect("all attributes present") += rhs.abstained[&a];
        }
    }
}

/// Counts for prompt group `prompt_id` of size `group_size`. Records for other
/// prompts are ignored; missing or abstained records count as abstentions.
pub fn group_counts(
    records: &[LabelRecord],
    prompt_id: &str,
    group_size: u64,
    tau: f64,
) -> Result<GroupCounts, LabelError> {
    let mine: Vec<&LabelRecord> = records.iter().filter(|r| r.prompt_id == prompt_id).collect();
    let images: BTreeSet<&str> = mine.iter().map(|r| r.image_id.as_str()).collect();
    if images.len() as u64 > group_size {
        return Err(LabelError::GroupSize {
            prompt_id: prompt_id.to_string(),
            found: images.len(),
            group_size,
        });
    }
    let mut g = GroupCounts::empty(prompt_id, group_size);
    for r in mine.iter().filter(|r| r.confidence >= tau) {
        g.per_attribute.get_mut(&r.attribute).expect("attribute present")[r.category] += 1;
    }
    g.recompute_abstained()?;
    Ok(g)
}

/// Per-image category assignment (None = abstained) for one attribute set.
pub type Assignment = BTreeMap<Attribute, Option<usize>>;

/// Groups retained records by image id into assignments, in image-id order.
pub fn assignments_by_image(
    records: &[LabelRecord],
    prompt_id: &str,
    tau: f64,
) -> BTreeMap<String, Assignment> {
    let mut out: BTreeMap<String, Assignment> = BTreeMap::new();
    for r in records.iter().filter(|r| r.prompt_id == prompt_id) {
        let slot = out
            .entry(r.image_id.clone())
            .or_insert_with(|| Attribute::ALL.iter().map(|a| (*a, None)).collect());
        if r.confidence >= tau {
            slot.insert(r.attribute, Some(r.category));
        }
    }
    out
}

/// Integer counts over `k` categories totalling `n` whose normalized entropy
/// is as close as possible to `target`.
///
/// The distribution family puts mass `1 - x` on the first category and
/// spreads `x` evenly over the rest; entropy is monotone in `x` on
/// `[0, (k-1)/k]`, so bisection finds the mixing weight. Used to build label
/// fixtures that hit published per-attribute entropies.
pub fn counts_with_entropy(k: usize, target: f64, n: u64) -> Vec<u64> {
    assert!(k >= 2 && (0.0..=1.0).contains(&target));
    let entropy_of = |x: f64| {
        let mut probs = vec![x / (k - 1) as f64; k];
        probs[0] = 1.0 - x;
        let h: f64 = probs
            .iter()
            .filter(|p| **p > 0.0)
            .map(|p| -p * p.ln())
            .sum();
        h / (k as f64).ln()
    };
    let (mut lo, mut hi) = (0.0, (k - 1) as f64 / k as f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if entropy_of(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let x = 0.5 * (lo + hi);
    // Largest-remainder rounding keeps the total at exactly n.
    let mut ideal = vec![x / (k - 1) as f64 * n as f64; k];
    ideal[0] = (1.0 - x) * n as f64;
    let mut counts: Vec<u64> = ideal.iter().map(|v| v.floor() as u64).collect();
    let mut rem = n - counts.iter().sum::<u64>();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        (ideal[b] - ideal[b].floor())
            .partial_cmp(&(ideal[a] - ideal[a].floor()))
            .unwrap()
    });
    for i in order {
        if rem == 0 {
            break;
        }
        counts[i] += 1;
        rem -= 1;
    }
    counts
}

/// Label records for one context whose per-attribute normalized entropies
/// approximate `targets`. Every image carries one confident label per
/// attribute; images are named `img-<index>` under `prompt_id`.
pub fn synthesize_labels(
    prompt_id: &str,
    targets: &BTreeMap<Attribute, f64>,
    images: u64,
) -> Vec<LabelRecord> {
    let mut out = Vec::new();
    for (&attribute, &target) in targets {
        let counts = counts_with_entropy(attribute.num_categories(), target, images);
        let mut image = 0u64;
        for (category, &c) in counts.iter().enumerate() {
            for _ in 0..c {
                out.push(LabelRecord {
                    prompt_id: prompt_id.to_string(),
                    image_id: format!("img-{image}"),
                    attribute,
                    category,
                    confidence: 1.0,
                });
                image += 1;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(p: &str, img: &str, a: Attribute, c: &str, conf: f64) -> LabelRecord {
        LabelRecord::new(p, img, a, c, conf).unwrap()
    }

    #[test]
    fn parses_valid_file() {
        let text = r#"{"prompt_id":"p1","image_id":"i1","attribute":"gender","category":"male","confidence":0.9}
{"prompt_id":"p1","image_id":"i1","attribute":"age","category":"young","confidence":0.8}

{"prompt_id":"p1","image_id":"i2","attribute":"race","category":"White","confidence":1.0}
"#;
        let recs = parse_labels(text.as_bytes()).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[2].category_name(), "White");
    }

    #[test]
    fn unknown_category_names_line() {
        let text = r#"{"prompt_id":"p1","image_id":"i1","attribute":"race","category":"Latino","confidence":0.9}"#;
        match parse_labels(text.as_bytes()) {
            Err(LabelError::Schema { line: 1, message }) => assert!(message.contains("Latino")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_and_range_errors() {
        let dup = r#"{"prompt_id":"p1","image_id":"img1","attribute":"gender","category":"male","confidence":0.9}
{"prompt_id":"p1","image_id":"img1","attribute":"gender","category":"female","confidence":0.9}"#;
        assert!(matches!(
            parse_labels(dup.as_bytes()),
            Err(LabelError::Duplicate { line: 2, .. })
        ));
        let range = r#"{"prompt_id":"p1","image_id":"i","attribute":"gender","category":"male","confidence":1.5}"#;
        assert!(matches!(
            parse_labels(range.as_bytes()),
            Err(LabelError::Range { line: 1, .. })
        ));
        assert!(matches!(
            parse_labels("not json".as_bytes()),
            Err(LabelError::Malformed { line: 1, .. })
        ));
    }

    #[test]
    fn csv_shim_matches_jsonl() {
        let csv = "prompt_id,image_id,attribute,category,confidence\np1,i1,gender,male,0.9\np1,i2,age,elderly,0.4\n";
        let recs = parse_labels_csv(csv.as_bytes()).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].attribute, Attribute::Age);
        let bad = "prompt_id,image_id,attribute,category,confidence\np1,i1,gender,other,0.9\n";
        assert!(matches!(
            parse_labels_csv(bad.as_bytes()),
            Err(LabelError::Schema { line: 2, .. })
        ));
    }

    #[test]
    fn empirical_distribution_examples() {
        let g = Attribute::Gender;
        let recs = vec![
            rec("p", "1", g, "male", 1.0),
            rec("p", "2", g, "male", 1.0),
            rec("p", "3", g, "female", 1.0),
            rec("p", "4", g, "male", 1.0),
        ];
        let d = empirical_distribution(&recs, g, 0.0).unwrap();
        assert_eq!(d.probs, vec![0.25, 0.75]);
        assert_eq!(d.support_count, 4);

        let recs = vec![rec("p", "1", g, "male", 0.9), rec("p", "2", g, "female", 0.4)];
        let d = empirical_distribution(&recs, g, 0.6).unwrap();
        assert_eq!(d.probs, vec![0.0, 1.0]);
        assert_eq!(d.support_count, 1);

        let recs = vec![rec("p", "1", g, "male", 0.5)];
        assert!(matches!(
            empirical_distribution(&recs, g, 0.6),
            Err(LabelError::EmptySupport { .. })
        ));
    }

    #[test]
    fn group_counts_examples() {
        let g = Attribute::Gender;
        let all_male: Vec<_> = (0..20).map(|i| rec("p", &i.to_string(), g, "male", 1.0)).collect();
        let c = group_counts(&all_male, "p", 20, 0.0).unwrap();
        assert_eq!(c.counts(g), &[0, 20]);
        assert_eq!(c.abstained[&g], 0);

        let half: Vec<_> = (0..20)
            .map(|i| rec("p", &i.to_string(), g, if i % 2 == 0 { "male" } else { "female" }, 1.0))
            .collect();
        assert_eq!(group_counts(&half, "p", 20, 0.0).unwrap().counts(g), &[10, 10]);

        let partial: Vec<_> = (0..18)
            .map(|i| rec("p", &i.to_string(), g, if i < 12 { "male" } else { "female" }, 1.0))
            .collect();
        let c = group_counts(&partial, "p", 20, 0.0).unwrap();
        assert_eq!(c.counts(g), &[6, 12]);
        assert_eq!(c.abstained[&g], 2);
        c.validate().unwrap();

        assert!(matches!(
            group_counts(&all_male, "p", 19, 0.0),
            Err(LabelError::GroupSize { .. })
        ));
    }

    #[test]
    fn group_counts_merge_by_addition() {
        let mut a = GroupCounts::from_vectors(
            "p",
            10,
            [(Attribute::Gender, vec![4, 6])].into_iter().collect(),
        )
        .unwrap();
        let b = GroupCounts::from_vectors(
            "p",
            5,
            [(Attribute::Gender, vec![1, 3])].into_iter().collect(),
        )
        .unwrap();
        a += &b;
        assert_eq!(a.counts(Attribute::Gender), &[5, 9]);
        assert_eq!(a.abstained[&Attribute::Gender], 1);
        a.validate().unwrap();
    }

    #[test]
    fn counts_with_entropy_hits_target() {
        for (k, h) in [(2, 0.4690), (3, 0.1895), (5, 0.0936), (5, 0.9971)] {
            let c = counts_with_entropy(k, h, 100_000);
            assert_eq!(c.iter().sum::<u64>(), 100_000);
            let n = 100_000.0;
            let ent: f64 = c
                .iter()
                .filter(|&&x| x > 0)
                .map(|&x| {
                    let p = x as f64 / n;
                    -p * p.ln()
                })
                .sum::<f64>()
                / (k as f64).ln();
            assert!((ent - h).abs() < 1e-3, "k={k} h={h} got {ent}");
        }
    }
}
