//! Corpus ingestion and None-pair generation.
//!
//! Input is line-delimited JSON, one passage per line:
//!
//! ```text
//! {"passage_id": "p1", "document_id": "d1", "text": "...",
//!  "entities": [{"id": "T1", "surface": "PD", "category": "disease", "start": 7, "end": 9}],
//!  "relations": [{"entity1_id": "T1", "entity2_id": "T2", "label": "Decrease", "split": "test"}]}
//! ```
//!
//! Spans are character offsets (not bytes), end-exclusive. `split` is optional
//! but must then be present on every relation in the file.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labelset::{canonicalize_surface, LabelCatalog};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("no records in corpus")]
    NoRecords,
    #[error("record {record}: malformed field `{field}`: {message}")]
    Malformed {
        record: usize,
        field: String,
        message: String,
    },
    #[error("record {record}: entity {entity_id} span [{start}, {end}) is out of bounds for text of length {len}")]
    SpanOutOfBounds {
        record: usize,
        entity_id: String,
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("record {record}: entity {entity_id} surface {surface:?} does not match text {found:?}")]
    SurfaceMismatch {
        record: usize,
        entity_id: String,
        surface: String,
        found: String,
    },
    #[error("record {record}: duplicate entity id {entity_id}")]
    DuplicateEntity { record: usize, entity_id: String },
    #[error("record {record}: duplicate passage id {passage_id}")]
    DuplicatePassage { record: usize, passage_id: String },
    #[error("record {record}: relation references unknown entity {entity_id}")]
    UnknownEntity { record: usize, entity_id: String },
    #[error("record {record}: relation links entity {entity_id} to itself")]
    SelfRelation { record: usize, entity_id: String },
    #[error("record {record}: label {label:?} is not in the catalog")]
    UnknownLabel { record: usize, label: String },
    #[error("record {record}: relation {entity1_id}-{entity2_id} annotated twice")]
    DuplicateRelation {
        record: usize,
        entity1_id: String,
        entity2_id: String,
    },
    #[error("record {record}: relation split must be given for every relation or for none")]
    MixedSplit { record: usize },
    #[error("relation {0} appears in both train and test")]
    OverlappingSplit(String),
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityCategory {
    Species,
    Disease,
    Chemical,
    Mutation,
    Gene,
    CellLine,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityMention {
    pub id: String,
    pub surface: String,
    pub category: EntityCategory,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassageRecord {
    pub passage_id: String,
    pub document_id: String,
    pub text: String,
    pub entities: Vec<EntityMention>,
}

impl PassageRecord {
    pub fn entity(&self, id: &str) -> Option<&EntityMention> {
        self.entities.iter().find(|e| e.id == id)
    }

    /// Whitespace-token count of the passage text.
    pub fn token_count(&self) -> usize {
        self.text.split_whitespace().count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Annotated,
    GeneratedNone,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationKey {
    pub passage_id: String,
    pub entity1_id: String,
    pub entity2_id: String,
}

impl fmt::Display for RelationKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.passage_id, self.entity1_id, self.entity2_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldRelation {
    pub passage_id: String,
    pub entity1_id: String,
    pub entity2_id: String,
    pub label: String,
    pub provenance: Provenance,
}

impl GoldRelation {
    pub fn key(&self) -> RelationKey {
        RelationKey {
            passage_id: self.passage_id.clone(),
            entity1_id: self.entity1_id.clone(),
            entity2_id: self.entity2_id.clone(),
        }
    }

    fn unordered_pair(&self) -> (String, String) {
        unordered(&self.entity1_id, &self.entity2_id)
    }
}

fn unordered(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub train: Vec<GoldRelation>,
    pub test: Vec<GoldRelation>,
}

impl CorpusSplit {
    pub fn new(train: Vec<GoldRelation>, test: Vec<GoldRelation>) -> Result<Self, CorpusError> {
        let train_keys: HashSet<RelationKey> = train.iter().map(GoldRelation::key).collect();
        if let Some(r) = test.iter().find(|r| train_keys.contains(&r.key())) {
            return Err(CorpusError::OverlappingSplit(r.key().to_string()));
        }
        Ok(CorpusSplit { train, test })
    }

    pub fn split_of(&self, key: &RelationKey) -> Option<Split> {
        if self.train.iter().any(|r| &r.key() == key) {
            Some(Split::Train)
        } else if self.test.iter().any(|r| &r.key() == key) {
            Some(Split::Test)
        } else {
            None
        }
    }

    pub fn split_index(&self) -> BTreeMap<RelationKey, Split> {
        self.train
            .iter()
            .map(|r| (r.key(), Split::Train))
            .chain(self.test.iter().map(|r| (r.key(), Split::Test)))
            .collect()
    }
}

/// Per-label counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelHistogram {
    pub counts: BTreeMap<String, u64>,
    pub total: u64,
}

impl LabelHistogram {
    pub fn get(&self, label: &str) -> u64 {
        self.counts.get(label).copied().unwrap_or(0)
    }

    /// Rows in descending count order, ties broken by label name.
    pub fn rows(&self) -> Vec<(&str, u64)> {
        let mut rows: Vec<_> = self.counts.iter().map(|(k, &v)| (k.as_str(), v)).collect();
        rows.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        rows
    }

    /// Two-column text table, largest counts first.
    pub fn to_table(&self) -> String {
        let rows = self.rows();
        let half = rows.len().div_ceil(2);
        let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(13);
        let mut out = String::new();
        out.push_str(&format!(
            "{:<width$} {:>6} | {:<width$} {:>6}\n",
            "Relation type", "Count", "Relation type", "Count"
        ));
        for i in 0..half {
            let left = rows[i];
            out.push_str(&format!("{:<width$} {:>6}", left.0, left.1));
            if let Some(right) = rows.get(i + half) {
                out.push_str(&format!(" | {:<width$} {:>6}", right.0, right.1));
            }
            out.push('\n');
        }
        out.push_str(&format!("Total: {}\n", self.total));
        out
    }
}

/// Published MicrobioRel per-label counts (22 annotated types, no None).
pub const MICROBIOREL_REFERENCE_COUNTS: [(&str, u64); 22] = [
    ("Associated_with", 210),
    ("Part_of", 204),
    ("Affects", 202),
    ("Increase", 185),
    ("Location_of", 146),
    ("Causes", 144),
    ("Experiences", 132),
    ("Decrease", 121),
    ("Start", 118),
    ("Improve", 102),
    ("Interacts_with", 86),
    ("Possible", 56),
    ("Worsen", 51),
    ("Marker/Mechanism", 41),
    ("Prevents", 39),
    ("Physically_related_to", 31),
    ("Negative_correlation", 23),
    ("Treats", 17),
    ("Complicates", 10),
    ("Presence", 9),
    ("Reveals", 7),
    ("Stop", 6),
];

/// Total number of annotated relations stated in the MicrobioRel corpus
/// description. The per-label table sums to 1,940.
pub const MICROBIOREL_STATED_TOTAL: u64 = 1994;

/// Comparison of a histogram against the published reference table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferenceCheck {
    pub matches_table: bool,
    pub mismatched_labels: Vec<String>,
    pub table_total: u64,
    pub stated_total: u64,
    pub note: String,
}

pub fn reference_check(hist: &LabelHistogram) -> ReferenceCheck {
    let mut mismatched = Vec::new();
    for (label, count) in MICROBIOREL_REFERENCE_COUNTS {
        if hist.get(label) != count {
            mismatched.push(label.to_string());
        }
    }
    let table_total: u64 = MICROBIOREL_REFERENCE_COUNTS.iter().map(|r| r.1).sum();
    let note = format!(
        "published per-label counts sum to {table_total}; the corpus description states {MICROBIOREL_STATED_TOTAL} annotated relations ({} unaccounted)",
        MICROBIOREL_STATED_TOTAL - table_total
    );
    ReferenceCheck {
        matches_table: mismatched.is_empty(),
        mismatched_labels: mismatched,
        table_total,
        stated_total: MICROBIOREL_STATED_TOTAL,
        note,
    }
}

pub fn corpus_stats(relations: &[GoldRelation]) -> LabelHistogram {
    let mut counts = BTreeMap::new();
    for r in relations {
        *counts.entry(r.label.clone()).or_insert(0u64) += 1;
    }
    let total = counts.values().sum();
    LabelHistogram { counts, total }
}

/// Histogram with a zero entry for every catalog label.
pub fn corpus_stats_with_catalog(relations: &[GoldRelation], catalog: &LabelCatalog) -> LabelHistogram {
    let mut hist = corpus_stats(relations);
    for name in catalog.names() {
        hist.counts.entry(name.to_string()).or_insert(0);
    }
    hist
}

/// Cap on None pairs: `max(floor, ceil(ratio * tokens))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NonePolicy {
    pub floor: usize,
    pub ratio: f64,
}

impl Default for NonePolicy {
    fn default() -> Self {
        NonePolicy {
            floor: 1,
            ratio: 0.05,
        }
    }
}

impl NonePolicy {
    pub fn cap(&self, passage: &PassageRecord) -> usize {
        let scaled = (self.ratio * passage.token_count() as f64).ceil();
        let scaled = if scaled.is_finite() && scaled > 0.0 {
            scaled as usize
        } else {
            0
        };
        self.floor.max(scaled)
    }
}

/// Unordered entity pairs of `passage` not covered by any gold relation,
/// in entity order.
pub fn none_candidates(passage: &PassageRecord, gold: &[GoldRelation]) -> Vec<(usize, usize)> {
    let annotated: HashSet<(String, String)> = gold
        .iter()
        .filter(|r| r.passage_id == passage.passage_id)
        .map(GoldRelation::unordered_pair)
        .collect();
    let n = passage.entities.len();
    let mut out = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let pair = unordered(&passage.entities[i].id, &passage.entities[j].id);
            if !annotated.contains(&pair) {
                out.push((i, j));
            }
        }
    }
    out
}

/// Seeded, capped sample of None-labelled pairs for one passage.
///
/// Candidates are shuffled with ChaCha8 seeded from `seed`; the first `cap`
/// are kept and returned in candidate order.
pub fn generate_none_pairs(
    passage: &PassageRecord,
    gold: &[GoldRelation],
    policy: &NonePolicy,
    seed: u64,
    none_label: &str,
) -> Vec<GoldRelation> {
    let mut candidates = none_candidates(passage, gold);
    let cap = policy.cap(passage).min(candidates.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    candidates.shuffle(&mut rng);
    candidates.truncate(cap);
    candidates.sort_unstable();
    candidates
        .into_iter()
        .map(|(i, j)| GoldRelation {
            passage_id: passage.passage_id.clone(),
            entity1_id: passage.entities[i].id.clone(),
            entity2_id: passage.entities[j].id.clone(),
            label: none_label.to_string(),
            provenance: Provenance::GeneratedNone,
        })
        .collect()
}

/// Per-passage seed derived from a run seed, so passages sample independently.
pub fn passage_seed(seed: u64, passage_id: &str) -> u64 {
    // FNV-1a over the passage id, mixed with the run seed
    let mut h: u64 = 0xcbf29ce484222325;
    for b in passage_id.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h ^ seed.wrapping_mul(0x9E3779B97F4A7C15)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct RawEntity {
    id: String,
    surface: String,
    category: EntityCategory,
    start: usize,
    end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct RawRelation {
    entity1_id: String,
    entity2_id: String,
    label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct RawRecord {
    passage_id: String,
    document_id: String,
    text: String,
    entities: Vec<RawEntity>,
    #[serde(default)]
    relations: Vec<RawRelation>,
}

/// Passages plus their annotated relations.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub passages: Vec<PassageRecord>,
    pub relations: Vec<GoldRelation>,
    /// Split assignment from the file, when every relation carries one.
    pub declared_split: Option<BTreeMap<RelationKey, Split>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SurfaceCheck {
    /// Compare after collapsing whitespace runs.
    #[default]
    Lenient,
    Strict,
}

impl Corpus {
    pub fn passage(&self, id: &str) -> Option<&PassageRecord> {
        self.passages.iter().find(|p| p.passage_id == id)
    }

    pub fn passage_index(&self) -> BTreeMap<&str, &PassageRecord> {
        self.passages.iter().map(|p| (p.passage_id.as_str(), p)).collect()
    }

    /// Serialize back to the ingestion format.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for p in &self.passages {
            let relations = self
                .relations
                .iter()
                .filter(|r| r.passage_id == p.passage_id && r.provenance == Provenance::Annotated)
                .map(|r| RawRelation {
                    entity1_id: r.entity1_id.clone(),
                    entity2_id: r.entity2_id.clone(),
                    label: r.label.clone(),
                    split: self.declared_split.as_ref().and_then(|s| s.get(&r.key()).copied()),
                })
                .collect();
            let raw = RawRecord {
                passage_id: p.passage_id.clone(),
                document_id: p.document_id.clone(),
                text: p.text.clone(),
                entities: p
                    .entities
                    .iter()
                    .map(|e| RawEntity {
                        id: e.id.clone(),
                        surface: e.surface.clone(),
                        category: e.category,
                        start: e.start,
                        end: e.end,
                    })
                    .collect(),
                relations,
            };
            out.push_str(&serde_json::to_string(&raw).expect("corpus record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), CorpusError> {
        let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(|e| io_err(path, e))
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CorpusError {
    CorpusError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn collapse_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn decode_record(line: &str, record: usize) -> Result<RawRecord, CorpusError> {
    let malformed = |field: String, message: String| CorpusError::Malformed {
        record,
        field,
        message,
    };
    let value: serde_json::Value =
        serde_json::from_str(line).map_err(|e| malformed("record".into(), e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| malformed("record".into(), "expected a JSON object".into()))?;
    let string_field = |name: &str| -> Result<String, CorpusError> {
        match obj.get(name) {
            Some(serde_json::Value::String(s)) => Ok(s.clone()),
            Some(_) => Err(malformed(name.into(), "expected a string".into())),
            None => Err(malformed(name.into(), "missing field".into())),
        }
    };
    let list_field = |name: &str, required: bool| -> Result<Vec<serde_json::Value>, CorpusError> {
        match obj.get(name) {
            Some(serde_json::Value::Array(items)) => Ok(items.clone()),
            Some(_) => Err(malformed(name.into(), "expected an array".into())),
            None if required => Err(malformed(name.into(), "missing field".into())),
            None => Ok(Vec::new()),
        }
    };
    let passage_id = string_field("passage_id")?;
    let document_id = string_field("document_id")?;
    let text = string_field("text")?;
    let entities = list_field("entities", true)?
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            serde_json::from_value::<RawEntity>(v).map_err(|e| malformed(format!("entities[{i}]"), e.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let relations = list_field("relations", false)?
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            serde_json::from_value::<RawRelation>(v).map_err(|e| malformed(format!("relations[{i}]"), e.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(RawRecord {
        passage_id,
        document_id,
        text,
        entities,
        relations,
    })
}

pub fn load_corpus(path: &Path, catalog: &LabelCatalog) -> Result<Corpus, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_corpus(&text, catalog, SurfaceCheck::default())
}

/// Parse and validate a corpus. Record numbers in errors are 1-based line numbers.
pub fn parse_corpus(text: &str, catalog: &LabelCatalog, check: SurfaceCheck) -> Result<Corpus, CorpusError> {
    let mut passages = Vec::new();
    let mut relations = Vec::new();
    let mut splits: BTreeMap<RelationKey, Split> = BTreeMap::new();
    let mut split_mode: Option<bool> = None;
    let mut seen_passages = HashSet::new();

    for (lineno, line) in text.lines().enumerate() {
        let record = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw = decode_record(line, record)?;
        if raw.passage_id.is_empty() {
            return Err(CorpusError::Malformed {
                record,
                field: "passage_id".into(),
                message: "empty passage id".into(),
            });
        }
        if !seen_passages.insert(raw.passage_id.clone()) {
            return Err(CorpusError::DuplicatePassage {
                record,
                passage_id: raw.passage_id,
            });
        }
        let chars: Vec<char> = raw.text.chars().collect();
        let mut entity_ids = HashSet::new();
        let mut entities = Vec::with_capacity(raw.entities.len());
        for e in raw.entities {
            if !entity_ids.insert(e.id.clone()) {
                return Err(CorpusError::DuplicateEntity {
                    record,
                    entity_id: e.id,
                });
            }
            if e.start >= e.end || e.end > chars.len() {
                return Err(CorpusError::SpanOutOfBounds {
                    record,
                    entity_id: e.id,
                    start: e.start,
                    end: e.end,
                    len: chars.len(),
                });
            }
            let found: String = chars[e.start..e.end].iter().collect();
            let ok = match check {
                SurfaceCheck::Strict => found == e.surface,
                SurfaceCheck::Lenient => collapse_ws(&found) == collapse_ws(&e.surface),
            };
            if !ok {
                return Err(CorpusError::SurfaceMismatch {
                    record,
                    entity_id: e.id,
                    surface: e.surface,
                    found,
                });
            }
            entities.push(EntityMention {
                id: e.id,
                surface: e.surface,
                category: e.category,
                start: e.start,
                end: e.end,
            });
        }
        let mut pairs = HashSet::new();
        for r in raw.relations {
            for id in [&r.entity1_id, &r.entity2_id] {
                if !entity_ids.contains(id) {
                    return Err(CorpusError::UnknownEntity {
                        record,
                        entity_id: id.clone(),
                    });
                }
            }
            if r.entity1_id == r.entity2_id {
                return Err(CorpusError::SelfRelation {
                    record,
                    entity_id: r.entity1_id,
                });
            }
            // declared alias spellings are stored under their canonical name
            let label = match catalog.lookup_exact(&r.label) {
                Some((l, _)) => l.canonical_name.clone(),
                None => {
                    return Err(CorpusError::UnknownLabel {
                        record,
                        label: r.label,
                    })
                }
            };
            if !pairs.insert((r.entity1_id.clone(), r.entity2_id.clone())) {
                return Err(CorpusError::DuplicateRelation {
                    record,
                    entity1_id: r.entity1_id,
                    entity2_id: r.entity2_id,
                });
            }
            let has_split = r.split.is_some();
            match split_mode {
                None => split_mode = Some(has_split),
                Some(mode) if mode != has_split => return Err(CorpusError::MixedSplit { record }),
                Some(_) => {}
            }
            let rel = GoldRelation {
                passage_id: raw.passage_id.clone(),
                entity1_id: r.entity1_id,
                entity2_id: r.entity2_id,
                label,
                provenance: Provenance::Annotated,
            };
            if let Some(s) = r.split {
                splits.insert(rel.key(), s);
            }
            relations.push(rel);
        }
        passages.push(PassageRecord {
            passage_id: raw.passage_id,
            document_id: raw.document_id,
            text: raw.text,
            entities,
        });
    }
    if passages.is_empty() {
        return Err(CorpusError::NoRecords);
    }
    Ok(Corpus {
        passages,
        relations,
        declared_split: if split_mode == Some(true) { Some(splits) } else { None },
    })
}

/// Seeded split stratified by label: within each label, relations are shuffled
/// and the first `round(test_ratio * n)` go to test.
pub fn stratified_split(relations: &[GoldRelation], test_ratio: f64, seed: u64) -> CorpusSplit {
    let mut by_label: BTreeMap<&str, Vec<&GoldRelation>> = BTreeMap::new();
    for r in relations {
        by_label.entry(r.label.as_str()).or_default().push(r);
    }
    let mut test_keys = HashSet::new();
    for (label, mut group) in by_label {
        group.sort_by_key(|r| r.key());
        let mut rng = ChaCha8Rng::seed_from_u64(passage_seed(seed, label));
        group.shuffle(&mut rng);
        let n_test = (test_ratio * group.len() as f64).round() as usize;
        for r in group.into_iter().take(n_test) {
            test_keys.insert(r.key());
        }
    }
    let (test, train): (Vec<_>, Vec<_>) = relations.iter().cloned().partition(|r| test_keys.contains(&r.key()));
    CorpusSplit { train, test }
}

/// Apply a declared split to relations; relations without an entry (for
/// example generated None pairs) inherit the split of their passage's first
/// annotated relation, defaulting to train.
pub fn apply_declared_split(
    relations: &[GoldRelation],
    declared: &BTreeMap<RelationKey, Split>,
) -> CorpusSplit {
    let mut passage_split: BTreeMap<&str, Split> = BTreeMap::new();
    for (key, split) in declared {
        passage_split.entry(key.passage_id.as_str()).or_insert(*split);
    }
    let mut out = CorpusSplit::default();
    for r in relations {
        let split = declared
            .get(&r.key())
            .copied()
            .or_else(|| passage_split.get(r.passage_id.as_str()).copied())
            .unwrap_or(Split::Train);
        match split {
            Split::Train => out.train.push(r.clone()),
            Split::Test => out.test.push(r.clone()),
        }
    }
    out
}

/// Distinct annotated unordered pairs per passage.
pub fn annotated_pair_count(passage: &PassageRecord, gold: &[GoldRelation]) -> usize {
    gold.iter()
        .filter(|r| r.passage_id == passage.passage_id)
        .map(GoldRelation::unordered_pair)
        .collect::<BTreeSet<_>>()
        .len()
}

/// Canonical label list check used by stats output.
pub fn unknown_labels<'a>(relations: &'a [GoldRelation], catalog: &LabelCatalog) -> Vec<&'a str> {
    relations
        .iter()
        .map(|r| r.label.as_str())
        .filter(|l| !catalog.contains(l) && catalog.lookup(&canonicalize_surface(l)).is_none())
        .collect()
}
