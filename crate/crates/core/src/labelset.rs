//! Relation label taxonomy.
//!
//! The built-in catalog holds the 23 MicrobioRel relation classes in the
//! order they are presented to models. Catalogs are immutable once built
//! and can be shared freely between workers.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Built-in MicrobioRel classes, in prompt order.
pub const MICROBIOREL_LABELS: [&str; 23] = [
    "Increase",
    "Decrease",
    "Stop",
    "Start",
    "Improve",
    "Worsen",
    "Presence",
    "Negative_correlation",
    "Affects",
    "Causes",
    "Complicates",
    "Experiences",
    "Interacts_with",
    "Location_of",
    "Marker/Mechanism",
    "Prevents",
    "Reveals",
    "Treats",
    "Physically_related_to",
    "Part_of",
    "Possible",
    "Associated_with",
    "None",
];

/// Name of the synthetic negative class.
pub const NONE_LABEL: &str = "None";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LabelError {
    #[error("label name is empty")]
    EmptyName,
    #[error("label name {0:?} has leading or trailing whitespace")]
    UntrimmedName(String),
    #[error("duplicate label {0:?}")]
    DuplicateLabel(String),
    #[error("surface form {surface:?} maps to both {first:?} and {second:?}")]
    AliasCollision {
        surface: String,
        first: String,
        second: String,
    },
    #[error("catalog must contain exactly one none-class label, found {0}")]
    NoneClassCount(usize),
    #[error("unknown label {0:?}")]
    UnknownLabel(String),
    #[error("cannot read label config: {0}")]
    Io(String),
    #[error("invalid label config: {0}")]
    Parse(String),
}

/// A single relation class with its accepted spelling variants.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationLabel {
    pub canonical_name: String,
    #[serde(default)]
    pub aliases: BTreeSet<String>,
    #[serde(default)]
    pub is_none_class: bool,
}

impl RelationLabel {
    pub fn new(name: &str) -> Self {
        RelationLabel {
            canonical_name: name.to_string(),
            aliases: BTreeSet::new(),
            is_none_class: name == NONE_LABEL,
        }
    }

    pub fn with_alias(mut self, alias: &str) -> Self {
        self.aliases.insert(alias.to_string());
        self
    }
}

/// How a surface form matched the catalog.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurfaceMatch {
    Canonical,
    Alias,
}

/// Ordered, validated set of relation labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelCatalog {
    labels: Vec<RelationLabel>,
    // canonicalized surface -> (label index, match kind)
    index: BTreeMap<String, (usize, SurfaceMatch)>,
    // case-preserving separator form -> (label index, match kind)
    exact_index: BTreeMap<String, (usize, SurfaceMatch)>,
    declared_len: usize,
}

#[derive(Debug, Deserialize)]
struct CatalogFile {
    labels: Vec<LabelEntry>,
    #[serde(default)]
    expected_count: Option<usize>,
}

#[derive(Debug, Deserialize)]
struct LabelEntry {
    name: String,
    #[serde(default)]
    aliases: Vec<String>,
    #[serde(default)]
    none: Option<bool>,
}

impl LabelCatalog {
    /// The built-in MicrobioRel taxonomy.
    pub fn microbiorel() -> Self {
        let labels = MICROBIOREL_LABELS
            .iter()
            .map(|name| {
                let label = RelationLabel::new(name);
                if *name == "Marker/Mechanism" {
                    label.with_alias("Marker-Mechanism")
                } else {
                    label
                }
            })
            .collect();
        Self::new(labels).expect("built-in catalog is valid")
    }

    pub fn new(labels: Vec<RelationLabel>) -> Result<Self, LabelError> {
        let declared_len = labels.len();
        Self::with_declared_len(labels, declared_len)
    }

    fn with_declared_len(labels: Vec<RelationLabel>, declared_len: usize) -> Result<Self, LabelError> {
        let mut index: BTreeMap<String, (usize, SurfaceMatch)> = BTreeMap::new();
        let mut exact_index = BTreeMap::new();
        let mut names = BTreeSet::new();
        for (i, label) in labels.iter().enumerate() {
            let name = &label.canonical_name;
            if name.is_empty() {
                return Err(LabelError::EmptyName);
            }
            if name.trim() != name {
                return Err(LabelError::UntrimmedName(name.clone()));
            }
            if !names.insert(name.clone()) {
                return Err(LabelError::DuplicateLabel(name.clone()));
            }
            let surfaces = std::iter::once((name, SurfaceMatch::Canonical))
                .chain(label.aliases.iter().map(|a| (a, SurfaceMatch::Alias)));
            for (surface, kind) in surfaces {
                exact_index.entry(separator_form(surface)).or_insert((i, kind));
                let key = canonicalize_surface(surface);
                match index.get(&key) {
                    Some(&(j, _)) if j != i => {
                        return Err(LabelError::AliasCollision {
                            surface: surface.clone(),
                            first: labels[j].canonical_name.clone(),
                            second: name.clone(),
                        })
                    }
                    Some(_) => {}
                    None => {
                        index.insert(key, (i, kind));
                    }
                }
            }
        }
        let none_count = labels.iter().filter(|l| l.is_none_class).count();
        if none_count != 1 {
            return Err(LabelError::NoneClassCount(none_count));
        }
        Ok(LabelCatalog {
            labels,
            index,
            exact_index,
            declared_len,
        })
    }

    /// Load a catalog from a JSON config of the form
    /// `{"labels": [{"name": "...", "aliases": ["..."], "none": false}], "expected_count": 23}`.
    pub fn from_json_str(text: &str) -> Result<Self, LabelError> {
        let file: CatalogFile =
            serde_json::from_str(text).map_err(|e| LabelError::Parse(e.to_string()))?;
        let labels: Vec<RelationLabel> = file
            .labels
            .into_iter()
            .map(|entry| RelationLabel {
                is_none_class: entry.none.unwrap_or(entry.name == NONE_LABEL),
                canonical_name: entry.name,
                aliases: entry.aliases.into_iter().collect(),
            })
            .collect();
        let declared = file.expected_count.unwrap_or(labels.len());
        Self::with_declared_len(labels, declared)
    }

    pub fn from_path(path: &Path) -> Result<Self, LabelError> {
        let text = std::fs::read_to_string(path).map_err(|e| LabelError::Io(e.to_string()))?;
        Self::from_json_str(&text)
    }

    /// Copy of this catalog with one label dropped. The declared size is kept,
    /// so consumers that require a complete taxonomy can detect the gap.
    pub fn without(&self, name: &str) -> Result<Self, LabelError> {
        if self.get(name).is_none() {
            return Err(LabelError::UnknownLabel(name.to_string()));
        }
        let labels = self
            .labels
            .iter()
            .filter(|l| l.canonical_name != name)
            .cloned()
            .collect();
        Self::with_declared_len(labels, self.declared_len)
    }

    pub fn labels(&self) -> &[RelationLabel] {
        &self.labels
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.labels.iter().map(|l| l.canonical_name.as_str())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Number of labels the taxonomy is supposed to have.
    pub fn declared_len(&self) -> usize {
        self.declared_len
    }

    pub fn is_complete(&self) -> bool {
        self.labels.len() == self.declared_len
    }

    pub fn get(&self, canonical_name: &str) -> Option<&RelationLabel> {
        self.labels.iter().find(|l| l.canonical_name == canonical_name)
    }

    pub fn position(&self, canonical_name: &str) -> Option<usize> {
        self.labels.iter().position(|l| l.canonical_name == canonical_name)
    }

    pub fn contains(&self, canonical_name: &str) -> bool {
        self.get(canonical_name).is_some()
    }

    pub fn none_label(&self) -> &RelationLabel {
        self.labels
            .iter()
            .find(|l| l.is_none_class)
            .expect("catalog has a none class")
    }

    /// Look up a surface form after canonicalization.
    pub fn lookup(&self, surface: &str) -> Option<(&RelationLabel, SurfaceMatch)> {
        self.index
            .get(&canonicalize_surface(surface))
            .map(|&(i, kind)| (&self.labels[i], kind))
    }

    /// Case-sensitive lookup: only whitespace and hyphens are normalized.
    pub fn lookup_exact(&self, surface: &str) -> Option<(&RelationLabel, SurfaceMatch)> {
        self.exact_index
            .get(&separator_form(surface))
            .map(|&(i, kind)| (&self.labels[i], kind))
    }

    /// Canonicalized surfaces known to the catalog, with their label.
    pub fn surfaces(&self) -> impl Iterator<Item = (&str, &RelationLabel, SurfaceMatch)> {
        self.index
            .iter()
            .map(|(k, &(i, kind))| (k.as_str(), &self.labels[i], kind))
    }
}

impl Default for LabelCatalog {
    fn default() -> Self {
        Self::microbiorel()
    }
}

/// Names of the built-in classes in prompt order.
pub fn canonical_labels() -> Vec<&'static str> {
    MICROBIOREL_LABELS.to_vec()
}

/// Comparison form of a label surface: lowercased, trimmed, internal
/// whitespace collapsed, spaces and hyphens mapped to underscores. Slashes
/// are kept.
pub fn canonicalize_surface(raw: &str) -> String {
    separator_form(&raw.to_lowercase())
}

/// Like [`canonicalize_surface`] but case-preserving.
pub fn separator_form(raw: &str) -> String {
    raw.split_whitespace()
        .collect::<Vec<_>>()
        .join("_")
        .chars()
        .map(|c| if c == '-' { '_' } else { c })
        .collect()
}
