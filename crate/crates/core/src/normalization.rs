//! Post-processing of raw model output into catalog labels.
//!
//! [`strip_to_label`] cuts free text down to the predicted class and
//! [`resolve_label`] maps it onto the catalog, recording out-of-catalog
//! output as a hallucination. Only rung-one matches and declared spelling
//! variants count as resolved.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labelset::{canonicalize_surface, LabelCatalog, SurfaceMatch};

pub const DEFAULT_TAU: f64 = 0.2;

/// Minimum shared prefix, in characters, for a morphological variant.
pub const STEM_PREFIX_LEN: usize = 6;

/// Longest span, in whitespace tokens, considered when scanning for a label.
const MAX_LABEL_TOKENS: usize = 4;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SynonymError {
    #[error("synonym line {line}: expected `surface -> canonical`")]
    Syntax { line: usize },
    #[error("synonym line {line}: {label:?} is not a catalog label")]
    UnknownLabel { line: usize, label: String },
    #[error("cannot read synonym table: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HallucinationKind {
    NearMiss,
    MorphVariant,
    ContextPhrase,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HallucinationRecord {
    pub kind: HallucinationKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nearest_label: Option<String>,
    pub evidence: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "label", rename_all = "snake_case")]
pub enum Outcome {
    Resolved(String),
    Unresolved,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizedPrediction {
    pub raw_text: String,
    pub outcome: Outcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hallucination: Option<HallucinationRecord>,
    #[serde(default)]
    pub truncated: bool,
}

impl NormalizedPrediction {
    pub fn label(&self) -> Option<&str> {
        match &self.outcome {
            Outcome::Resolved(l) => Some(l),
            Outcome::Unresolved => None,
        }
    }

    pub fn is_resolved(&self) -> bool {
        self.label().is_some()
    }

    /// A prediction for a failed request: unresolved, and not a
    /// hallucination since the model produced nothing.
    pub fn failed() -> Self {
        NormalizedPrediction {
            raw_text: String::new(),
            outcome: Outcome::Unresolved,
            hallucination: None,
            truncated: false,
        }
    }
}

/// Surface → canonical label pairs for paraphrased classes.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SynonymTable {
    entries: BTreeMap<String, String>,
}

impl SynonymTable {
    /// The seed table: only pairs with direct evidence of model output.
    pub fn seed() -> Self {
        let mut t = Self::default();
        t.entries.insert(canonicalize_surface("Reduce"), "Decrease".into());
        t
    }

    pub fn insert(&mut self, surface: &str, canonical: &str) {
        self.entries.insert(canonicalize_surface(surface), canonical.to_string());
    }

    pub fn get(&self, surface: &str) -> Option<&str> {
        self.entries.get(&canonicalize_surface(surface)).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Parse `surface -> canonical` lines (also accepts `→`). `#` starts a comment.
    pub fn parse(text: &str, catalog: &LabelCatalog) -> Result<Self, SynonymError> {
        let mut t = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (surface, label) = line
                .split_once("->")
                .or_else(|| line.split_once('→'))
                .ok_or(SynonymError::Syntax { line: i + 1 })?;
            let (surface, label) = (surface.trim(), label.trim());
            if surface.is_empty() || label.is_empty() {
                return Err(SynonymError::Syntax { line: i + 1 });
            }
            if !catalog.contains(label) {
                return Err(SynonymError::UnknownLabel {
                    line: i + 1,
                    label: label.to_string(),
                });
            }
            t.insert(surface, label);
        }
        Ok(t)
    }

    /// Seed table extended with the entries in `path`.
    pub fn seed_with_file(path: &Path, catalog: &LabelCatalog) -> Result<Self, SynonymError> {
        let text = std::fs::read_to_string(path).map_err(|e| SynonymError::Io(e.to_string()))?;
        let mut t = Self::seed();
        t.entries.extend(Self::parse(&text, catalog)?.entries);
        Ok(t)
    }
}

fn is_edge_junk(c: char) -> bool {
    !(c.is_alphanumeric() || c == '/')
}

/// Earliest substring of `raw` naming a catalog label or alias; otherwise the
/// cleaned first non-empty line.
pub fn strip_to_label(raw: &str, catalog: &LabelCatalog) -> String {
    // (byte start, byte end) of each whitespace-separated token
    let mut spans = Vec::new();
    let mut start = None;
    for (i, c) in raw.char_indices() {
        match (c.is_whitespace(), start) {
            (true, Some(s)) => {
                spans.push((s, i));
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        spans.push((s, raw.len()));
    }

    for i in 0..spans.len() {
        let longest = (1..=MAX_LABEL_TOKENS.min(spans.len() - i)).rev().find_map(|len| {
            let piece = &raw[spans[i].0..spans[i + len - 1].1];
            let trimmed = piece.trim_matches(is_edge_junk);
            if trimmed.is_empty() {
                return None;
            }
            catalog.lookup(trimmed).map(|_| trimmed)
        });
        if let Some(hit) = longest {
            return hit.to_string();
        }
    }
    clean_first_line(raw)
}

fn prefix_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?i)^(?:the\s+)?(?:extracted\s+|predicted\s+|expressed\s+|final\s+)?(?:relation(?:ship)?(?:\s+type|\s+class)?|label|class|answer|output)(?:\s+is)?\s*[:=\-]\s*",
        )
        .expect("prefix regex compiles")
    })
}

fn clean_first_line(raw: &str) -> String {
    let Some(line) = raw.lines().map(str::trim).find(|l| !l.is_empty()) else {
        return String::new();
    };
    let mut s = line.to_string();
    // strip emphasis markers and surrounding punctuation, then a label prefix,
    // until nothing changes
    loop {
        let before = s.clone();
        s = s
            .trim_matches(|c: char| matches!(c, '*' | '_' | '`' | '#' | '>' | '"' | '\'') || c.is_whitespace())
            .to_string();
        s = prefix_re().replace(&s, "").to_string();
        s = s
            .trim_matches(|c: char| c.is_ascii_punctuation() && c != '/' || c.is_whitespace())
            .to_string();
        if s == before {
            return s;
        }
    }
}

/// Levenshtein distance over chars.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Levenshtein divided by the longer length; 0 for two empty strings.
pub fn normalized_edit_distance(a: &str, b: &str) -> f64 {
    let longest = a.chars().count().max(b.chars().count());
    if longest == 0 {
        return 0.0;
    }
    levenshtein(a, b) as f64 / longest as f64
}

fn common_prefix_len(a: &str, b: &str) -> usize {
    a.chars().zip(b.chars()).take_while(|(x, y)| x == y).count()
}

/// Resolution settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResolveOptions {
    /// Normalized edit-distance threshold for near misses.
    pub tau: f64,
    /// When true (the default), rungs 1 and 2 compare letter case exactly and
    /// only normalize whitespace and hyphens; `experiences` is then a variant
    /// of `Experiences`, not a match.
    pub case_sensitive: bool,
}

impl Default for ResolveOptions {
    fn default() -> Self {
        ResolveOptions {
            tau: DEFAULT_TAU,
            case_sensitive: true,
        }
    }
}

/// Map a candidate string onto the catalog with default case handling.
/// See [`resolve_label_with`].
pub fn resolve_label(
    candidate: &str,
    catalog: &LabelCatalog,
    synonyms: &SynonymTable,
    tau: f64,
) -> NormalizedPrediction {
    resolve_label_with(
        candidate,
        catalog,
        synonyms,
        ResolveOptions {
            tau,
            ..ResolveOptions::default()
        },
    )
}

/// Map a candidate string onto the catalog. First matching rung wins:
///
/// 1. exact canonical name → resolved
/// 2. catalog alias (declared spelling variant) → resolved, with a near-miss record
/// 3. shared prefix of at least [`STEM_PREFIX_LEN`] chars with a canonical name → morph variant
/// 4. synonym table hit, or normalized edit distance ≤ `tau` → near miss
/// 5. anything else → context phrase
///
/// Rungs 3 and 4 always compare lowercased forms.
pub fn resolve_label_with(
    candidate: &str,
    catalog: &LabelCatalog,
    synonyms: &SynonymTable,
    options: ResolveOptions,
) -> NormalizedPrediction {
    let tau = options.tau;
    let key = canonicalize_surface(candidate);
    let unresolved = |kind, nearest: Option<&str>| NormalizedPrediction {
        raw_text: candidate.to_string(),
        outcome: Outcome::Unresolved,
        hallucination: Some(HallucinationRecord {
            kind,
            nearest_label: nearest.map(str::to_string),
            evidence: candidate.to_string(),
        }),
        truncated: false,
    };

    let hit = if options.case_sensitive {
        catalog.lookup_exact(candidate)
    } else {
        catalog.lookup(&key)
    };
    if let Some((label, kind)) = hit {
        let name = label.canonical_name.clone();
        return NormalizedPrediction {
            raw_text: candidate.to_string(),
            outcome: Outcome::Resolved(name.clone()),
            hallucination: (kind == SurfaceMatch::Alias).then(|| HallucinationRecord {
                kind: HallucinationKind::NearMiss,
                nearest_label: Some(name),
                evidence: candidate.to_string(),
            }),
            truncated: false,
        };
    }
    if key.is_empty() {
        return unresolved(HallucinationKind::ContextPhrase, None);
    }

    let canonical: Vec<(String, &str)> = catalog
        .names()
        .map(|n| (canonicalize_surface(n), n))
        .collect();

    let stem = canonical
        .iter()
        .map(|(c, n)| (common_prefix_len(&key, c), *n))
        .filter(|(len, _)| *len >= STEM_PREFIX_LEN)
        .fold(None::<(usize, &str)>, |best, cur| match best {
            Some(b) if b.0 >= cur.0 => Some(b),
            _ => Some(cur),
        });
    if let Some((_, name)) = stem {
        return unresolved(HallucinationKind::MorphVariant, Some(name));
    }

    if let Some(label) = synonyms.get(&key) {
        return unresolved(HallucinationKind::NearMiss, Some(label));
    }
    let closest = canonical
        .iter()
        .map(|(c, n)| (normalized_edit_distance(&key, c), *n))
        .fold(None::<(f64, &str)>, |best, cur| match best {
            Some(b) if b.0 <= cur.0 => Some(b),
            _ => Some(cur),
        });
    if let Some((d, name)) = closest {
        if d <= tau {
            return unresolved(HallucinationKind::NearMiss, Some(name));
        }
    }
    unresolved(HallucinationKind::ContextPhrase, None)
}

/// Normalization settings shared by a run.
#[derive(Debug, Clone)]
pub struct Normalizer {
    pub catalog: LabelCatalog,
    pub synonyms: SynonymTable,
    pub options: ResolveOptions,
}

impl Normalizer {
    pub fn new(catalog: LabelCatalog, synonyms: SynonymTable, options: ResolveOptions) -> Self {
        Normalizer {
            catalog,
            synonyms,
            options,
        }
    }

    /// Strip, resolve, and keep the untouched model output in `raw_text`.
    pub fn normalize(&self, raw: &str, truncated: bool) -> NormalizedPrediction {
        let candidate = strip_to_label(raw, &self.catalog);
        let mut pred = resolve_label_with(&candidate, &self.catalog, &self.synonyms, self.options);
        pred.raw_text = raw.to_string();
        pred.truncated = truncated;
        pred
    }
}

impl Default for Normalizer {
    fn default() -> Self {
        Normalizer::new(LabelCatalog::microbiorel(), SynonymTable::seed(), ResolveOptions::default())
    }
}
