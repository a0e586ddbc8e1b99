//! Error triage: sample mispredictions, record a human's error class for
//! each, and report the distribution.
//!
//! A session is an append-only JSONL event log. The first line fixes the
//! sample; every later line is a decision or a correction. Each event is
//! fsynced before the call returns, so killing the process loses at most the
//! line being written, and a torn final line is discarded on reopen.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::GoldRelation;
use crate::normalization::NormalizedPrediction;
use crate::summary_quality::SummaryRecord;

#[derive(Debug, Error)]
pub enum TriageError {
    #[error("no mispredictions to sample from")]
    NoErrors,
    #[error("sample size must be positive")]
    InvalidSampleSize,
    #[error("unknown item {0}")]
    UnknownItem(String),
    #[error("{annotator} already decided item {item_id}; record a correction instead")]
    DuplicateDecision { item_id: String, annotator: String },
    #[error("{annotator} has no decision on item {item_id} to correct")]
    NothingToCorrect { item_id: String, annotator: String },
    #[error("session file {0} already exists")]
    SessionExists(String),
    #[error("session file {path} is corrupt at line {line}: {message}")]
    Corrupt {
        path: String,
        line: usize,
        message: String,
    },
    #[error("I/O error on {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TriageError + '_ {
    move |source| TriageError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorClass {
    /// The summary lost or distorted the interaction.
    Class1SummaryError,
    /// The summary was fine; the relation classifier erred.
    Class2ReError,
    /// The prediction is defensible despite disagreeing with the annotation.
    Class3PlausibleDivergence,
}

impl ErrorClass {
    pub const ALL: [ErrorClass; 3] = [
        ErrorClass::Class1SummaryError,
        ErrorClass::Class2ReError,
        ErrorClass::Class3PlausibleDivergence,
    ];

    pub fn from_key(key: &str) -> Option<Self> {
        match key {
            "1" => Some(ErrorClass::Class1SummaryError),
            "2" => Some(ErrorClass::Class2ReError),
            "3" => Some(ErrorClass::Class3PlausibleDivergence),
            _ => None,
        }
    }

    pub fn describe(self) -> &'static str {
        match self {
            ErrorClass::Class1SummaryError => "summary error",
            ErrorClass::Class2ReError => "relation classifier error",
            ErrorClass::Class3PlausibleDivergence => "plausible divergence",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriageItem {
    pub item_id: String,
    pub gold: GoldRelation,
    pub prediction: NormalizedPrediction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<SummaryRecord>,
    pub source_text: String,
}

impl TriageItem {
    pub fn is_error(&self) -> bool {
        self.prediction.label() != Some(self.gold.label.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriageDecision {
    pub item_id: String,
    pub error_class: ErrorClass,
    #[serde(default)]
    pub note: String,
    pub annotator: String,
    /// Unix seconds.
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TriageEvent {
    SessionStarted {
        seed: u64,
        sample_size: usize,
        #[serde(default)]
        source: String,
        items: Vec<TriageItem>,
    },
    Decision(TriageDecision),
    /// Supersedes the annotator's earlier verdict on the item.
    Correction(TriageDecision),
}

/// Seeded sample, without replacement, of `min(n, errors)` mispredicted
/// items. Input order does not matter: candidates are sorted by id first.
pub fn sample_errors(items: &[TriageItem], n: usize, seed: u64) -> Result<Vec<TriageItem>, TriageError> {
    if n == 0 {
        return Err(TriageError::InvalidSampleSize);
    }
    let mut errors: Vec<&TriageItem> = items.iter().filter(|i| i.is_error()).collect();
    if errors.is_empty() {
        return Err(TriageError::NoErrors);
    }
    errors.sort_by(|a, b| a.item_id.cmp(&b.item_id));
    errors.dedup_by(|a, b| a.item_id == b.item_id);
    errors.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    errors.truncate(n);
    Ok(errors.into_iter().cloned().collect())
}

pub fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

#[derive(Debug)]
pub struct TriageSession {
    path: PathBuf,
    file: File,
    pub seed: u64,
    pub sample_size: usize,
    pub source: String,
    pub items: Vec<TriageItem>,
    /// Every decision and correction, in log order.
    pub events: Vec<TriageEvent>,
    current: BTreeMap<(String, String), TriageDecision>,
}

/// In-memory state, comparable across a save/replay cycle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionState {
    pub seed: u64,
    pub sample_size: usize,
    pub items: Vec<TriageItem>,
    pub events: Vec<TriageEvent>,
}

fn write_event(file: &mut File, path: &Path, event: &TriageEvent) -> Result<(), TriageError> {
    let mut line = serde_json::to_string(event).expect("triage event serializes");
    line.push('\n');
    file.write_all(line.as_bytes()).map_err(io_err(path))?;
    file.sync_all().map_err(io_err(path))
}

impl TriageSession {
    /// Start a new session file holding `items` as the fixed sample.
    pub fn create(path: &Path, items: Vec<TriageItem>, seed: u64, source: &str) -> Result<Self, TriageError> {
        let mut file = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(path)
            .map_err(|e| {
                if e.kind() == std::io::ErrorKind::AlreadyExists {
                    TriageError::SessionExists(path.display().to_string())
                } else {
                    TriageError::Io {
                        path: path.display().to_string(),
                        source: e,
                    }
                }
            })?;
        let start = TriageEvent::SessionStarted {
            seed,
            sample_size: items.len(),
            source: source.to_string(),
            items: items.clone(),
        };
        write_event(&mut file, path, &start)?;
        Ok(TriageSession {
            path: path.to_path_buf(),
            file,
            seed,
            sample_size: items.len(),
            source: source.to_string(),
            items,
            events: Vec::new(),
            current: BTreeMap::new(),
        })
    }

    /// Replay an existing session. A final line without its newline is a
    /// torn write; it is dropped and truncated away.
    pub fn open(path: &Path) -> Result<Self, TriageError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let complete_len = match text.rfind('\n') {
            Some(i) => i + 1,
            None => 0,
        };
        let corrupt = |line: usize, message: String| TriageError::Corrupt {
            path: path.display().to_string(),
            line,
            message,
        };
        let mut lines = text[..complete_len].lines().enumerate();
        let Some((_, first)) = lines.next() else {
            return Err(corrupt(1, "missing session header".into()));
        };
        let TriageEvent::SessionStarted {
            seed,
            sample_size,
            source,
            items,
        } = serde_json::from_str(first).map_err(|e| corrupt(1, e.to_string()))?
        else {
            return Err(corrupt(1, "first event is not session_started".into()));
        };

        if complete_len < text.len() {
            let f = OpenOptions::new().write(true).open(path).map_err(io_err(path))?;
            f.set_len(complete_len as u64).map_err(io_err(path))?;
            f.sync_all().map_err(io_err(path))?;
        }
        let file = OpenOptions::new().append(true).open(path).map_err(io_err(path))?;
        let mut session = TriageSession {
            path: path.to_path_buf(),
            file,
            seed,
            sample_size,
            source,
            items,
            events: Vec::new(),
            current: BTreeMap::new(),
        };
        for (i, line) in lines {
            let event: TriageEvent = serde_json::from_str(line).map_err(|e| corrupt(i + 1, e.to_string()))?;
            session.apply(event).map_err(|e| corrupt(i + 1, e.to_string()))?;
        }
        Ok(session)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn check(&self, event: &TriageEvent) -> Result<(), TriageError> {
        let (d, correction) = match event {
            TriageEvent::Decision(d) => (d, false),
            TriageEvent::Correction(d) => (d, true),
            TriageEvent::SessionStarted { .. } => {
                return Err(TriageError::Corrupt {
                    path: self.path.display().to_string(),
                    line: 0,
                    message: "second session header".into(),
                })
            }
        };
        if !self.items.iter().any(|i| i.item_id == d.item_id) {
            return Err(TriageError::UnknownItem(d.item_id.clone()));
        }
        let key = (d.item_id.clone(), d.annotator.clone());
        match (self.current.contains_key(&key), correction) {
            (true, false) => Err(TriageError::DuplicateDecision {
                item_id: d.item_id.clone(),
                annotator: d.annotator.clone(),
            }),
            (false, true) => Err(TriageError::NothingToCorrect {
                item_id: d.item_id.clone(),
                annotator: d.annotator.clone(),
            }),
            _ => Ok(()),
        }
    }

    fn apply(&mut self, event: TriageEvent) -> Result<(), TriageError> {
        self.check(&event)?;
        if let TriageEvent::Decision(d) | TriageEvent::Correction(d) = &event {
            self.current.insert((d.item_id.clone(), d.annotator.clone()), d.clone());
        }
        self.events.push(event);
        Ok(())
    }

    fn append(&mut self, event: TriageEvent) -> Result<(), TriageError> {
        self.check(&event)?;
        write_event(&mut self.file, &self.path, &event)?;
        self.apply(event)
    }

    /// Persist a first verdict on an item. Durable on return.
    pub fn record_decision(&mut self, decision: TriageDecision) -> Result<(), TriageError> {
        self.append(TriageEvent::Decision(decision))
    }

    /// Supersede an earlier verdict; the original stays in the log.
    pub fn record_correction(&mut self, decision: TriageDecision) -> Result<(), TriageError> {
        self.append(TriageEvent::Correction(decision))
    }

    /// Effective verdict for `annotator` on `item_id`.
    pub fn decision(&self, item_id: &str, annotator: &str) -> Option<&TriageDecision> {
        self.current.get(&(item_id.to_string(), annotator.to_string()))
    }

    pub fn undecided_for<'a>(&'a self, annotator: &'a str) -> impl Iterator<Item = &'a TriageItem> + 'a {
        self.items
            .iter()
            .filter(move |i| self.decision(&i.item_id, annotator).is_none())
    }

    pub fn state(&self) -> SessionState {
        SessionState {
            seed: self.seed,
            sample_size: self.sample_size,
            items: self.items.clone(),
            events: self.events.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistributionReport {
    pub class1_summary_error: usize,
    pub class2_re_error: usize,
    pub class3_plausible_divergence: usize,
    pub undecided: usize,
    pub sample_size: usize,
}

impl DistributionReport {
    pub fn count(&self, class: ErrorClass) -> usize {
        match class {
            ErrorClass::Class1SummaryError => self.class1_summary_error,
            ErrorClass::Class2ReError => self.class2_re_error,
            ErrorClass::Class3PlausibleDivergence => self.class3_plausible_divergence,
        }
    }

    pub fn to_table(&self) -> String {
        let pct = |n: usize| {
            if self.sample_size == 0 {
                0.0
            } else {
                100.0 * n as f64 / self.sample_size as f64
            }
        };
        let mut out = format!("{:<34} {:>5} {:>7}\n", "Error class", "Count", "Share");
        for class in ErrorClass::ALL {
            let label = format!("{} ({})", class_number(class), class.describe());
            let n = self.count(class);
            out.push_str(&format!("{label:<34} {n:>5} {:>6.1}%\n", pct(n)));
        }
        out.push_str(&format!("{:<34} {:>5} {:>6.1}%\n", "undecided", self.undecided, pct(self.undecided)));
        out.push_str(&format!("{:<34} {:>5}\n", "sample size", self.sample_size));
        out
    }
}

fn class_number(c: ErrorClass) -> &'static str {
    match c {
        ErrorClass::Class1SummaryError => "Class 1",
        ErrorClass::Class2ReError => "Class 2",
        ErrorClass::Class3PlausibleDivergence => "Class 3",
    }
}

/// Counts per class for one annotator, or for the most recent verdict on each
/// item across annotators when `annotator` is `None`. Always reconciles to
/// the sample size.
pub fn distribution_report(session: &TriageSession, annotator: Option<&str>) -> DistributionReport {
    let mut latest: BTreeMap<&str, ErrorClass> = BTreeMap::new();
    for event in &session.events {
        if let TriageEvent::Decision(d) | TriageEvent::Correction(d) = event {
            if annotator.is_none_or(|a| a == d.annotator) {
                latest.insert(&d.item_id, d.error_class);
            }
        }
    }
    let mut r = DistributionReport {
        class1_summary_error: 0,
        class2_re_error: 0,
        class3_plausible_divergence: 0,
        undecided: 0,
        sample_size: session.items.len(),
    };
    for item in &session.items {
        match latest.get(item.item_id.as_str()) {
            Some(ErrorClass::Class1SummaryError) => r.class1_summary_error += 1,
            Some(ErrorClass::Class2ReError) => r.class2_re_error += 1,
            Some(ErrorClass::Class3PlausibleDivergence) => r.class3_plausible_divergence += 1,
            None => r.undecided += 1,
        }
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ReviewSummary {
    pub decided: usize,
    pub skipped: usize,
    pub quit: bool,
}

fn show_item<W: Write>(out: &mut W, item: &TriageItem, pos: usize, total: usize) -> std::io::Result<()> {
    writeln!(out, "── item {pos}/{total}: {}", item.item_id)?;
    writeln!(out, "source:     {}", item.source_text)?;
    match &item.summary {
        Some(s) => writeln!(out, "summary:    {}", s.summary_text)?,
        None => writeln!(out, "summary:    (none)")?,
    }
    writeln!(out, "gold:       {}", item.gold.label)?;
    writeln!(
        out,
        "prediction: {} (raw: {:?})",
        item.prediction.label().unwrap_or("UNRESOLVED"),
        item.prediction.raw_text
    )?;
    write!(
        out,
        "[1] summary error  [2] RE error  [3] plausible  [s] skip  [q] quit (optionally: \"2 <note>\")> "
    )?;
    out.flush()
}

/// Terminal review loop over items the annotator has not decided yet.
///
/// Each answer is `1`, `2` or `3` (optionally followed by a note), `s` to
/// skip, or `q` to stop. End of input stops as well.
pub fn review<R: BufRead, W: Write>(
    session: &mut TriageSession,
    annotator: &str,
    mut input: R,
    mut out: W,
    clock: &dyn Fn() -> u64,
) -> Result<ReviewSummary, TriageError> {
    let todo: Vec<TriageItem> = session.undecided_for(annotator).cloned().collect();
    let total = todo.len();
    let out_err = |e: std::io::Error| TriageError::Io {
        path: "<terminal>".into(),
        source: e,
    };
    let mut summary = ReviewSummary::default();
    let mut idx = 0;
    while idx < todo.len() {
        let item = &todo[idx];
        show_item(&mut out, item, idx + 1, total).map_err(out_err)?;
        let mut line = String::new();
        if input.read_line(&mut line).map_err(out_err)? == 0 {
            summary.quit = true;
            break;
        }
        let line = line.trim();
        let (key, note) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
        match key {
            "q" | "Q" => {
                summary.quit = true;
                break;
            }
            "s" | "S" => {
                summary.skipped += 1;
                idx += 1;
            }
            k => match ErrorClass::from_key(k) {
                Some(class) => {
                    session.record_decision(TriageDecision {
                        item_id: item.item_id.clone(),
                        error_class: class,
                        note: note.trim().to_string(),
                        annotator: annotator.to_string(),
                        timestamp: clock(),
                    })?;
                    writeln!(out, "recorded: {}", class.describe()).map_err(out_err)?;
                    summary.decided += 1;
                    idx += 1;
                }
                None => writeln!(out, "unrecognised answer {key:?}").map_err(out_err)?,
            },
        }
    }
    Ok(summary)
}
