//! Instruction-tuning dataset export.
//!
//! One JSON object per line: `system`, `instruction`, `input`, `output`,
//! `meta`. Most SFT trainers accept this directly as an alpaca-style record
//! with an extra system field; chat-template trainers can map
//! `system`/`instruction + "\n\n" + input`/`output` onto system/user/assistant
//! turns. Test-split rows are included but carry `meta.held_out = true`.
//!
//! A sidecar `<file>.manifest.json` holds the content hash, per-split counts
//! and the label histogram.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{corpus_stats, CorpusSplit, GoldRelation, PassageRecord, Provenance, Split};
use crate::labelset::LabelCatalog;
use crate::prompting::PromptBuilder;
use crate::summary_quality::SummaryRecord;

pub const SFT_FORMAT: &str = "relgen-sft/1";

#[derive(Debug, Error)]
pub enum SftError {
    #[error("record {0} references unknown passage")]
    UnknownPassage(String),
    #[error("record {0} references an entity missing from its passage")]
    UnknownEntity(String),
    #[error("record {0} is in neither the train nor the test split")]
    Unsplit(String),
    #[error("record {key}: label {label:?} is not a canonical catalog label")]
    NonCanonicalLabel { key: String, label: String },
    #[error("record {0}: summary is empty")]
    EmptyInput(String),
    #[error("summary and gold relation disagree on the entity pair ({0})")]
    Misaligned(String),
    #[error("I/O error on {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SftError + '_ {
    move |source| SftError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[value(rename_all = "snake_case")]
#[serde(rename_all = "snake_case")]
pub enum InputSource {
    /// Generated summary (the two-step pipeline's training input).
    #[default]
    Summary,
    /// Raw source passage.
    Passage,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftMeta {
    pub passage_id: String,
    pub entity1_id: String,
    pub entity2_id: String,
    pub split: Split,
    pub held_out: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftExample {
    pub system: String,
    pub instruction: String,
    pub input: String,
    pub output: String,
    pub meta: SftMeta,
}

impl SftExample {
    fn sort_key(&self) -> (&str, &str, &str) {
        (&self.meta.passage_id, &self.meta.entity1_id, &self.meta.entity2_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftManifest {
    pub format: String,
    pub input_source: InputSource,
    pub count: u64,
    pub per_split: BTreeMap<Split, u64>,
    pub label_histogram: BTreeMap<String, u64>,
    pub sha256: String,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    path.with_file_name(name)
}

/// Pair each summary with its gold relation and render training rows, sorted
/// by passage id then entity ids.
pub fn build_examples(
    records: &[(SummaryRecord, GoldRelation)],
    passages: &[PassageRecord],
    split: &CorpusSplit,
    catalog: &LabelCatalog,
    source: InputSource,
    builder: &PromptBuilder,
) -> Result<Vec<SftExample>, SftError> {
    let index: BTreeMap<&str, &PassageRecord> = passages.iter().map(|p| (p.passage_id.as_str(), p)).collect();
    let splits = split.split_index();
    let mut out = Vec::with_capacity(records.len());
    for (summary, gold) in records {
        let key = gold.key();
        if (summary.passage_id.as_str(), summary.entity1_id.as_str(), summary.entity2_id.as_str())
            != (gold.passage_id.as_str(), gold.entity1_id.as_str(), gold.entity2_id.as_str())
        {
            return Err(SftError::Misaligned(key.to_string()));
        }
        let passage = index
            .get(gold.passage_id.as_str())
            .ok_or_else(|| SftError::UnknownPassage(key.to_string()))?;
        let (Some(e1), Some(e2)) = (passage.entity(&gold.entity1_id), passage.entity(&gold.entity2_id)) else {
            return Err(SftError::UnknownEntity(key.to_string()));
        };
        if !catalog.contains(&gold.label) {
            return Err(SftError::NonCanonicalLabel {
                key: key.to_string(),
                label: gold.label.clone(),
            });
        }
        let split = *splits.get(&key).ok_or_else(|| SftError::Unsplit(key.to_string()))?;
        let input = match source {
            InputSource::Summary => summary.summary_text.trim(),
            InputSource::Passage => passage.text.as_str(),
        };
        if input.trim().is_empty() {
            return Err(SftError::EmptyInput(key.to_string()));
        }
        let (system, instruction) = builder.instruction_header(&e1.surface, &e2.surface);
        out.push(SftExample {
            system,
            instruction,
            input: input.to_string(),
            output: gold.label.clone(),
            meta: SftMeta {
                passage_id: gold.passage_id.clone(),
                entity1_id: gold.entity1_id.clone(),
                entity2_id: gold.entity2_id.clone(),
                split,
                held_out: split == Split::Test,
            },
        });
    }
    out.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    Ok(out)
}

/// JSONL body for already-built examples (LF endings, one object per line).
pub fn to_jsonl(examples: &[SftExample]) -> String {
    let mut out = String::new();
    for e in examples {
        out.push_str(&serde_json::to_string(e).expect("sft example serializes"));
        out.push('\n');
    }
    out
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn manifest_for(examples: &[SftExample], body: &str, source: InputSource) -> SftManifest {
    let mut per_split = BTreeMap::from([(Split::Train, 0), (Split::Test, 0)]);
    for e in examples {
        *per_split.entry(e.meta.split).or_insert(0) += 1;
    }
    let labels: Vec<GoldRelation> = examples
        .iter()
        .map(|e| GoldRelation {
            passage_id: e.meta.passage_id.clone(),
            entity1_id: e.meta.entity1_id.clone(),
            entity2_id: e.meta.entity2_id.clone(),
            label: e.output.clone(),
            provenance: Provenance::Annotated,
        })
        .collect();
    SftManifest {
        format: SFT_FORMAT.to_string(),
        input_source: source,
        count: examples.len() as u64,
        per_split,
        label_histogram: corpus_stats(&labels).counts,
        sha256: sha256_hex(body.as_bytes()),
    }
}

/// Write examples and their manifest sidecar. Examples are written in the
/// order given.
pub fn write_examples(examples: &[SftExample], path: &Path, source: InputSource) -> Result<SftManifest, SftError> {
    let body = to_jsonl(examples);
    let manifest = manifest_for(examples, &body, source);
    write_atomic(path, body.as_bytes())?;
    let mpath = manifest_path(path);
    let mut mtext = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    mtext.push('\n');
    write_atomic(&mpath, mtext.as_bytes())?;
    Ok(manifest)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), SftError> {
    let tmp = path.with_extension("tmp-write");
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn export_sft(
    records: &[(SummaryRecord, GoldRelation)],
    passages: &[PassageRecord],
    split: &CorpusSplit,
    catalog: &LabelCatalog,
    source: InputSource,
    path: &Path,
) -> Result<SftManifest, SftError> {
    let examples = build_examples(records, passages, split, catalog, source, &PromptBuilder::default())?;
    write_examples(&examples, path, source)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    /// 1-based line number; 0 for file-level problems.
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct SftValidation {
    pub lines: usize,
    pub violations: Vec<Violation>,
    pub checksum_ok: bool,
    /// Re-serializing the parsed rows reproduces the file byte-for-byte.
    pub round_trip_ok: bool,
    #[serde(skip)]
    pub examples: Vec<SftExample>,
}

impl SftValidation {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Re-read an exported file and check schema, label membership, ordering,
/// the manifest checksum and counts, and byte-level round trip.
pub fn validate_sft(path: &Path, catalog: &LabelCatalog) -> Result<SftValidation, SftError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let mut violations = Vec::new();
    let text = match String::from_utf8(bytes.clone()) {
        Ok(t) => t,
        Err(e) => {
            let line = bytes[..e.utf8_error().valid_up_to()].iter().filter(|&&b| b == b'\n').count() + 1;
            violations.push(Violation {
                line,
                message: "invalid UTF-8".into(),
            });
            String::from_utf8_lossy(&bytes).into_owned()
        }
    };
    if !text.is_empty() && !text.ends_with('\n') {
        violations.push(Violation {
            line: text.lines().count(),
            message: "missing trailing newline".into(),
        });
    }

    let builder = PromptBuilder::default();
    let system = builder.templates().instruction_system.clone();
    let mut examples: Vec<SftExample> = Vec::new();
    let mut lines = 0;
    for (i, line) in text.split('\n').enumerate() {
        if line.is_empty() && i == text.split('\n').count() - 1 {
            break;
        }
        lines += 1;
        let n = i + 1;
        if line.ends_with('\r') {
            violations.push(Violation {
                line: n,
                message: "CRLF line ending".into(),
            });
        }
        let ex: SftExample = match serde_json::from_str(line.trim_end_matches('\r')) {
            Ok(ex) => ex,
            Err(e) => {
                violations.push(Violation {
                    line: n,
                    message: format!("schema: {e}"),
                });
                continue;
            }
        };
        if !catalog.contains(&ex.output) {
            violations.push(Violation {
                line: n,
                message: format!("output {:?} is not a catalog label", ex.output),
            });
        }
        if ex.system != system {
            violations.push(Violation {
                line: n,
                message: "system text differs from the instruction prompt family".into(),
            });
        }
        if ex.instruction.trim().is_empty() || ex.input.trim().is_empty() {
            violations.push(Violation {
                line: n,
                message: "empty instruction or input".into(),
            });
        }
        if ex.meta.held_out != (ex.meta.split == Split::Test) {
            violations.push(Violation {
                line: n,
                message: "held_out flag disagrees with split".into(),
            });
        }
        if let Some(prev) = examples.last() {
            if prev.sort_key() >= ex.sort_key() {
                violations.push(Violation {
                    line: n,
                    message: "rows out of order or duplicated".into(),
                });
            }
        }
        examples.push(ex);
    }

    let mpath = manifest_path(path);
    let mut checksum_ok = false;
    match fs::read_to_string(&mpath)
        .ok()
        .and_then(|m| serde_json::from_str::<SftManifest>(&m).ok())
    {
        None => violations.push(Violation {
            line: 0,
            message: format!("manifest {} missing or unreadable", mpath.display()),
        }),
        Some(m) => {
            checksum_ok = m.sha256 == sha256_hex(&bytes);
            if !checksum_ok {
                violations.push(Violation {
                    line: 0,
                    message: "checksum does not match manifest".into(),
                });
            }
            let recomputed = manifest_for(&examples, &text, m.input_source);
            if m.count != lines as u64 || m.per_split != recomputed.per_split || m.label_histogram != recomputed.label_histogram
            {
                violations.push(Violation {
                    line: 0,
                    message: "manifest counts do not match file contents".into(),
                });
            }
        }
    }

    let round_trip_ok = to_jsonl(&examples).as_bytes() == bytes.as_slice();
    Ok(SftValidation {
        lines,
        violations,
        checksum_ok,
        round_trip_ok,
        examples,
    })
}
