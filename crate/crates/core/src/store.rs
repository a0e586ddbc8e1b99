//! On-disk corpus store produced by `ingest`.
//!
//! ```text
//! <store>/corpus.jsonl     validated passages + annotated relations
//! <store>/relations.jsonl  annotated + generated None relations, each with its split
//! <store>/stats.json       label histogram and reference check
//! <store>/store.json       manifest: checksums, seed, None policy
//! ```
//!
//! A store is written once. Opening it re-verifies both checksums.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{
    apply_declared_split, corpus_stats, generate_none_pairs, parse_corpus, passage_seed, reference_check,
    stratified_split, CorpusError, CorpusSplit, GoldRelation, LabelHistogram, NonePolicy, PassageRecord, Provenance,
    ReferenceCheck, Split, SurfaceCheck,
};
use crate::labelset::{LabelCatalog, MICROBIOREL_LABELS};

pub const STORE_FORMAT: &str = "relgen-store/1";
const CORPUS_FILE: &str = "corpus.jsonl";
const RELATIONS_FILE: &str = "relations.jsonl";
const STATS_FILE: &str = "stats.json";
const MANIFEST_FILE: &str = "store.json";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("{0} already holds a corpus store; stores are write-once")]
    Exists(String),
    #[error("{0} is not a corpus store (no {MANIFEST_FILE})")]
    NotAStore(String),
    #[error("{file} does not match the checksum in {MANIFEST_FILE}")]
    Checksum { file: String },
    #[error("{file} line {line}: {message}")]
    Format { file: String, line: usize, message: String },
    #[error("I/O error on {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredRelation {
    #[serde(flatten)]
    pub relation: GoldRelation,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitSource {
    Declared,
    Stratified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub format: String,
    pub source_sha256: String,
    pub corpus_sha256: String,
    pub relations_sha256: String,
    pub seed: u64,
    pub none_policy: NonePolicy,
    pub test_ratio: f64,
    pub split_source: SplitSource,
    pub labels: Vec<String>,
}

impl StoreManifest {
    /// Identifier of the store contents, recorded in run manifests.
    pub fn content_id(&self) -> String {
        sha256_hex(format!("{}\n{}", self.corpus_sha256, self.relations_sha256).as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: u64,
    pub test: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub passages: u64,
    /// Annotated relations only.
    pub annotated: LabelHistogram,
    pub generated_none: u64,
    pub split: SplitCounts,
    /// Present when the catalog is the MicrobioRel label set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<ReferenceCheck>,
}

impl CorpusStats {
    pub fn to_text(&self) -> String {
        let mut out = self.annotated.to_table();
        if let Some(r) = &self.reference {
            out.push_str(&format!(
                "Reference counts: {}\n",
                if r.matches_table {
                    "all labels match the published table".to_string()
                } else {
                    format!("mismatch for {}", r.mismatched_labels.join(", "))
                }
            ));
            out.push_str(&format!("Discrepancy: {}\n", r.note));
        }
        out.push_str(&format!(
            "Passages: {}  Generated None pairs: {}  Train: {}  Test: {}\n",
            self.passages, self.generated_none, self.split.train, self.split.test
        ));
        out
    }
}

pub fn compute_stats(passages: &[PassageRecord], relations: &[StoredRelation], catalog: &LabelCatalog) -> CorpusStats {
    let annotated: Vec<GoldRelation> = relations
        .iter()
        .filter(|r| r.relation.provenance == Provenance::Annotated)
        .map(|r| r.relation.clone())
        .collect();
    let hist = corpus_stats(&annotated);
    let is_microbiorel = catalog.names().eq(MICROBIOREL_LABELS.iter().copied());
    CorpusStats {
        passages: passages.len() as u64,
        reference: is_microbiorel.then(|| reference_check(&hist)),
        annotated: hist,
        generated_none: (relations.len() - annotated.len()) as u64,
        split: SplitCounts {
            train: relations.iter().filter(|r| r.split == Split::Train).count() as u64,
            test: relations.iter().filter(|r| r.split == Split::Test).count() as u64,
        },
    }
}

/// Parameters that shape a store.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IngestOptions {
    pub seed: u64,
    pub none_policy: NonePolicy,
    pub test_ratio: f64,
}

#[derive(Debug, Clone)]
pub struct CorpusStore {
    pub dir: PathBuf,
    pub manifest: StoreManifest,
    pub passages: Vec<PassageRecord>,
    pub relations: Vec<StoredRelation>,
}

/// Validate a corpus file and materialize a store in `out_dir`.
pub fn ingest(
    input: &Path,
    out_dir: &Path,
    catalog: &LabelCatalog,
    options: IngestOptions,
) -> Result<(CorpusStore, CorpusStats), StoreError> {
    let source = fs::read(input).map_err(io_err(input))?;
    let text = String::from_utf8(source.clone()).map_err(|e| StoreError::Format {
        file: input.display().to_string(),
        line: 0,
        message: format!("not UTF-8: {e}"),
    })?;
    let corpus = parse_corpus(&text, catalog, SurfaceCheck::Lenient)?;

    let none = catalog.none_label().canonical_name.clone();
    let mut all = Vec::new();
    for p in &corpus.passages {
        let gold: Vec<GoldRelation> = corpus
            .relations
            .iter()
            .filter(|r| r.passage_id == p.passage_id)
            .cloned()
            .collect();
        let nones = generate_none_pairs(p, &gold, &options.none_policy, passage_seed(options.seed, &p.passage_id), &none);
        all.extend(gold);
        all.extend(nones);
    }
    let (split, split_source) = match &corpus.declared_split {
        Some(declared) => (apply_declared_split(&all, declared), SplitSource::Declared),
        None => (stratified_split(&all, options.test_ratio, options.seed), SplitSource::Stratified),
    };
    let index = split.split_index();
    let relations: Vec<StoredRelation> = all
        .into_iter()
        .map(|r| StoredRelation {
            split: index[&r.key()],
            relation: r,
        })
        .collect();

    let corpus_text = corpus.to_jsonl();
    let relations_text = relations_jsonl(&relations);
    let manifest = StoreManifest {
        format: STORE_FORMAT.into(),
        source_sha256: sha256_hex(&source),
        corpus_sha256: sha256_hex(corpus_text.as_bytes()),
        relations_sha256: sha256_hex(relations_text.as_bytes()),
        seed: options.seed,
        none_policy: options.none_policy,
        test_ratio: options.test_ratio,
        split_source,
        labels: catalog.names().map(str::to_string).collect(),
    };
    let stats = compute_stats(&corpus.passages, &relations, catalog);

    if out_dir.join(MANIFEST_FILE).exists() {
        return Err(StoreError::Exists(out_dir.display().to_string()));
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    write(&out_dir.join(CORPUS_FILE), &corpus_text)?;
    write(&out_dir.join(RELATIONS_FILE), &relations_text)?;
    write(&out_dir.join(STATS_FILE), &pretty(&stats))?;
    // manifest last: its presence marks a complete store
    write(&out_dir.join(MANIFEST_FILE), &pretty(&manifest))?;

    Ok((
        CorpusStore {
            dir: out_dir.to_path_buf(),
            manifest,
            passages: corpus.passages,
            relations,
        },
        stats,
    ))
}

fn pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

fn write(path: &Path, text: &str) -> Result<(), StoreError> {
    fs::write(path, text).map_err(io_err(path))
}

fn relations_jsonl(relations: &[StoredRelation]) -> String {
    let mut out = String::new();
    for r in relations {
        out.push_str(&serde_json::to_string(r).expect("relation serializes"));
        out.push('\n');
    }
    out
}

impl CorpusStore {
    pub fn open(dir: &Path, catalog: &LabelCatalog) -> Result<Self, StoreError> {
        let mpath = dir.join(MANIFEST_FILE);
        if !mpath.exists() {
            return Err(StoreError::NotAStore(dir.display().to_string()));
        }
        let mtext = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
        let manifest: StoreManifest = serde_json::from_str(&mtext).map_err(|e| StoreError::Format {
            file: mpath.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })?;

        let cpath = dir.join(CORPUS_FILE);
        let corpus_text = fs::read_to_string(&cpath).map_err(io_err(&cpath))?;
        if sha256_hex(corpus_text.as_bytes()) != manifest.corpus_sha256 {
            return Err(StoreError::Checksum {
                file: CORPUS_FILE.into(),
            });
        }
        let rpath = dir.join(RELATIONS_FILE);
        let relations_text = fs::read_to_string(&rpath).map_err(io_err(&rpath))?;
        if sha256_hex(relations_text.as_bytes()) != manifest.relations_sha256 {
            return Err(StoreError::Checksum {
                file: RELATIONS_FILE.into(),
            });
        }
        let corpus = parse_corpus(&corpus_text, catalog, SurfaceCheck::Lenient)?;
        let relations = relations_text
            .lines()
            .enumerate()
            .map(|(i, line)| {
                serde_json::from_str(line).map_err(|e| StoreError::Format {
                    file: RELATIONS_FILE.into(),
                    line: i + 1,
                    message: e.to_string(),
                })
            })
            .collect::<Result<Vec<StoredRelation>, _>>()?;
        Ok(CorpusStore {
            dir: dir.to_path_buf(),
            manifest,
            passages: corpus.passages,
            relations,
        })
    }

    pub fn passage(&self, id: &str) -> Option<&PassageRecord> {
        self.passages.iter().find(|p| p.passage_id == id)
    }

    pub fn split(&self) -> CorpusSplit {
        let mut s = CorpusSplit::default();
        for r in &self.relations {
            match r.split {
                Split::Train => s.train.push(r.relation.clone()),
                Split::Test => s.test.push(r.relation.clone()),
            }
        }
        s
    }
}
