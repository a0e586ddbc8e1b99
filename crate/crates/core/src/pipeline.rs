//! Run orchestration and the commands built on run results.
//!
//! A results file is JSONL: the first line is `{"manifest": {...}}`, every
//! following line is one [`ResultRecord`] in instance order. Records are
//! appended and fsynced chunk by chunk, so an interrupted run resumes where
//! it stopped and the finished file is byte-identical to an uninterrupted
//! one. Wall-clock timing is kept out of the results file (it would break
//! that identity) and goes to a `<results>.timing.json` sidecar instead.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{batch_generate, BackendError, Decoding, FinishReason, GenerationRequest, TextEmbedder, TextGenerator};
use crate::config::ConfigError;
use crate::corpus::{CorpusError, EntityMention, GoldRelation, PassageRecord, Provenance, Split};
use crate::labelset::{LabelCatalog, LabelError};
use crate::metrics::{
    bias_diagnostics, build_confusion, hallucination_breakdown, per_class_metrics, results_table, weighted_report,
    weighted_report_excluding, BiasReport, ConfusionMatrix, HallucinationBreakdown, MetricsError, ResultsRow,
    WeightedReport,
};
use crate::normalization::{NormalizedPrediction, Normalizer, SynonymError};
use crate::prompting::{select_demonstrations, Demonstration, PromptBuilder, PromptError, RenderedPrompt, TEMPLATE_VERSION};
use crate::sft_export::{build_examples, write_examples, InputSource, SftError, SftManifest};
use crate::store::{CorpusStore, StoreError, StoredRelation};
use crate::summary_quality::{correlation_suite, score_summary, CorrelationReport, QualityError, SimilarityScores, SummaryRecord};
use crate::triage::{TriageError, TriageItem};

pub const RESULTS_FORMAT: &str = "relgen-results/1";

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 2;
    pub const DATA: i32 = 3;
    pub const BACKEND: i32 = 4;
    pub const INTERNAL: i32 = 5;
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Labels(#[from] LabelError),
    #[error(transparent)]
    Synonyms(#[from] SynonymError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Quality(#[from] QualityError),
    #[error(transparent)]
    Sft(#[from] SftError),
    #[error(transparent)]
    Triage(#[from] TriageError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("{0}")]
    Data(String),
    #[error("I/O error on {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("internal error: {0}")]
    Internal(String),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Labels(_) | RunError::Synonyms(_) => exit::CONFIG,
            RunError::Prompt(PromptError::MissingPlaceholder { .. } | PromptError::Io { .. }) => exit::CONFIG,
            RunError::Prompt(PromptError::IncompleteCatalog { .. }) => exit::CONFIG,
            RunError::Backend(_) => exit::BACKEND,
            RunError::Internal(_) => exit::INTERNAL,
            _ => exit::DATA,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[value(rename_all = "snake_case")]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    /// Zero-shot prompt with the full class list.
    Direct,
    /// Entity-pair summary, then instruction-tuned classification.
    SummarizeThenClassify,
}

impl Pipeline {
    pub fn approach(self) -> &'static str {
        match self {
            Pipeline::Direct => "Direct (zero-shot)",
            Pipeline::SummarizeThenClassify => "Summarization-based",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[value(rename_all = "snake_case")]
#[serde(rename_all = "snake_case")]
pub enum SplitSelection {
    #[default]
    Test,
    Train,
    All,
}

impl SplitSelection {
    fn admits(self, split: Split) -> bool {
        match self {
            SplitSelection::All => true,
            SplitSelection::Test => split == Split::Test,
            SplitSelection::Train => split == Split::Train,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendIdentity {
    pub fingerprint: String,
    pub model: String,
    pub decoding: Decoding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    /// Hash of every other manifest field.
    pub run_id: String,
    pub pipeline: Pipeline,
    pub classifier: BackendIdentity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summarizer: Option<BackendIdentity>,
    pub corpus_checksum: String,
    pub seed: u64,
    pub split: SplitSelection,
    pub instances: usize,
    pub template_version: String,
    pub template_fingerprint: String,
    pub labels: Vec<String>,
    pub tau: f64,
    pub case_sensitive: bool,
    pub synonyms_fingerprint: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub demonstrations: Vec<Demonstration>,
}

impl RunManifest {
    fn seal(mut self) -> Self {
        self.run_id.clear();
        let text = serde_json::to_string(&self).expect("manifest serializes");
        self.run_id = hex::encode(&Sha256::digest(text.as_bytes())[..8]);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub index: usize,
    pub passage_id: String,
    pub entity1_id: String,
    pub entity2_id: String,
    pub gold_label: String,
    pub provenance: Provenance,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary_prompt_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary_text: Option<String>,
    /// Fingerprint of the classification prompt; absent when the summary step failed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_sha256: Option<String>,
    pub raw_output: String,
    pub finish_reason: FinishReason,
    pub prediction: NormalizedPrediction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ResultRecord {
    pub fn gold(&self) -> GoldRelation {
        GoldRelation {
            passage_id: self.passage_id.clone(),
            entity1_id: self.entity1_id.clone(),
            entity2_id: self.entity2_id.clone(),
            label: self.gold_label.clone(),
            provenance: self.provenance,
        }
    }

    pub fn item_id(&self) -> String {
        self.gold().key().to_string()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    manifest: RunManifest,
}

/// One generation backend with the model name and decoding it is called with.
pub struct Model<'a> {
    pub generator: &'a dyn TextGenerator,
    pub name: String,
    pub decoding: Decoding,
}

impl Model<'_> {
    fn identity(&self) -> BackendIdentity {
        BackendIdentity {
            fingerprint: self.generator.fingerprint(),
            model: self.name.clone(),
            decoding: self.decoding,
        }
    }

    fn request(&self, prompt: RenderedPrompt) -> GenerationRequest {
        GenerationRequest {
            prompt,
            decoding: self.decoding,
            model_name: self.name.clone(),
        }
    }
}

/// Everything a run needs besides the output path.
pub struct RunSpec<'a> {
    pub pipeline: Pipeline,
    pub store: &'a CorpusStore,
    pub catalog: &'a LabelCatalog,
    pub builder: &'a PromptBuilder,
    pub normalizer: &'a Normalizer,
    pub classifier: Model<'a>,
    /// Required for the summarization pipeline.
    pub summarizer: Option<Model<'a>>,
    pub seed: u64,
    pub split: SplitSelection,
    pub demonstrations: usize,
    pub max_in_flight: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Stop after this many instances in total (the rest can be resumed later).
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunOutcome {
    pub run_id: String,
    pub results: PathBuf,
    pub total: usize,
    pub resumed_from: usize,
    pub processed: usize,
    pub failed: usize,
}

impl RunOutcome {
    pub fn complete(&self) -> bool {
        self.resumed_from + self.processed == self.total
    }
}

struct Instance<'a> {
    index: usize,
    relation: &'a StoredRelation,
    passage: &'a PassageRecord,
    e1: &'a EntityMention,
    e2: &'a EntityMention,
}

fn instances<'a>(store: &'a CorpusStore, split: SplitSelection) -> Result<Vec<Instance<'a>>, RunError> {
    store
        .relations
        .iter()
        .filter(|r| split.admits(r.split))
        .enumerate()
        .map(|(index, relation)| {
            let key = relation.relation.key();
            let passage = store
                .passage(&relation.relation.passage_id)
                .ok_or_else(|| RunError::Data(format!("store relation {key} names a missing passage")))?;
            let entity = |id: &str| {
                passage
                    .entity(id)
                    .ok_or_else(|| RunError::Data(format!("store relation {key} names missing entity {id}")))
            };
            Ok(Instance {
                index,
                relation,
                passage,
                e1: entity(&relation.relation.entity1_id)?,
                e2: entity(&relation.relation.entity2_id)?,
            })
        })
        .collect()
}

fn demonstrations_for(spec: &RunSpec) -> Vec<Demonstration> {
    if spec.pipeline != Pipeline::SummarizeThenClassify || spec.demonstrations == 0 {
        return Vec::new();
    }
    let train: Vec<GoldRelation> = spec
        .store
        .relations
        .iter()
        .filter(|r| r.split == Split::Train)
        .map(|r| r.relation.clone())
        .collect();
    select_demonstrations(&train, &spec.store.passages, spec.catalog, spec.demonstrations, spec.seed)
}

pub fn build_manifest(spec: &RunSpec) -> Result<RunManifest, RunError> {
    if spec.pipeline == Pipeline::SummarizeThenClassify && spec.summarizer.is_none() {
        return Err(RunError::Internal("summarization pipeline without a summarizer".into()));
    }
    let n = instances(spec.store, spec.split)?.len();
    // the table is an ordered map, so its debug form is stable
    let synonyms = Sha256::digest(format!("{:?}", spec.normalizer.synonyms).as_bytes());
    Ok(RunManifest {
        format: RESULTS_FORMAT.into(),
        run_id: String::new(),
        pipeline: spec.pipeline,
        classifier: spec.classifier.identity(),
        summarizer: match spec.pipeline {
            Pipeline::Direct => None,
            Pipeline::SummarizeThenClassify => spec.summarizer.as_ref().map(Model::identity),
        },
        corpus_checksum: spec.store.manifest.content_id(),
        seed: spec.seed,
        split: spec.split,
        instances: n,
        template_version: TEMPLATE_VERSION.into(),
        template_fingerprint: spec.builder.templates().fingerprint(),
        labels: spec.catalog.names().map(str::to_string).collect(),
        tau: spec.normalizer.options.tau,
        case_sensitive: spec.normalizer.options.case_sensitive,
        synonyms_fingerprint: hex::encode(synonyms),
        demonstrations: demonstrations_for(spec),
    }
    .seal())
}

fn record_line(r: &ResultRecord) -> String {
    let mut s = serde_json::to_string(r).expect("record serializes");
    s.push('\n');
    s
}

fn header_line(m: &RunManifest) -> String {
    let mut s = serde_json::to_string(&Header { manifest: m.clone() }).expect("header serializes");
    s.push('\n');
    s
}

/// Open `path` for appending, validating any existing content against
/// `manifest`. Returns the number of records already present.
fn open_checkpoint(path: &Path, manifest: &RunManifest) -> Result<(File, usize), RunError> {
    if !path.exists() {
        let mut f = File::create(path).map_err(io_err(path))?;
        f.write_all(header_line(manifest).as_bytes()).map_err(io_err(path))?;
        f.sync_all().map_err(io_err(path))?;
        return Ok((f, 0));
    }
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let complete = text.rfind('\n').map(|i| i + 1).unwrap_or(0);
    let mut lines = text[..complete].lines();
    let header: Header = lines
        .next()
        .and_then(|l| serde_json::from_str(l).ok())
        .ok_or_else(|| RunError::Data(format!("{} exists but is not a results file", path.display())))?;
    if header.manifest != *manifest {
        return Err(RunError::Data(format!(
            "{} belongs to run {} but this configuration is run {}; results are write-once, pick another output path",
            path.display(),
            header.manifest.run_id,
            manifest.run_id
        )));
    }
    let mut done = 0;
    for (i, line) in lines.enumerate() {
        let rec: ResultRecord = serde_json::from_str(line)
            .map_err(|e| RunError::Data(format!("{} line {}: {e}", path.display(), i + 2)))?;
        if rec.index != i {
            return Err(RunError::Data(format!(
                "{} line {}: expected record {i}, found {}",
                path.display(),
                i + 2,
                rec.index
            )));
        }
        done += 1;
    }
    if complete < text.len() {
        // torn final record from an interrupted write
        let f = OpenOptions::new().write(true).open(path).map_err(io_err(path))?;
        f.set_len(complete as u64).map_err(io_err(path))?;
        f.sync_all().map_err(io_err(path))?;
    }
    let f = OpenOptions::new().append(true).open(path).map_err(io_err(path))?;
    Ok((f, done))
}

#[derive(Debug, Serialize)]
struct Timing {
    run_id: String,
    started_unix: u64,
    finished_unix: u64,
    resumed_from: usize,
    /// (instance index, milliseconds) for instances processed in this session.
    latency_ms: Vec<(usize, u64)>,
}

pub fn timing_path(results: &Path) -> PathBuf {
    let mut name = results.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".timing.json");
    results.with_file_name(name)
}

fn base_record(inst: &Instance) -> ResultRecord {
    let r = &inst.relation.relation;
    ResultRecord {
        index: inst.index,
        passage_id: r.passage_id.clone(),
        entity1_id: r.entity1_id.clone(),
        entity2_id: r.entity2_id.clone(),
        gold_label: r.label.clone(),
        provenance: r.provenance,
        split: inst.relation.split,
        summary_prompt_sha256: None,
        summary_text: None,
        prompt_sha256: None,
        raw_output: String::new(),
        finish_reason: FinishReason::Error,
        prediction: NormalizedPrediction::failed(),
        error: None,
    }
}

/// Execute (or resume) a run, writing results to `out`.
pub fn run_pipeline(spec: &RunSpec, out: &Path, options: RunOptions) -> Result<RunOutcome, RunError> {
    let manifest = build_manifest(spec)?;
    let all = instances(spec.store, spec.split)?;
    let (mut file, done) = open_checkpoint(out, &manifest)?;
    let stop = options.limit.map_or(all.len(), |l| l.min(all.len())).max(done);
    let started = crate::triage::now_unix();
    let chunk = (spec.max_in_flight.max(1) * 8).max(16);
    let mut latency = Vec::new();
    let mut failed = 0;

    for batch in all[done..stop].chunks(chunk) {
        let clock = Instant::now();
        let records = match spec.pipeline {
            Pipeline::Direct => run_direct(spec, batch)?,
            Pipeline::SummarizeThenClassify => run_summarize(spec, &manifest.demonstrations, batch)?,
        };
        let per = clock.elapsed().as_millis() as u64 / batch.len().max(1) as u64;
        let mut text = String::new();
        for r in &records {
            if r.error.is_some() {
                failed += 1;
            }
            latency.push((r.index, per));
            text.push_str(&record_line(r));
        }
        file.write_all(text.as_bytes()).map_err(io_err(out))?;
        file.sync_all().map_err(io_err(out))?;
    }

    let timing = Timing {
        run_id: manifest.run_id.clone(),
        started_unix: started,
        finished_unix: crate::triage::now_unix(),
        resumed_from: done,
        latency_ms: latency,
    };
    let tpath = timing_path(out);
    fs::write(&tpath, serde_json::to_string_pretty(&timing).expect("timing serializes")).map_err(io_err(&tpath))?;

    Ok(RunOutcome {
        run_id: manifest.run_id,
        results: out.to_path_buf(),
        total: all.len(),
        resumed_from: done,
        processed: stop - done,
        failed,
    })
}

fn classify(spec: &RunSpec, rec: &mut ResultRecord, text: &str, finish: FinishReason, error: Option<String>) {
    rec.finish_reason = finish;
    match error {
        Some(e) => {
            rec.error = Some(e);
            rec.prediction = NormalizedPrediction::failed();
        }
        None => {
            rec.raw_output = text.to_string();
            rec.prediction = spec.normalizer.normalize(text, finish == FinishReason::Length);
        }
    }
}

fn run_direct(spec: &RunSpec, batch: &[Instance]) -> Result<Vec<ResultRecord>, RunError> {
    let prompts = batch
        .iter()
        .map(|i| spec.builder.direct(i.passage, i.e1, i.e2, spec.catalog))
        .collect::<Result<Vec<_>, _>>()?;
    let requests: Vec<_> = prompts.iter().cloned().map(|p| spec.classifier.request(p)).collect();
    let outputs = batch_generate(spec.classifier.generator, &requests, spec.max_in_flight);
    Ok(batch
        .iter()
        .zip(prompts.iter().zip(outputs))
        .map(|(inst, (prompt, out))| {
            let mut rec = base_record(inst);
            rec.prompt_sha256 = Some(prompt.fingerprint());
            classify(spec, &mut rec, &out.text, out.finish_reason, out.error);
            rec
        })
        .collect())
}

fn run_summarize(spec: &RunSpec, demos: &[Demonstration], batch: &[Instance]) -> Result<Vec<ResultRecord>, RunError> {
    let summarizer = spec
        .summarizer
        .as_ref()
        .ok_or_else(|| RunError::Internal("summarization pipeline without a summarizer".into()))?;
    let prompts = batch
        .iter()
        .map(|i| spec.builder.summarization(i.passage, i.e1, i.e2, demos))
        .collect::<Result<Vec<_>, _>>()?;
    let requests: Vec<_> = prompts.iter().cloned().map(|p| summarizer.request(p)).collect();
    let summaries = batch_generate(summarizer.generator, &requests, spec.max_in_flight);

    let mut records: Vec<ResultRecord> = Vec::with_capacity(batch.len());
    let mut second: Vec<(usize, RenderedPrompt)> = Vec::new();
    for (k, ((inst, prompt), out)) in batch.iter().zip(&prompts).zip(summaries).enumerate() {
        let mut rec = base_record(inst);
        rec.summary_prompt_sha256 = Some(prompt.fingerprint());
        let summary = out.text.trim();
        if let Some(e) = out.error {
            rec.error = Some(format!("summary step: {e}"));
        } else if summary.is_empty() {
            rec.error = Some("summary step: empty summary".into());
            rec.summary_text = Some(String::new());
        } else {
            rec.summary_text = Some(summary.to_string());
            let p = spec.builder.instruction(summary, &inst.e1.surface, &inst.e2.surface)?;
            rec.prompt_sha256 = Some(p.fingerprint());
            second.push((k, p));
        }
        records.push(rec);
    }
    let requests: Vec<_> = second.iter().map(|(_, p)| spec.classifier.request(p.clone())).collect();
    let outputs = batch_generate(spec.classifier.generator, &requests, spec.max_in_flight);
    for ((k, _), out) in second.iter().zip(outputs) {
        classify(spec, &mut records[*k], &out.text, out.finish_reason, out.error);
    }
    Ok(records)
}

/// Parsed results file.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultsFile {
    pub manifest: RunManifest,
    pub records: Vec<ResultRecord>,
}

impl ResultsFile {
    pub fn is_complete(&self) -> bool {
        self.records.len() == self.manifest.instances
    }
}

pub fn read_results(path: &Path) -> Result<ResultsFile, RunError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines();
    let header: Header = lines
        .next()
        .ok_or_else(|| RunError::Data(format!("{} is empty", path.display())))
        .and_then(|l| {
            serde_json::from_str(l).map_err(|e| RunError::Data(format!("{} line 1: not a results header: {e}", path.display())))
        })?;
    let records = lines
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| RunError::Data(format!("{} line {}: {e}", path.display(), i + 2))))
        .collect::<Result<Vec<ResultRecord>, _>>()?;
    Ok(ResultsFile {
        manifest: header.manifest,
        records,
    })
}

fn require_complete(results: &ResultsFile) -> Result<(), RunError> {
    if results.is_complete() {
        Ok(())
    } else {
        Err(RunError::Data(format!(
            "run {} is incomplete ({} of {} instances); rerun the same command to resume",
            results.manifest.run_id,
            results.records.len(),
            results.manifest.instances
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub run_id: String,
    pub pipeline: Pipeline,
    pub model: String,
    pub instances: usize,
    pub failed_requests: usize,
    pub weighted: WeightedReport,
    /// Same averages with the None class left out of the weighting.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weighted_excluding_none: Option<WeightedReport>,
    pub confusion: ConfusionMatrix,
    pub bias: BiasReport,
    pub hallucinations: HallucinationBreakdown,
}

pub fn evaluate(results: &ResultsFile, catalog: &LabelCatalog) -> Result<EvaluationReport, RunError> {
    require_complete(results)?;
    let gold: Vec<GoldRelation> = results.records.iter().map(ResultRecord::gold).collect();
    let preds: Vec<NormalizedPrediction> = results.records.iter().map(|r| r.prediction.clone()).collect();
    let confusion = build_confusion(&gold, &preds, catalog)?;
    let per_class = per_class_metrics(&confusion);
    let weighted = weighted_report(&per_class)?;
    let none = catalog.none_label().canonical_name.as_str();
    let weighted_excluding_none = weighted_report_excluding(&per_class, Some(none)).ok();
    Ok(EvaluationReport {
        run_id: results.manifest.run_id.clone(),
        pipeline: results.manifest.pipeline,
        model: results.manifest.classifier.model.clone(),
        instances: results.records.len(),
        failed_requests: results.records.iter().filter(|r| r.error.is_some()).count(),
        weighted,
        weighted_excluding_none,
        confusion,
        bias: bias_diagnostics(&preds, catalog),
        hallucinations: hallucination_breakdown(&preds, 10),
    })
}

impl EvaluationReport {
    pub fn results_row(&self) -> ResultsRow {
        self.weighted.results_row(self.pipeline.approach(), &self.model)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "run {}  pipeline {:?}  model {}  instances {}  failed requests {}\n\n",
            self.run_id, self.pipeline, self.model, self.instances, self.failed_requests
        );
        out.push_str(&self.weighted.per_class_table());
        if let Some(w) = &self.weighted_excluding_none {
            out.push_str(&format!(
                "\nexcluding None: P {:.4}  R {:.4}  F1 {:.4}  (support {})\n",
                w.weighted_precision, w.weighted_recall, w.weighted_f1, w.total_support
            ));
        }
        out.push_str(&format!(
            "\nprediction spread: {} distinct labels",
            self.bias.distinct_labels_used
        ));
        if let Some((label, n)) = &self.bias.top_label {
            out.push_str(&format!(", most frequent {label} ({n})"));
        }
        out.push_str(&format!(", unresolved {:.1}%\n", self.bias.unresolved_rate * 100.0));
        let h = &self.hallucinations;
        out.push_str(&format!(
            "out-of-catalog output: near_miss {}  morph_variant {}  context_phrase {}  (resolved variants {})\n",
            h.near_miss, h.morph_variant, h.context_phrase, h.resolved_variants
        ));
        for (evidence, n) in &h.top_evidence {
            out.push_str(&format!("  {n:>4}  {evidence:?}\n"));
        }
        out
    }
}

/// Combined document over several runs: results table, then per-run detail.
pub fn render_report(reports: &[EvaluationReport]) -> String {
    let mut sorted: Vec<&EvaluationReport> = reports.iter().collect();
    sorted.sort_by_key(|r| (r.pipeline != Pipeline::Direct, r.model.clone(), r.run_id.clone()));
    let rows: Vec<ResultsRow> = sorted.iter().map(|r| r.results_row()).collect();
    let mut out = String::from("Weighted precision, recall and F1 (%)\n\n");
    out.push_str(&results_table(&rows));
    for r in sorted {
        out.push('\n');
        out.push_str(&r.to_text());
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryScoreReport {
    pub run_id: String,
    pub embedder: String,
    pub scored: usize,
    /// Instances without a usable summary.
    pub skipped: usize,
    pub correlations: Vec<CorrelationReport>,
    #[serde(skip)]
    pub rows: Vec<(SummaryRecord, SimilarityScores)>,
}

pub fn summary_records(results: &ResultsFile, store: &CorpusStore) -> Result<Vec<SummaryRecord>, RunError> {
    if results.manifest.corpus_checksum != store.manifest.content_id() {
        return Err(RunError::Data("results were produced from a different corpus store".into()));
    }
    results
        .records
        .iter()
        .filter(|r| r.summary_text.as_deref().is_some_and(|s| !s.trim().is_empty()))
        .map(|r| {
            let passage = store
                .passage(&r.passage_id)
                .ok_or_else(|| RunError::Data(format!("passage {} missing from store", r.passage_id)))?;
            Ok(SummaryRecord {
                passage_id: r.passage_id.clone(),
                entity1_id: r.entity1_id.clone(),
                entity2_id: r.entity2_id.clone(),
                summary_text: r.summary_text.clone().unwrap_or_default(),
                source_text: passage.text.clone(),
            })
        })
        .collect()
}

pub fn score_summaries(
    results: &ResultsFile,
    store: &CorpusStore,
    embedder: &dyn TextEmbedder,
) -> Result<SummaryScoreReport, RunError> {
    if results.manifest.pipeline != Pipeline::SummarizeThenClassify {
        return Err(RunError::Data(format!(
            "run {} has no summaries (pipeline {:?})",
            results.manifest.run_id, results.manifest.pipeline
        )));
    }
    let records = summary_records(results, store)?;
    let mut rows = Vec::with_capacity(records.len());
    for r in records {
        let s = score_summary(&r, embedder)?;
        rows.push((r, s));
    }
    let correlations = correlation_suite(&rows)?;
    Ok(SummaryScoreReport {
        run_id: results.manifest.run_id.clone(),
        embedder: embedder.fingerprint(),
        scored: rows.len(),
        skipped: results.records.len() - rows.len(),
        correlations,
        rows,
    })
}

/// Training rows from a store, optionally with generated summaries as input.
pub fn export_training_set(
    store: &CorpusStore,
    results: Option<&ResultsFile>,
    source: InputSource,
    catalog: &LabelCatalog,
    builder: &PromptBuilder,
    out: &Path,
) -> Result<SftManifest, RunError> {
    let pairs: Vec<(SummaryRecord, GoldRelation)> = match source {
        InputSource::Summary => {
            let results = results.ok_or_else(|| RunError::Data("summary input needs a results file".into()))?;
            let gold_by_key: std::collections::BTreeMap<_, _> =
                store.relations.iter().map(|r| (r.relation.key(), &r.relation)).collect();
            summary_records(results, store)?
                .into_iter()
                .map(|s| {
                    let key = crate::corpus::RelationKey {
                        passage_id: s.passage_id.clone(),
                        entity1_id: s.entity1_id.clone(),
                        entity2_id: s.entity2_id.clone(),
                    };
                    let gold = gold_by_key
                        .get(&key)
                        .ok_or_else(|| RunError::Data(format!("relation {key} is not in the store")))?;
                    Ok((s, (*gold).clone()))
                })
                .collect::<Result<_, RunError>>()?
        }
        InputSource::Passage => store
            .relations
            .iter()
            .map(|r| {
                let text = store.passage(&r.relation.passage_id).map(|p| p.text.clone()).unwrap_or_default();
                (
                    SummaryRecord {
                        passage_id: r.relation.passage_id.clone(),
                        entity1_id: r.relation.entity1_id.clone(),
                        entity2_id: r.relation.entity2_id.clone(),
                        summary_text: text.clone(),
                        source_text: text,
                    },
                    r.relation.clone(),
                )
            })
            .collect(),
    };
    let examples = build_examples(&pairs, &store.passages, &store.split(), catalog, source, builder)?;
    Ok(write_examples(&examples, out, source)?)
}

/// Every record of a run as a triage candidate (sampling keeps only errors).
pub fn triage_candidates(results: &ResultsFile, store: &CorpusStore) -> Result<Vec<TriageItem>, RunError> {
    if results.manifest.corpus_checksum != store.manifest.content_id() {
        return Err(RunError::Data("results were produced from a different corpus store".into()));
    }
    results
        .records
        .iter()
        .map(|r| {
            let passage = store
                .passage(&r.passage_id)
                .ok_or_else(|| RunError::Data(format!("passage {} missing from store", r.passage_id)))?;
            Ok(TriageItem {
                item_id: r.item_id(),
                gold: r.gold(),
                prediction: r.prediction.clone(),
                summary: r.summary_text.as_ref().map(|s| SummaryRecord {
                    passage_id: r.passage_id.clone(),
                    entity1_id: r.entity1_id.clone(),
                    entity2_id: r.entity2_id.clone(),
                    summary_text: s.clone(),
                    source_text: passage.text.clone(),
                }),
                source_text: passage.text.clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PromptDump {
    pub index: usize,
    pub key: String,
    pub prompt_sha256: String,
    #[serde(flatten)]
    pub prompt: RenderedPrompt,
}

/// First-stage prompts of a run, with the fingerprints a scripted backend is
/// keyed by. For the summarization pipeline these are the summary prompts.
pub fn dump_prompts(spec: &RunSpec) -> Result<Vec<PromptDump>, RunError> {
    let demos = demonstrations_for(spec);
    instances(spec.store, spec.split)?
        .iter()
        .map(|i| {
            let prompt = match spec.pipeline {
                Pipeline::Direct => spec.builder.direct(i.passage, i.e1, i.e2, spec.catalog)?,
                Pipeline::SummarizeThenClassify => spec.builder.summarization(i.passage, i.e1, i.e2, &demos)?,
            };
            Ok(PromptDump {
                index: i.index,
                key: i.relation.relation.key().to_string(),
                prompt_sha256: prompt.fingerprint(),
                prompt,
            })
        })
        .collect()
}
