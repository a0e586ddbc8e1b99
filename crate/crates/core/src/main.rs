use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use relgen::backend::BackendError;
use relgen::config::{Config, Overrides};
use relgen::labelset::LabelCatalog;
use relgen::normalization::{Normalizer, ResolveOptions, SynonymTable};
use relgen::pipeline::{
    dump_prompts, evaluate, exit, export_training_set, read_results, render_report, run_pipeline, score_summaries,
    triage_candidates, Model, Pipeline, RunError, RunOptions, RunSpec, SplitSelection,
};
use relgen::prompting::{PromptBuilder, PromptTemplates};
use relgen::sft_export::{validate_sft, InputSource};
use relgen::store::{ingest, CorpusStore, IngestOptions};
use relgen::summary_quality::{scatter_csv, similarity_csv};
use relgen::triage::{distribution_report, now_unix, review, sample_errors, TriageSession};

const PRECEDENCE: &str = "\
Configuration precedence (highest first):
  1. command-line flags (--endpoint, --model, --seed, --script)
  2. environment: RELGEN_ENDPOINT, RELGEN_MODEL, RELGEN_SEED
  3. the TOML file given with --config
  4. built-in defaults
The API secret is only ever read from the environment variable named by
`backend.auth_env` in the config file.

Exit codes: 0 success, 2 configuration, 3 data, 4 backend, 5 internal.";

/// Generative relation extraction: ingest, run, evaluate, export, triage.
#[derive(Debug, Parser)]
#[command(name = "relgen", version, after_long_help = PRECEDENCE)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// TOML configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Generation endpoint URL (overrides RELGEN_ENDPOINT and the file).
    #[arg(long, global = true)]
    endpoint: Option<String>,
    /// Model name sent to the endpoint (overrides RELGEN_MODEL and the file).
    #[arg(long, global = true)]
    model: Option<String>,
    /// Seed for None pairs, splits, demonstrations and triage sampling
    /// (overrides RELGEN_SEED and the file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Use the offline scripted backend with this JSONL script.
    #[arg(long, global = true, value_name = "FILE")]
    script: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate a corpus file and write a corpus store.
    Ingest {
        input: PathBuf,
        /// Store directory to create (must not exist).
        #[arg(long)]
        out: PathBuf,
        /// Print statistics as JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Run a pipeline over a store; rerunning resumes an interrupted run.
    Run {
        #[command(flatten)]
        target: Target,
        /// Results file (JSONL).
        #[arg(long)]
        out: PathBuf,
        /// Stop after this many instances in total.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Print the first-stage prompts of a run with their fingerprints.
    Prompts {
        #[command(flatten)]
        target: Target,
        /// Only this instance.
        #[arg(long)]
        index: Option<usize>,
        /// One JSON object per line.
        #[arg(long)]
        json: bool,
    },
    /// Weighted metrics, confusion, bias and out-of-catalog output for a run.
    Evaluate {
        results: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Cosine and BERTScore for every summary, plus correlations.
    ScoreSummaries {
        results: PathBuf,
        #[arg(long)]
        store: PathBuf,
        /// Per-summary similarity table.
        #[arg(long)]
        csv: PathBuf,
        /// Two-column cosine vs BERTScore-F1 table for plotting.
        #[arg(long)]
        scatter: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Write an instruction-tuning dataset.
    ExportSft {
        #[arg(long)]
        store: PathBuf,
        /// Run results providing summaries (needed for --input-source summary).
        #[arg(long)]
        results: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = InputSource::Summary)]
        input_source: InputSource,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check an exported dataset against its manifest and the label set.
    ValidateSft { path: PathBuf },
    /// Error-analysis sessions.
    #[command(subcommand)]
    Triage(TriageCommand),
    /// Combined document over one or more evaluated runs.
    Report {
        #[arg(required = true)]
        results: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct Target {
    #[arg(long, value_enum)]
    pipeline: Pipeline,
    #[arg(long)]
    store: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitSelection::Test)]
    split: SplitSelection,
}

#[derive(Debug, Subcommand)]
enum TriageCommand {
    /// Sample misclassified instances into a new session file.
    Start {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        session: PathBuf,
        #[arg(long, default_value_t = 30)]
        sample: usize,
    },
    /// Review undecided items interactively (answers on stdin).
    Review {
        #[arg(long)]
        session: PathBuf,
        #[arg(long)]
        annotator: String,
    },
    /// Error-class distribution of a session.
    Report {
        #[arg(long)]
        session: PathBuf,
        /// Only this annotator's decisions.
        #[arg(long)]
        annotator: Option<String>,
        #[arg(long)]
        json: bool,
    },
}

struct Env {
    cfg: Config,
    catalog: LabelCatalog,
}

impl Env {
    fn load(g: &Global) -> Result<Self, RunError> {
        let flags = Overrides {
            endpoint: g.endpoint.clone(),
            model: g.model.clone(),
            seed: g.seed,
            script: g.script.clone(),
        };
        let cfg = Config::resolve(g.config.as_deref(), &|k| std::env::var(k).ok(), &flags)?;
        let catalog = match &cfg.catalog {
            Some(p) => LabelCatalog::from_path(&cfg.resolve_path(p))?,
            None => LabelCatalog::microbiorel(),
        };
        Ok(Env { cfg, catalog })
    }

    fn builder(&self) -> Result<PromptBuilder, RunError> {
        let templates = match &self.cfg.templates {
            Some(dir) => PromptTemplates::from_dir(&self.cfg.resolve_path(dir))?,
            None => PromptTemplates::default(),
        };
        Ok(PromptBuilder::new(templates))
    }

    fn normalizer(&self) -> Result<Normalizer, RunError> {
        let n = &self.cfg.normalization;
        let synonyms = match &n.synonyms {
            Some(p) => SynonymTable::seed_with_file(&self.cfg.resolve_path(p), &self.catalog)?,
            None => SynonymTable::seed(),
        };
        let options = ResolveOptions {
            tau: n.tau,
            case_sensitive: n.case_sensitive,
        };
        Ok(Normalizer::new(self.catalog.clone(), synonyms, options))
    }

    fn store(&self, dir: &Path) -> Result<CorpusStore, RunError> {
        Ok(CorpusStore::open(dir, &self.catalog)?)
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), RunError> {
    fs::write(path, text).map_err(|source| RunError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String, RunError> {
    serde_json::to_string_pretty(v).map_err(|e| RunError::Internal(e.to_string()))
}

fn execute(cli: Cli) -> Result<(), RunError> {
    let env = Env::load(&cli.global)?;
    let cfg = &env.cfg;
    match cli.command {
        Command::Ingest { input, out, json } => {
            let options = IngestOptions {
                seed: cfg.seed,
                none_policy: cfg.none_policy,
                test_ratio: cfg.test_ratio,
            };
            let (_, stats) = ingest(&input, &out, &env.catalog, options)?;
            if json {
                println!("{}", to_json(&stats)?);
            } else {
                print!("{}", stats.to_text());
            }
        }
        Command::Run { target, out, limit } => {
            let store = env.store(&target.store)?;
            let builder = env.builder()?;
            let normalizer = env.normalizer()?;
            let classifier = cfg.backend.generator(&cfg.base_dir)?;
            let summarizer = match target.pipeline {
                Pipeline::Direct => None,
                Pipeline::SummarizeThenClassify => Some(cfg.summarizer_backend().generator(&cfg.base_dir)?),
            };
            let spec = RunSpec {
                pipeline: target.pipeline,
                store: &store,
                catalog: &env.catalog,
                builder: &builder,
                normalizer: &normalizer,
                classifier: Model {
                    generator: classifier.as_ref(),
                    name: cfg.backend.model.clone(),
                    decoding: cfg.decoding,
                },
                summarizer: summarizer.as_deref().map(|g| Model {
                    generator: g,
                    name: cfg.summarizer_backend().model,
                    decoding: cfg.summarizer_decoding(),
                }),
                seed: cfg.seed,
                split: target.split,
                demonstrations: cfg.demonstrations,
                max_in_flight: cfg.backend.max_in_flight,
            };
            let outcome = run_pipeline(&spec, &out, RunOptions { limit })?;
            eprintln!(
                "run {}: {} of {} instances done ({} resumed, {} failed this session)",
                outcome.run_id,
                outcome.resumed_from + outcome.processed,
                outcome.total,
                outcome.resumed_from,
                outcome.failed
            );
            if outcome.processed > 0 && outcome.failed == outcome.processed {
                return Err(RunError::Backend(BackendError::Config(format!(
                    "every request failed; see the error field in {}",
                    out.display()
                ))));
            }
        }
        Command::Prompts { target, index, json } => {
            let store = env.store(&target.store)?;
            let builder = env.builder()?;
            let normalizer = env.normalizer()?;
            let none = relgen::backend::ScriptedGenerator::new();
            let spec = RunSpec {
                pipeline: target.pipeline,
                store: &store,
                catalog: &env.catalog,
                builder: &builder,
                normalizer: &normalizer,
                classifier: Model {
                    generator: &none,
                    name: cfg.backend.model.clone(),
                    decoding: cfg.decoding,
                },
                summarizer: None,
                seed: cfg.seed,
                split: target.split,
                demonstrations: cfg.demonstrations,
                max_in_flight: 1,
            };
            let mut stdout = io::stdout().lock();
            for d in dump_prompts(&spec)?.into_iter().filter(|d| index.is_none_or(|i| i == d.index)) {
                let text = if json {
                    serde_json::to_string(&d).map_err(|e| RunError::Internal(e.to_string()))? + "\n"
                } else {
                    format!(
                        "=== #{} {} sha256:{}\n--- system\n{}\n--- user\n{}\n\n",
                        d.index,
                        d.key,
                        d.prompt_sha256,
                        d.prompt.system.as_deref().unwrap_or("(none)"),
                        d.prompt.user
                    )
                };
                let _ = stdout.write_all(text.as_bytes());
            }
        }
        Command::Evaluate { results, json } => {
            let report = evaluate(&read_results(&results)?, &env.catalog)?;
            if json {
                println!("{}", to_json(&report)?);
            } else {
                print!("{}", report.to_text());
            }
        }
        Command::ScoreSummaries {
            results,
            store,
            csv,
            scatter,
            json,
        } => {
            let store = env.store(&store)?;
            let embedder = cfg.embedding.embedder()?;
            let report = score_summaries(&read_results(&results)?, &store, embedder.as_ref())?;
            let table = similarity_csv(&report.rows).map_err(|e| RunError::Internal(e.to_string()))?;
            write_file(&csv, &table)?;
            if let Some(p) = scatter {
                write_file(&p, &scatter_csv(&report.rows))?;
            }
            if json {
                println!("{}", to_json(&report)?);
            } else {
                println!("{} summaries scored ({} without summary), embedder {}", report.scored, report.skipped, report.embedder);
                for c in &report.correlations {
                    match (c.pearson_r, &c.error) {
                        (Some(r), _) => println!("  pearson({}, {}) = {r:.4}  (n={})", c.x, c.y, c.n),
                        (None, Some(e)) => println!("  pearson({}, {}) undefined: {e}", c.x, c.y),
                        (None, None) => println!("  pearson({}, {}) undefined", c.x, c.y),
                    }
                }
            }
        }
        Command::ExportSft {
            store,
            results,
            input_source,
            out,
        } => {
            let store = env.store(&store)?;
            let results = results.as_deref().map(read_results).transpose()?;
            let m = export_training_set(&store, results.as_ref(), input_source, &env.catalog, &env.builder()?, &out)?;
            println!("{}", to_json(&m)?);
        }
        Command::ValidateSft { path } => {
            let v = validate_sft(&path, &env.catalog)?;
            for violation in &v.violations {
                println!("line {}: {}", violation.line, violation.message);
            }
            println!(
                "{} lines, checksum {}, round trip {}",
                v.lines,
                if v.checksum_ok { "ok" } else { "MISMATCH" },
                if v.round_trip_ok { "ok" } else { "FAILED" }
            );
            if !v.is_clean() {
                return Err(RunError::Data(format!("{} is not a valid dataset", path.display())));
            }
        }
        Command::Triage(t) => triage(&env, t)?,
        Command::Report { results, out } => {
            let reports = results
                .iter()
                .map(|p| evaluate(&read_results(p)?, &env.catalog))
                .collect::<Result<Vec<_>, _>>()?;
            let doc = render_report(&reports);
            match out {
                Some(p) => write_file(&p, &doc)?,
                None => print!("{doc}"),
            }
        }
    }
    Ok(())
}

fn triage(env: &Env, cmd: TriageCommand) -> Result<(), RunError> {
    match cmd {
        TriageCommand::Start {
            results,
            store,
            session,
            sample,
        } => {
            let store = env.store(&store)?;
            let run = read_results(&results)?;
            let candidates = triage_candidates(&run, &store)?;
            let items = sample_errors(&candidates, sample, env.cfg.seed)?;
            let s = TriageSession::create(&session, items, env.cfg.seed, &run.manifest.run_id)?;
            println!("session {} holds {} items", session.display(), s.items.len());
        }
        TriageCommand::Review { session, annotator } => {
            let mut s = TriageSession::open(&session)?;
            let summary = review(&mut s, &annotator, io::stdin().lock(), io::stdout().lock(), &now_unix)?;
            println!(
                "\n{} decided, {} skipped{}",
                summary.decided,
                summary.skipped,
                if summary.quit { "; resume with the same command" } else { "" }
            );
        }
        TriageCommand::Report {
            session,
            annotator,
            json,
        } => {
            let s = TriageSession::open(&session)?;
            let r = distribution_report(&s, annotator.as_deref());
            if json {
                println!("{}", to_json(&r)?);
            } else {
                print!("{}", r.to_table());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::from(exit::OK as u8),
        Err(e) => {
            let code = e.exit_code();
            eprintln!("error: {:#}", anyhow::Error::new(e));
            ExitCode::from(code as u8)
        }
    }
}
