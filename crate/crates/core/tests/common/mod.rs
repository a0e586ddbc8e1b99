//! Shared fixtures for the integration tests.
#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

pub const BIN: &str = env!("CARGO_BIN_EXE_relgen");

/// Run the CLI with `args` in `cwd`, with the RELGEN_* variables cleared.
pub fn relgen(cwd: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(cwd)
        .env_remove("RELGEN_ENDPOINT")
        .env_remove("RELGEN_MODEL")
        .env_remove("RELGEN_SEED")
        .output()
        .expect("spawn relgen")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Compare against `tests/golden/<name>`; `RELGEN_BLESS=1` rewrites it.
pub fn assert_golden(name: &str, actual: &str) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    if std::env::var_os("RELGEN_BLESS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let want = std::fs::read_to_string(&path).unwrap_or_else(|_| panic!("missing golden file {}", path.display()));
    assert_eq!(actual, want, "output differs from golden file {name}");
}

// ---------------------------------------------------------------------------
// None-pair oracle

/// Reference sampler: enumerate pairs i<j, drop annotated ones (either
/// direction), Fisher-Yates from the top with 32-bit bounded draws, keep a
/// prefix of length max(floor, ceil(ratio * tokens)), sort.
pub fn none_oracle(
    n: usize,
    tokens: usize,
    annotated: &[(usize, usize)],
    floor: usize,
    ratio: f64,
    seed: u64,
) -> Vec<(usize, usize)> {
    let mut cands = brute_force_candidates(n, annotated);
    let cap = floor.max((ratio * tokens as f64).ceil() as usize).min(cands.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..cands.len()).rev() {
        let j = rng.gen_range(0..(i + 1) as u32) as usize;
        cands.swap(i, j);
    }
    cands.truncate(cap);
    cands.sort();
    cands
}

pub fn brute_force_candidates(n: usize, annotated: &[(usize, usize)]) -> Vec<(usize, usize)> {
    let mut cands = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if !annotated.iter().any(|&(a, b)| (a, b) == (i, j) || (b, a) == (i, j)) {
                cands.push((i, j));
            }
        }
    }
    cands
}

/// A random passage for None-pair checks: `n` entities `x0..`, `filler`
/// extra words, annotated pairs in random direction.
#[derive(Debug, Clone)]
pub struct RandomPassage {
    pub id: String,
    pub n: usize,
    pub tokens: usize,
    pub annotated: Vec<(usize, usize)>,
    pub line: String,
}

pub fn random_passages(count: usize, seed: u64) -> Vec<RandomPassage> {
    let mut meta = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|k| {
            let n = meta.gen_range(2..=12);
            let filler = meta.gen_range(0..=200);
            let mut annotated = Vec::new();
            for i in 0..n {
                for j in i + 1..n {
                    if meta.gen_bool(0.2) {
                        annotated.push(if meta.gen_bool(0.5) { (i, j) } else { (j, i) });
                    }
                }
            }
            let id = format!("r{k:03}");
            let mut text = String::new();
            let mut entities = Vec::new();
            for i in 0..n {
                if i > 0 {
                    text.push(' ');
                }
                let surface = format!("x{i}");
                entities.push(json!({
                    "id": format!("E{i}"), "surface": surface, "category": "gene",
                    "start": text.len(), "end": text.len() + surface.len()
                }));
                text.push_str(&surface);
            }
            for _ in 0..filler {
                text.push_str(" w");
            }
            let relations: Vec<Value> = annotated
                .iter()
                .map(|&(a, b)| json!({"entity1_id": format!("E{a}"), "entity2_id": format!("E{b}"), "label": "Affects"}))
                .collect();
            let line = json!({
                "passage_id": id, "document_id": "rand", "text": text,
                "entities": entities, "relations": relations
            })
            .to_string();
            RandomPassage {
                id,
                n,
                tokens: n + filler,
                annotated,
                line,
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Pipeline fixture

const SUBJECTS: [&str; 13] = [
    "butyrate",
    "Akkermansia muciniphila",
    "propionate",
    "Bacteroides fragilis",
    "acetate",
    "Lactobacillus reuteri",
    "tryptophan",
    "Faecalibacterium prausnitzii",
    "bile acids",
    "Prevotella copri",
    "Bifidobacterium longum",
    "lipopolysaccharide",
    "Escherichia coli",
];
const OBJECTS: [&str; 13] = [
    "IL-10",
    "TNF",
    "colitis",
    "obesity",
    "insulin resistance",
    "mucin production",
    "IL-6",
    "serotonin",
    "depression",
    "barrier integrity",
    "type 2 diabetes",
    "IL-17",
    "anxiety",
];
const LABELS: [&str; 8] = [
    "Increase",
    "Decrease",
    "Affects",
    "Associated_with",
    "Causes",
    "Improve",
    "Worsen",
    "Interacts_with",
];

/// The standard fixture: 10 test passages and 3 train passages, so 50 test
/// instances under [`PIPELINE_CONFIG`].
pub fn pipeline_corpus() -> String {
    pipeline_corpus_sized(10, 3)
}

/// Passages with four entities each: the first `test` are test passages
/// with four annotated relations, the next `train` are train passages with
/// two. With a None policy of exactly one pair per passage the test split
/// holds `5 * test` instances.
pub fn pipeline_corpus_sized(test: usize, train: usize) -> String {
    let mut out = String::new();
    for p in 0..test + train {
        let s1 = SUBJECTS[p % 13];
        let s2 = SUBJECTS[(p + 5) % 13];
        let o1 = OBJECTS[p % 13];
        let o2 = OBJECTS[(p + 3) % 13];
        let text = format!(
            "In cohort {p}, levels of {s1} and {s2} were tracked together with {o1} and {o2} over twelve weeks."
        );
        let span = |s: &str| {
            let start = text.find(s).unwrap();
            (start, start + s.len())
        };
        let ents: Vec<Value> = [("E1", s1, "chemical"), ("E2", s2, "species"), ("E3", o1, "disease"), ("E4", o2, "gene")]
            .iter()
            .map(|(id, s, cat)| {
                let (a, b) = span(s);
                json!({"id": id, "surface": s, "category": cat, "start": a, "end": b})
            })
            .collect();
        let test = p < test;
        let split = if test { "test" } else { "train" };
        let pairs: &[(&str, &str)] = if test {
            &[("E1", "E3"), ("E1", "E4"), ("E2", "E3"), ("E2", "E4")]
        } else {
            &[("E1", "E3"), ("E2", "E4")]
        };
        let rels: Vec<Value> = pairs
            .iter()
            .enumerate()
            .map(|(k, (a, b))| json!({"entity1_id": a, "entity2_id": b, "label": LABELS[(p * 3 + k) % 8], "split": split}))
            .collect();
        out.push_str(
            &json!({"passage_id": format!("c{p:03}"), "document_id": format!("doc{}", p / 4), "text": text, "entities": ents, "relations": rels})
                .to_string(),
        );
        out.push('\n');
    }
    out
}

pub const PIPELINE_CONFIG: &str = "\
seed = 7
demonstrations = 3

[none_policy]
floor = 1
ratio = 0.0

[backend]
model = \"scripted-classifier\"
max_in_flight = 4
";

/// Write corpus and config into `dir`; returns (corpus, config).
pub fn write_pipeline_fixture(dir: &Path) -> (PathBuf, PathBuf) {
    write_sized_fixture(dir, 10, 3)
}

pub fn write_sized_fixture(dir: &Path, test: usize, train: usize) -> (PathBuf, PathBuf) {
    let corpus = dir.join("corpus.jsonl");
    let config = dir.join("relgen.toml");
    std::fs::write(&corpus, pipeline_corpus_sized(test, train)).unwrap();
    std::fs::write(&config, PIPELINE_CONFIG).unwrap();
    (corpus, config)
}

// ---------------------------------------------------------------------------
// Stub HTTP server

pub struct StubServer {
    pub url: String,
    pub hits: Arc<AtomicUsize>,
}

type Handler = dyn Fn(usize, &Value) -> (u16, String) + Send + Sync;

impl StubServer {
    /// Serve every POST with `handler(hit_number, json_body)`.
    pub fn start(handler: impl Fn(usize, &Value) -> (u16, String) + Send + Sync + 'static) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let hits = Arc::new(AtomicUsize::new(0));
        let handler: Arc<Handler> = Arc::new(handler);
        let counter = hits.clone();
        thread::spawn(move || {
            for stream in listener.incoming().flatten() {
                let handler = handler.clone();
                let counter = counter.clone();
                thread::spawn(move || serve(stream, &*handler, &counter));
            }
        });
        StubServer { url, hits }
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }
}

/// Answers exactly one request per connection (`Connection: close`).
fn serve(stream: TcpStream, handler: &Handler, hits: &AtomicUsize) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut stream = stream;
    let mut line = String::new();
    if reader.read_line(&mut line).unwrap_or(0) == 0 {
        return;
    }
    let mut len = 0;
    loop {
        let mut h = String::new();
        if reader.read_line(&mut h).unwrap_or(0) == 0 {
            return;
        }
        let h = h.trim_end();
        if h.is_empty() {
            break;
        }
        if let Some((k, v)) = h.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                len = v.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0; len];
    if reader.read_exact(&mut body).is_err() {
        return;
    }
    let hit = hits.fetch_add(1, Ordering::SeqCst);
    let value: Value = serde_json::from_slice(&body).unwrap_or(Value::Null);
    let (status, text) = handler(hit, &value);
    let response = format!(
        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
        text.len()
    );
    let _ = stream.write_all(response.as_bytes());
    let _ = stream.flush();
}

/// A chat-completion response body carrying `text`.
pub fn completion(text: &str) -> String {
    json!({"choices": [{"message": {"role": "assistant", "content": text}, "finish_reason": "stop"}]}).to_string()
}

/// A local port with nothing listening on it.
pub fn closed_port_url() -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    format!("http://{addr}/v1/chat/completions")
}

// ---------------------------------------------------------------------------
// Offline scripts

/// One test instance with the first-stage prompt fingerprint of a pipeline.
#[derive(Debug, Clone)]
pub struct Instance {
    pub index: usize,
    pub key: String,
    pub gold: String,
    pub e1: String,
    pub e2: String,
    pub prompt_sha256: String,
}

/// Instances of the test split, via `relgen prompts --json`.
pub fn instances(cwd: &Path, config: &Path, store: &Path, pipeline: &str) -> Vec<Instance> {
    let out = relgen(
        cwd,
        &[
            "--config",
            config.to_str().unwrap(),
            "prompts",
            "--pipeline",
            pipeline,
            "--store",
            store.to_str().unwrap(),
            "--json",
        ],
    );
    assert!(out.status.success(), "prompts failed: {}", stderr(&out));
    let catalog = relgen::labelset::LabelCatalog::microbiorel();
    let st = relgen::store::CorpusStore::open(store, &catalog).unwrap();
    let test: Vec<_> = st
        .relations
        .iter()
        .filter(|r| r.split == relgen::corpus::Split::Test)
        .collect();
    stdout(&out)
        .lines()
        .map(|line| {
            let v: Value = serde_json::from_str(line).unwrap();
            let index = v["index"].as_u64().unwrap() as usize;
            let r = &test[index].relation;
            let p = st.passage(&r.passage_id).unwrap();
            Instance {
                index,
                key: v["key"].as_str().unwrap().to_string(),
                gold: r.label.clone(),
                e1: p.entity(&r.entity1_id).unwrap().surface.clone(),
                e2: p.entity(&r.entity2_id).unwrap().surface.clone(),
                prompt_sha256: v["prompt_sha256"].as_str().unwrap().to_string(),
            }
        })
        .collect()
}

pub use relgen::backend::ScriptedResponse;

pub fn direct_script(insts: &[Instance], answer: impl Fn(&Instance) -> ScriptedResponse) -> String {
    let mut g = relgen::backend::ScriptedGenerator::new();
    for i in insts {
        g.insert(i.prompt_sha256.clone(), answer(i));
    }
    g.to_jsonl()
}

/// Script covering both stages: summaries keyed by the summary prompt,
/// labels keyed by the instruction prompt built from that summary.
pub fn summarize_script(
    insts: &[Instance],
    summary: impl Fn(&Instance) -> ScriptedResponse,
    label: impl Fn(&Instance) -> ScriptedResponse,
) -> String {
    let mut g = relgen::backend::ScriptedGenerator::new();
    for i in insts {
        let s = summary(i);
        let text = s.text.trim().to_string();
        let ok = s.error.is_none() && !text.is_empty();
        g.insert(i.prompt_sha256.clone(), s);
        if ok {
            let p = relgen::prompting::build_instruction_prompt(&text, &i.e1, &i.e2).unwrap();
            g.insert(p.fingerprint(), label(i));
        }
    }
    g.to_jsonl()
}

/// Deterministic mix of outcomes for the direct pipeline.
pub fn mixed_direct_answer(i: &Instance) -> ScriptedResponse {
    match i.index % 6 {
        0 => ScriptedResponse::text(i.gold.clone()),
        1 => ScriptedResponse::text(format!("The relation is: {} because the text says so.", i.gold)),
        2 => ScriptedResponse::text("Associated with"),
        3 => ScriptedResponse::text("Reduce"),
        4 => ScriptedResponse::text("modulates the gut-brain axis"),
        _ => ScriptedResponse::text("experiences"),
    }
}

pub fn mixed_summary(i: &Instance) -> ScriptedResponse {
    if i.index == 17 {
        return ScriptedResponse::failure("summarizer unavailable");
    }
    ScriptedResponse::text(format!(
        "In this cohort, {} was tracked together with {} and the two moved together.",
        i.e1, i.e2
    ))
}

pub fn mixed_label(i: &Instance) -> ScriptedResponse {
    match i.index % 4 {
        3 => ScriptedResponse::text("Associated_with"),
        _ => ScriptedResponse::text(i.gold.clone()),
    }
}
