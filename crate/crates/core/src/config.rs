//! Run configuration.
//!
//! Loaded from TOML; every field has a default so an empty file is valid.
//! Precedence is CLI flag > environment variable > file > default. The only
//! secret is the backend credential, which is read from the environment
//! variable *named* by `auth_env` and never stored.
//!
//! ```toml
//! seed = 13
//!
//! [backend]              # classifier / direct-prompt model
//! kind = "http"          # or "scripted"
//! endpoint = "https://llm.example.org/v1/chat/completions"
//! model = "llama-3.2-3b-instruct"
//! auth_env = "RELGEN_API_KEY"
//! max_in_flight = 4
//!
//! [summarizer]           # optional; defaults to [backend]
//! model = "llama-3.1-70b-instruct"
//!
//! [decoding]
//! temperature = 0.0
//! max_new_tokens = 128
//!
//! [none_policy]
//! floor = 1
//! ratio = 0.05
//!
//! [normalization]
//! tau = 0.2
//! synonyms = "synonyms.txt"
//!
//! [embedding]
//! kind = "hashed"        # or "http"
//! dim = 64
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    BackendError, Decoding, HashedNgramEmbedder, HttpConfig, HttpEmbedder, HttpGenerator, RetryPolicy,
    ScriptedGenerator, TextEmbedder, TextGenerator,
};
use crate::corpus::NonePolicy;
use crate::normalization::DEFAULT_TAU;

pub const ENV_ENDPOINT: &str = "RELGEN_ENDPOINT";
pub const ENV_MODEL: &str = "RELGEN_MODEL";
pub const ENV_SEED: &str = "RELGEN_SEED";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {message}")]
    Read { path: String, message: String },
    #[error("invalid config {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid value: {0}")]
    Invalid(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Scripted,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    pub kind: BackendKind,
    pub endpoint: String,
    pub model: String,
    pub auth_env: Option<String>,
    pub auth_header: String,
    pub auth_scheme: String,
    pub timeout_ms: u64,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
    pub text_path: String,
    pub finish_reason_path: String,
    pub max_tokens_field: String,
    /// Script for the offline backend (JSONL).
    pub script: Option<PathBuf>,
}

impl Default for BackendSection {
    fn default() -> Self {
        let http = HttpConfig::default();
        BackendSection {
            kind: BackendKind::Scripted,
            endpoint: String::new(),
            model: "scripted".into(),
            auth_env: None,
            auth_header: http.auth_header,
            auth_scheme: http.auth_scheme,
            timeout_ms: http.timeout_ms,
            max_in_flight: 4,
            retry: http.retry,
            text_path: http.text_path,
            finish_reason_path: http.finish_reason_path,
            max_tokens_field: http.max_tokens_field,
            script: None,
        }
    }
}

impl BackendSection {
    pub fn http_config(&self) -> HttpConfig {
        HttpConfig {
            endpoint: self.endpoint.clone(),
            auth_env: self.auth_env.clone(),
            auth_header: self.auth_header.clone(),
            auth_scheme: self.auth_scheme.clone(),
            timeout_ms: self.timeout_ms,
            retry: self.retry.clone(),
            text_path: self.text_path.clone(),
            finish_reason_path: self.finish_reason_path.clone(),
            max_tokens_field: self.max_tokens_field.clone(),
            ..HttpConfig::default()
        }
    }

    /// Build the generator. Relative script paths resolve against `base`.
    pub fn generator(&self, base: &Path) -> Result<Box<dyn TextGenerator>, ConfigError> {
        match self.kind {
            BackendKind::Scripted => {
                let script = self.script.as_ref().ok_or_else(|| {
                    ConfigError::Invalid("scripted backend needs `script = \"<path>\"`".into())
                })?;
                Ok(Box::new(ScriptedGenerator::from_path(&base.join(script))?))
            }
            BackendKind::Http => {
                if self.endpoint.is_empty() {
                    return Err(ConfigError::Invalid("http backend needs an endpoint".into()));
                }
                Ok(Box::new(HttpGenerator::new(self.http_config())?))
            }
        }
    }
}

/// Sparse override for the summarization model; unset fields inherit from
/// `[backend]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendOverride {
    pub kind: Option<BackendKind>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub auth_env: Option<String>,
    pub script: Option<PathBuf>,
    pub max_new_tokens: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    #[default]
    Hashed,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingSection {
    pub kind: EmbeddingKind,
    pub dim: usize,
    pub endpoint: String,
    pub model: String,
    pub auth_env: Option<String>,
}

impl Default for EmbeddingSection {
    fn default() -> Self {
        EmbeddingSection {
            kind: EmbeddingKind::Hashed,
            dim: 64,
            endpoint: String::new(),
            model: String::new(),
            auth_env: None,
        }
    }
}

impl EmbeddingSection {
    pub fn embedder(&self) -> Result<Box<dyn TextEmbedder>, ConfigError> {
        match self.kind {
            EmbeddingKind::Hashed => Ok(Box::new(HashedNgramEmbedder::new(self.dim)?)),
            EmbeddingKind::Http => {
                let cfg = HttpConfig {
                    endpoint: self.endpoint.clone(),
                    auth_env: self.auth_env.clone(),
                    ..HttpConfig::default()
                };
                Ok(Box::new(HttpEmbedder::new(cfg, self.model.clone())?))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormalizationSection {
    pub tau: f64,
    pub case_sensitive: bool,
    pub synonyms: Option<PathBuf>,
}

impl Default for NormalizationSection {
    fn default() -> Self {
        NormalizationSection {
            tau: DEFAULT_TAU,
            case_sensitive: true,
            synonyms: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    /// Few-shot demonstrations in the summarization prompt.
    pub demonstrations: usize,
    pub catalog: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub backend: BackendSection,
    pub summarizer: BackendOverride,
    pub decoding: Decoding,
    pub none_policy: NonePolicy,
    pub normalization: NormalizationSection,
    pub embedding: EmbeddingSection,
    /// Fraction of annotated relations held out when the corpus declares no split.
    pub test_ratio: f64,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 13,
            demonstrations: 3,
            catalog: None,
            templates: None,
            backend: BackendSection::default(),
            summarizer: BackendOverride::default(),
            decoding: Decoding::default(),
            none_policy: NonePolicy::default(),
            normalization: NormalizationSection::default(),
            embedding: EmbeddingSection::default(),
            test_ratio: 0.2,
            base_dir: PathBuf::from("."),
        }
    }
}

/// Values given on the command line; `None` means "not given".
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub seed: Option<u64>,
    pub script: Option<PathBuf>,
}

impl Config {
    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })
    }

    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut cfg = Self::parse(&text, &path.display().to_string())?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    /// File (if any) then environment then flags.
    pub fn resolve(
        path: Option<&Path>,
        env: &dyn Fn(&str) -> Option<String>,
        flags: &Overrides,
    ) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => Self::from_path(p)?,
            None => Self::default(),
        };
        if let Some(v) = env(ENV_ENDPOINT) {
            cfg.backend.endpoint = v;
        }
        if let Some(v) = env(ENV_MODEL) {
            cfg.backend.model = v;
        }
        if let Some(v) = env(ENV_SEED) {
            cfg.seed = v
                .parse()
                .map_err(|_| ConfigError::Invalid(format!("{ENV_SEED}={v:?} is not an unsigned integer")))?;
        }
        if let Some(v) = &flags.endpoint {
            cfg.backend.endpoint = v.clone();
        }
        if let Some(v) = &flags.model {
            cfg.backend.model = v.clone();
        }
        if let Some(v) = flags.seed {
            cfg.seed = v;
        }
        if let Some(v) = &flags.script {
            cfg.backend.kind = BackendKind::Scripted;
            // flag paths are relative to the working directory
            cfg.backend.script = Some(std::path::absolute(v).unwrap_or_else(|_| v.clone()));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.normalization.tau.is_finite() && (0.0..=1.0).contains(&self.normalization.tau)) {
            return Err(ConfigError::Invalid(format!("tau must be in [0, 1], got {}", self.normalization.tau)));
        }
        if !(self.none_policy.ratio.is_finite() && self.none_policy.ratio >= 0.0) {
            return Err(ConfigError::Invalid("none_policy.ratio must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.test_ratio) {
            return Err(ConfigError::Invalid("test_ratio must be in [0, 1)".into()));
        }
        if self.backend.max_in_flight == 0 {
            return Err(ConfigError::Invalid("backend.max_in_flight must be at least 1".into()));
        }
        Ok(())
    }

    /// `[backend]` with the `[summarizer]` overrides applied.
    pub fn summarizer_backend(&self) -> BackendSection {
        let mut b = self.backend.clone();
        let o = &self.summarizer;
        if let Some(k) = o.kind {
            b.kind = k;
        }
        if let Some(e) = &o.endpoint {
            b.endpoint = e.clone();
        }
        if let Some(m) = &o.model {
            b.model = m.clone();
        }
        if let Some(a) = &o.auth_env {
            b.auth_env = Some(a.clone());
        }
        if let Some(s) = &o.script {
            b.script = Some(s.clone());
        }
        b
    }

    pub fn summarizer_decoding(&self) -> Decoding {
        let mut d = self.decoding;
        if let Some(n) = self.summarizer.max_new_tokens {
            d.max_new_tokens = n;
        }
        d
    }

    pub fn resolve_path(&self, p: &Path) -> PathBuf {
        self.base_dir.join(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_defaults() {
        let c = Config::parse("", "t").unwrap();
        assert_eq!(c.seed, 13);
        assert_eq!(c.normalization.tau, 0.2);
        assert_eq!(c.none_policy.floor, 1);
        assert_eq!(c.backend.kind, BackendKind::Scripted);
    }

    #[test]
    fn precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "seed = 1\n[backend]\nkind = \"http\"\nendpoint = \"http://file\"\nmodel = \"file-model\"\n").unwrap();

        let none = |_: &str| None;
        let c = Config::resolve(Some(&path), &none, &Overrides::default()).unwrap();
        assert_eq!((c.seed, c.backend.endpoint.as_str()), (1, "http://file"));

        let env = |k: &str| match k {
            ENV_ENDPOINT => Some("http://env".to_string()),
            ENV_SEED => Some("2".to_string()),
            _ => None,
        };
        let c = Config::resolve(Some(&path), &env, &Overrides::default()).unwrap();
        assert_eq!((c.seed, c.backend.endpoint.as_str(), c.backend.model.as_str()), (2, "http://env", "file-model"));

        let flags = Overrides {
            endpoint: Some("http://flag".into()),
            seed: Some(3),
            ..Overrides::default()
        };
        let c = Config::resolve(Some(&path), &env, &flags).unwrap();
        assert_eq!((c.seed, c.backend.endpoint.as_str()), (3, "http://flag"));

        let bad = |k: &str| (k == ENV_SEED).then(|| "x".to_string());
        assert!(matches!(Config::resolve(None, &bad, &Overrides::default()), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(matches!(Config::parse("[backend]\nbogus = 1\n", "t"), Err(ConfigError::Parse { .. })));
        let mut c = Config::default();
        c.normalization.tau = 1.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn summarizer_inherits() {
        let c = Config::parse("[backend]\nmodel = \"small\"\n[summarizer]\nmodel = \"large\"\nmax_new_tokens = 256\n", "t").unwrap();
        let s = c.summarizer_backend();
        assert_eq!(s.model, "large");
        assert_eq!(s.kind, c.backend.kind);
        assert_eq!(c.summarizer_decoding().max_new_tokens, 256);
    }
}
