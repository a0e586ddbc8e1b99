//! Prompt rendering for the three prompt families.
//!
//! Wording lives in versioned template files (see `templates/`), filled with
//! `{entity1}`, `{entity2}`, `{passage}`, `{classes}` and `{demonstrations}`.
//! Substitution is a single pass, so placeholder-like text inside a passage is
//! left untouched.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{EntityMention, GoldRelation, PassageRecord};
use crate::labelset::LabelCatalog;

pub const TEMPLATE_VERSION: &str = "v1";

const DIRECT_TEMPLATE: &str = include_str!("../templates/direct_zero_shot.txt");
const SUMMARIZATION_TEMPLATE: &str = include_str!("../templates/summarization_few_shot.txt");
const INSTRUCTION_SYSTEM: &str = include_str!("../templates/instruction_system.txt");
const INSTRUCTION_USER: &str = include_str!("../templates/instruction_user.txt");

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("entity {0} is not part of passage {1}")]
    EntityNotInPassage(String, String),
    #[error("catalog has {found} labels but the taxonomy declares {expected}")]
    IncompleteCatalog { expected: usize, found: usize },
    #[error("input text is empty")]
    EmptyInput,
    #[error("template {template} is missing placeholder {{{placeholder}}}")]
    MissingPlaceholder { template: String, placeholder: String },
    #[error("cannot read template {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptFamily {
    DirectZeroShot,
    SummarizationFewShot,
    InstructionTuning,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub system: Option<String>,
    pub user: String,
    pub family: PromptFamily,
}

impl RenderedPrompt {
    /// Hex SHA-256 over the system and user text. Used to key scripted
    /// backend responses.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        if let Some(system) = &self.system {
            h.update(system.as_bytes());
        }
        h.update([0u8]);
        h.update(self.user.as_bytes());
        hex::encode(h.finalize())
    }
}

/// A demonstration triple rendered as `Entity1 Relation Entity2`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demonstration {
    pub entity1: String,
    pub relation: String,
    pub entity2: String,
}

impl Demonstration {
    pub fn render(&self) -> String {
        format!("{} {} {}", self.entity1, self.relation, self.entity2)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    pub direct: String,
    pub summarization: String,
    pub instruction_system: String,
    pub instruction_user: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        PromptTemplates {
            direct: trim_template(DIRECT_TEMPLATE),
            summarization: trim_template(SUMMARIZATION_TEMPLATE),
            instruction_system: INSTRUCTION_SYSTEM.trim().to_string(),
            instruction_user: trim_template(INSTRUCTION_USER),
        }
    }
}

fn trim_template(s: &str) -> String {
    s.trim_end_matches(['\n', '\r']).to_string()
}

const REQUIRED: [(&str, &[&str]); 3] = [
    ("direct_zero_shot.txt", &["entity1", "entity2", "classes", "passage"]),
    ("summarization_few_shot.txt", &["entity1", "entity2", "demonstrations", "passage"]),
    ("instruction_user.txt", &["entity1", "entity2", "passage"]),
];

impl PromptTemplates {
    /// Load overrides from a directory. Files that are absent keep the
    /// built-in text.
    pub fn from_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut t = Self::default();
        let read = |name: &str| -> Result<Option<String>, PromptError> {
            let path = dir.join(name);
            if !path.exists() {
                return Ok(None);
            }
            std::fs::read_to_string(&path).map(Some).map_err(|e| PromptError::Io {
                path: path.display().to_string(),
                message: e.to_string(),
            })
        };
        if let Some(s) = read("direct_zero_shot.txt")? {
            t.direct = trim_template(&s);
        }
        if let Some(s) = read("summarization_few_shot.txt")? {
            t.summarization = trim_template(&s);
        }
        if let Some(s) = read("instruction_system.txt")? {
            t.instruction_system = s.trim().to_string();
        }
        if let Some(s) = read("instruction_user.txt")? {
            t.instruction_user = trim_template(&s);
        }
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        let bodies = [&self.direct, &self.summarization, &self.instruction_user];
        for ((name, required), body) in REQUIRED.iter().zip(bodies) {
            for p in *required {
                if !body.contains(&format!("{{{p}}}")) {
                    return Err(PromptError::MissingPlaceholder {
                        template: name.to_string(),
                        placeholder: p.to_string(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Hash of all template text, recorded in run manifests.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for part in [&self.direct, &self.summarization, &self.instruction_system, &self.instruction_user] {
            h.update(part.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }
}

/// Replace `{name}` placeholders in one pass.
fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + 256);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let hit = after.find('}').and_then(|close| {
            let name = &after[..close];
            vars.iter().find(|(k, _)| *k == name).map(|(_, v)| (close, *v))
        });
        match hit {
            Some((close, value)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

fn check_member(passage: &PassageRecord, e: &EntityMention) -> Result<(), PromptError> {
    match passage.entity(&e.id) {
        Some(found) if found == e => Ok(()),
        _ => Err(PromptError::EntityNotInPassage(e.id.clone(), passage.passage_id.clone())),
    }
}

#[derive(Debug, Clone, Default)]
pub struct PromptBuilder {
    templates: PromptTemplates,
}

impl PromptBuilder {
    pub fn new(templates: PromptTemplates) -> Self {
        PromptBuilder { templates }
    }

    pub fn templates(&self) -> &PromptTemplates {
        &self.templates
    }

    /// Zero-shot prompt: instruction, constraints with the full class list, passage.
    pub fn direct(
        &self,
        passage: &PassageRecord,
        e1: &EntityMention,
        e2: &EntityMention,
        catalog: &LabelCatalog,
    ) -> Result<RenderedPrompt, PromptError> {
        check_member(passage, e1)?;
        check_member(passage, e2)?;
        if !catalog.is_complete() {
            return Err(PromptError::IncompleteCatalog {
                expected: catalog.declared_len(),
                found: catalog.len(),
            });
        }
        let classes = catalog.names().collect::<Vec<_>>().join(", ");
        let user = render(
            &self.templates.direct,
            &[
                ("entity1", &e1.surface),
                ("entity2", &e2.surface),
                ("classes", &classes),
                ("passage", &passage.text),
            ],
        );
        Ok(RenderedPrompt {
            system: None,
            user,
            family: PromptFamily::DirectZeroShot,
        })
    }

    /// Few-shot summarization prompt. No class list.
    pub fn summarization(
        &self,
        passage: &PassageRecord,
        e1: &EntityMention,
        e2: &EntityMention,
        demos: &[Demonstration],
    ) -> Result<RenderedPrompt, PromptError> {
        check_member(passage, e1)?;
        check_member(passage, e2)?;
        let block = if demos.is_empty() {
            String::new()
        } else {
            let mut s = String::from("Examples:\n");
            for d in demos {
                s.push_str(&d.render());
                s.push('\n');
            }
            s
        };
        let user = render(
            &self.templates.summarization,
            &[
                ("entity1", &e1.surface),
                ("entity2", &e2.surface),
                ("demonstrations", &block),
                ("passage", &passage.text),
            ],
        );
        Ok(RenderedPrompt {
            system: None,
            user,
            family: PromptFamily::SummarizationFewShot,
        })
    }

    /// Classification prompt for the instruction-tuned model. No class list.
    pub fn instruction(&self, input_text: &str, e1: &str, e2: &str) -> Result<RenderedPrompt, PromptError> {
        if input_text.trim().is_empty() {
            return Err(PromptError::EmptyInput);
        }
        let user = render(
            &self.templates.instruction_user,
            &[("entity1", e1), ("entity2", e2), ("passage", input_text)],
        );
        Ok(RenderedPrompt {
            system: Some(self.templates.instruction_system.clone()),
            user,
            family: PromptFamily::InstructionTuning,
        })
    }

    /// System text and the instruction line on their own, without the input
    /// text. Used for training-set export.
    pub fn instruction_header(&self, e1: &str, e2: &str) -> (String, String) {
        let text = render(
            &self.templates.instruction_user,
            &[("entity1", e1), ("entity2", e2), ("passage", "")],
        );
        (self.templates.instruction_system.clone(), text.trim_end().to_string())
    }
}

pub fn build_direct_prompt(
    passage: &PassageRecord,
    e1: &EntityMention,
    e2: &EntityMention,
    catalog: &LabelCatalog,
) -> Result<RenderedPrompt, PromptError> {
    PromptBuilder::default().direct(passage, e1, e2, catalog)
}

pub fn build_summarization_prompt(
    passage: &PassageRecord,
    e1: &EntityMention,
    e2: &EntityMention,
    demos: &[Demonstration],
) -> Result<RenderedPrompt, PromptError> {
    PromptBuilder::default().summarization(passage, e1, e2, demos)
}

pub fn build_instruction_prompt(input_text: &str, e1: &str, e2: &str) -> Result<RenderedPrompt, PromptError> {
    PromptBuilder::default().instruction(input_text, e1, e2)
}

/// Draw `n` demonstrations from training relations, skipping the None class.
/// Candidates are sorted by relation key before the seeded shuffle so the
/// draw does not depend on input order.
pub fn select_demonstrations(
    train: &[GoldRelation],
    passages: &[PassageRecord],
    catalog: &LabelCatalog,
    n: usize,
    seed: u64,
) -> Vec<Demonstration> {
    let none = &catalog.none_label().canonical_name;
    let mut pool: Vec<&GoldRelation> = train.iter().filter(|r| &r.label != none).collect();
    pool.sort_by_key(|r| r.key());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.shuffle(&mut rng);
    pool.into_iter()
        .filter_map(|r| {
            let p = passages.iter().find(|p| p.passage_id == r.passage_id)?;
            Some(Demonstration {
                entity1: p.entity(&r.entity1_id)?.surface.clone(),
                relation: r.label.clone(),
                entity2: p.entity(&r.entity2_id)?.surface.clone(),
            })
        })
        .take(n)
        .collect()
}

/// Whole-word, case-sensitive occurrences of `needle` in `haystack`.
/// Word characters are alphanumerics and `_`.
pub fn count_whole_word(haystack: &str, needle: &str) -> usize {
    if needle.is_empty() {
        return 0;
    }
    let is_word = |c: char| c.is_alphanumeric() || c == '_';
    haystack
        .match_indices(needle)
        .filter(|(i, _)| {
            let before = haystack[..*i].chars().next_back();
            let after = haystack[i + needle.len()..].chars().next();
            !before.is_some_and(is_word) && !after.is_some_and(is_word)
        })
        .count()
}
