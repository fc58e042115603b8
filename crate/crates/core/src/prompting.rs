//! Three-part prompts: instruction, one-shot template, query.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{ChatMessage, Role};
use crate::dataset::Record;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("prompt part {0} is empty")]
    EmptyPart(&'static str),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Encoding (data → summary) and decoding (summary → data) instructions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionSet {
    pub encoding: String,
    pub decoding: String,
}

impl InstructionSet {
    pub fn new(encoding: impl Into<String>, decoding: impl Into<String>) -> Result<Self, PromptError> {
        let set = Self {
            encoding: encoding.into(),
            decoding: decoding.into(),
        };
        if set.encoding.trim().is_empty() {
            return Err(PromptError::EmptyPart("encoding instruction"));
        }
        if set.decoding.trim().is_empty() {
            return Err(PromptError::EmptyPart("decoding instruction"));
        }
        Ok(set)
    }

    pub fn load(encode_path: &Path, decode_path: &Path) -> Result<Self, PromptError> {
        let read = |p: &Path| {
            std::fs::read_to_string(p).map_err(|source| PromptError::Io {
                path: p.to_path_buf(),
                source,
            })
        };
        Self::new(
            read(encode_path)?.trim().to_string(),
            read(decode_path)?.trim().to_string(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "iteration")]
pub enum TemplateOrigin {
    HumanSeed,
    Iteration(usize),
}

/// A (record, summary) exemplar shown to the model in every prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    pub record_text: String,
    pub summary_text: String,
    pub origin: TemplateOrigin,
}

impl Template {
    pub fn new(
        record_text: impl Into<String>,
        summary_text: impl Into<String>,
        origin: TemplateOrigin,
    ) -> Result<Self, PromptError> {
        let t = Self {
            record_text: record_text.into().trim().to_string(),
            summary_text: summary_text.into().trim().to_string(),
            origin,
        };
        if t.record_text.is_empty() {
            return Err(PromptError::EmptyPart("template record"));
        }
        if t.summary_text.is_empty() {
            return Err(PromptError::EmptyPart("template summary"));
        }
        Ok(t)
    }

    pub fn load(record_path: &Path, summary_path: &Path) -> Result<Self, PromptError> {
        let read = |p: &Path| {
            std::fs::read_to_string(p).map_err(|source| PromptError::Io {
                path: p.to_path_buf(),
                source,
            })
        };
        Self::new(read(record_path)?, read(summary_path)?, TemplateOrigin::HumanSeed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    #[default]
    OneShot,
    ZeroShot,
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PromptMode::OneShot => "one_shot",
            PromptMode::ZeroShot => "zero_shot",
        })
    }
}

fn non_empty(text: &str, part: &'static str) -> Result<(), PromptError> {
    if text.trim().is_empty() {
        Err(PromptError::EmptyPart(part))
    } else {
        Ok(())
    }
}

/// `[system: encoding, assistant: record, assistant: summary, user: query]`,
/// or just the first and last message in zero-shot mode.
pub fn build_generation_prompt(
    instructions: &InstructionSet,
    template: &Template,
    query: &Record,
    mode: PromptMode,
) -> Result<Vec<ChatMessage>, PromptError> {
    non_empty(&instructions.encoding, "encoding instruction")?;
    non_empty(&query.canonical_text, "query record")?;
    let mut messages = vec![ChatMessage::system(instructions.encoding.clone())];
    if mode == PromptMode::OneShot {
        non_empty(&template.record_text, "template record")?;
        non_empty(&template.summary_text, "template summary")?;
        messages.push(ChatMessage::assistant(template.record_text.clone()));
        messages.push(ChatMessage::assistant(template.summary_text.clone()));
    }
    messages.push(ChatMessage::user(query.canonical_text.clone()));
    Ok(messages)
}

/// Mirror of [`build_generation_prompt`]: the exemplar is shown summary
/// first, then record, and the query is the summary to decode.
pub fn build_recovery_prompt(
    instructions: &InstructionSet,
    template: &Template,
    summary: &str,
    mode: PromptMode,
) -> Result<Vec<ChatMessage>, PromptError> {
    non_empty(&instructions.decoding, "decoding instruction")?;
    non_empty(summary, "summary")?;
    let mut messages = vec![ChatMessage::system(instructions.decoding.clone())];
    if mode == PromptMode::OneShot {
        non_empty(&template.record_text, "template record")?;
        non_empty(&template.summary_text, "template summary")?;
        messages.push(ChatMessage::assistant(template.summary_text.clone()));
        messages.push(ChatMessage::assistant(template.record_text.clone()));
    }
    messages.push(ChatMessage::user(summary.to_string()));
    Ok(messages)
}

/// Rough token count: one token per four UTF-8 bytes, rounded up.
pub fn estimate_tokens(text: &str) -> usize {
    text.len().div_ceil(4)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BudgetLimits {
    pub instruction: usize,
    pub template: usize,
}

impl Default for BudgetLimits {
    fn default() -> Self {
        Self {
            instruction: 500,
            template: 3000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BudgetWarning {
    pub part: &'static str,
    pub estimated_tokens: usize,
    pub limit: usize,
}

impl fmt::Display for BudgetWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} part is about {} tokens, over the budget of {}",
            self.part, self.estimated_tokens, self.limit
        )
    }
}

/// Warns about the instruction (system messages) and template (assistant
/// messages) parts that exceed their budgets. Never blocks a request.
pub fn check_budget(messages: &[ChatMessage], limits: &BudgetLimits) -> Vec<BudgetWarning> {
    let part_tokens = |role: Role| -> usize {
        messages
            .iter()
            .filter(|m| m.role == role)
            .map(|m| estimate_tokens(&m.content))
            .sum()
    };
    [
        ("instruction", part_tokens(Role::System), limits.instruction),
        ("template", part_tokens(Role::Assistant), limits.template),
    ]
    .into_iter()
    .filter(|&(_, est, limit)| est > limit)
    .map(|(part, estimated_tokens, limit)| BudgetWarning {
        part,
        estimated_tokens,
        limit,
    })
    .collect()
}
