//! Task specifications, prompt construction and the keyed document store.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::arith::{normalize_answer, ArithmeticProblem};
use crate::protocol::{MarkerConfig, ToolCall};
use crate::tokens::{count_tokens, tail_to_tokens, TokenCounter};

pub const PROMPT_VERSION: &str = "v1";

pub const ROOT_SYSTEM_PROMPT: &str = include_str!("../../prompts/root_system.txt");
const CLONE_SYSTEM_TEMPLATE: &str = include_str!("../../prompts/clone_system.txt");
const ARITH_ROOT_TEMPLATE: &str = include_str!("../../prompts/arith_root.txt");
const QA_ROOT_TEMPLATE: &str = include_str!("../../prompts/qa_root.txt");
pub const REPROMPT: &str = include_str!("../../prompts/reprompt.txt");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Arithmetic,
    Qa,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: String,
    pub kind: TaskKind,
    /// The rendered expression for arithmetic, the question text otherwise.
    pub question: String,
    pub expected: String,
    /// Document keys relevant to the task (inlined in full-context mode).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub documents: Vec<String>,
}

impl TaskSpec {
    pub fn arithmetic(problem: &ArithmeticProblem) -> Self {
        TaskSpec {
            id: problem.id.clone(),
            kind: TaskKind::Arithmetic,
            question: problem.rendered.clone(),
            expected: problem.answer.to_string(),
            documents: Vec::new(),
        }
    }

    pub fn qa(id: &str, question: &str, expected: &str, documents: Vec<String>) -> Self {
        TaskSpec {
            id: id.into(),
            kind: TaskKind::Qa,
            question: question.into(),
            expected: expected.into(),
            documents,
        }
    }
}

/// A prompt whose middle part may be cut from the front when it does not fit.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PromptParts {
    pub head: String,
    pub context: String,
    pub tail: String,
}

impl PromptParts {
    pub fn plain(text: impl Into<String>) -> Self {
        PromptParts {
            head: text.into(),
            ..Default::default()
        }
    }

    /// Joins the parts, dropping context from its start until the whole
    /// prompt counts at most `limit` tokens. Returns the text and whether
    /// anything had to go.
    pub fn fit(&self, limit: u32, counter: TokenCounter) -> (String, bool) {
        let join = |ctx: &str| format!("{}{}{}", self.head, ctx, self.tail);
        let full = join(&self.context);
        if count_tokens(&full, counter) <= limit {
            return (full, false);
        }
        let fixed = count_tokens(&self.head, counter) + count_tokens(&self.tail, counter);
        let mut budget = limit.saturating_sub(fixed);
        loop {
            let text = join(tail_to_tokens(&self.context, counter, budget));
            if count_tokens(&text, counter) <= limit || budget == 0 {
                return (text, true);
            }
            budget -= 1;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum EnvError {
    #[error("context key not found: {0}")]
    KeyNotFound(String),
}

/// Documents addressable by key, loaded from `{key, text}` records.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextStore {
    docs: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextRecord {
    pub key: String,
    pub text: String,
}

impl ContextStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: impl Into<String>, text: impl Into<String>) {
        self.docs.insert(key.into(), text.into());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.docs.get(key).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }
}

impl FromIterator<ContextRecord> for ContextStore {
    fn from_iter<I: IntoIterator<Item = ContextRecord>>(iter: I) -> Self {
        ContextStore {
            docs: iter.into_iter().map(|r| (r.key, r.text)).collect(),
        }
    }
}

pub fn expand_context_key<'a>(key: &str, store: &'a ContextStore) -> Result<&'a str, EnvError> {
    store.get(key).ok_or_else(|| EnvError::KeyNotFound(key.into()))
}

/// Whether the root gets documents in its own prompt or only through clones.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    #[default]
    Keyed,
    Inline,
}

/// Clone prompt settings the environment needs from the episode.
#[derive(Clone, Copy, Debug)]
pub struct ClonePromptOptions<'a> {
    pub sees_question: bool,
    pub marker: &'a MarkerConfig,
    pub max_return_bytes: usize,
}

/// Task-family specifics: prompts, context expansion, answer checking.
pub trait EnvAdapter: Sync {
    fn root_system_prompt(&self) -> String;
    fn clone_system_prompt(&self, opts: &ClonePromptOptions<'_>) -> String;
    fn root_prompt(&self, task: &TaskSpec) -> PromptParts;
    fn clone_prompt(
        &self,
        task: &TaskSpec,
        call: &ToolCall,
        opts: &ClonePromptOptions<'_>,
    ) -> Result<PromptParts, EnvError>;
    fn check(&self, task: &TaskSpec, answer: &str) -> bool;
}

#[derive(Clone, Debug, Default)]
pub struct StandardEnv {
    pub store: ContextStore,
    pub mode: ContextMode,
}

impl StandardEnv {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_store(store: ContextStore, mode: ContextMode) -> Self {
        StandardEnv { store, mode }
    }
}

fn normalize_text(s: &str) -> String {
    let words: Vec<String> = s.split_whitespace().map(|w| w.to_lowercase()).collect();
    words.join(" ").trim_end_matches('.').to_string()
}

impl EnvAdapter for StandardEnv {
    fn root_system_prompt(&self) -> String {
        ROOT_SYSTEM_PROMPT.into()
    }

    fn clone_system_prompt(&self, opts: &ClonePromptOptions<'_>) -> String {
        CLONE_SYSTEM_TEMPLATE
            .replace("{open}", &opts.marker.open)
            .replace("{close}", &opts.marker.close)
            .replace("{max_bytes}", &opts.max_return_bytes.to_string())
    }

    fn root_prompt(&self, task: &TaskSpec) -> PromptParts {
        match task.kind {
            TaskKind::Arithmetic => PromptParts::plain(ARITH_ROOT_TEMPLATE.replace("{expression}", &task.question)),
            TaskKind::Qa => {
                let head = QA_ROOT_TEMPLATE.replace("{question}", &task.question);
                match self.mode {
                    ContextMode::Keyed => PromptParts::plain(format!(
                        "{head}Documents are read by clones: pass context_key \"doc:<entity>\" (lowercase, words joined by _).\nGive the final answer inside <answer></answer>.\n"
                    )),
                    ContextMode::Inline => {
                        let mut context = String::new();
                        for key in &task.documents {
                            if let Some(text) = self.store.get(key) {
                                context.push_str(&format!("\nDocument {key}:\n{}\n", text.trim_end()));
                            }
                        }
                        PromptParts {
                            head,
                            context,
                            tail: "\nGive the final answer inside <answer></answer>.\n".into(),
                        }
                    }
                }
            }
        }
    }

    fn clone_prompt(
        &self,
        task: &TaskSpec,
        call: &ToolCall,
        opts: &ClonePromptOptions<'_>,
    ) -> Result<PromptParts, EnvError> {
        let mut head = format!("Task: {}\n", call.task);
        if opts.sees_question {
            head.push_str(&format!("Question: {}\n", task.question));
        }
        let Some(key) = &call.context_key else {
            return Ok(PromptParts::plain(head));
        };
        let doc = expand_context_key(key, &self.store)?;
        head.push_str(&format!("\nDocument {key}:\n"));
        Ok(PromptParts {
            head,
            context: doc.trim_end().into(),
            tail: "\n".into(),
        })
    }

    fn check(&self, task: &TaskSpec, answer: &str) -> bool {
        match task.kind {
            TaskKind::Arithmetic => match (normalize_answer(answer), normalize_answer(&task.expected)) {
                (Some(a), Some(b)) => a == b,
                _ => false,
            },
            TaskKind::Qa => normalize_text(answer) == normalize_text(&task.expected),
        }
    }
}
