//! Policy backends: anything that produces the next assistant message for a
//! rollout. Root and clones always share one backend (shared weights).

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::protocol::{AssistantMessage, RawToolCall};

mod random;
mod scripted;
mod toy;

pub use random::RandomPolicy;
pub use scripted::{CloneScript, RootScript, ScriptedPolicy};
pub use toy::{GradTable, StateEncoder, ToyPolicy, ToySoftmaxBackend};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RolloutRole {
    Root,
    Clone,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatRole {
    System,
    User,
    Assistant,
    Tool,
}

/// A chat-completions style message in a rollout's history.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: ChatRole,
    pub content: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tool_calls: Vec<RawToolCall>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_call_id: Option<String>,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self::plain(ChatRole::System, content)
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::plain(ChatRole::User, content)
    }

    pub fn assistant(message: &AssistantMessage) -> Self {
        ChatMessage {
            role: ChatRole::Assistant,
            content: message.content.clone(),
            tool_calls: message.tool_calls.clone(),
            tool_call_id: None,
        }
    }

    pub fn tool(call_id: impl Into<String>, content: impl Into<String>) -> Self {
        ChatMessage {
            role: ChatRole::Tool,
            content: content.into(),
            tool_calls: Vec::new(),
            tool_call_id: Some(call_id.into()),
        }
    }

    fn plain(role: ChatRole, content: impl Into<String>) -> Self {
        ChatMessage {
            role,
            content: content.into(),
            tool_calls: Vec::new(),
            tool_call_id: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u32,
    pub completion_tokens: u32,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    #[default]
    Stop,
    /// The backend itself stopped at `max_tokens`.
    Length,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Completion {
    pub message: AssistantMessage,
    pub usage: Option<Usage>,
    pub finish: FinishReason,
}

impl Completion {
    pub fn new(message: AssistantMessage) -> Self {
        Completion {
            message,
            usage: None,
            finish: FinishReason::Stop,
        }
    }
}

/// Everything a backend may condition on for one turn.
#[derive(Clone, Copy, Debug)]
pub struct PolicyRequest<'a> {
    pub role: RolloutRole,
    pub depth: u32,
    pub turn: u32,
    pub history: &'a [ChatMessage],
    /// Tool declarations offered this turn; `None` means no tools.
    pub tools: Option<&'a [Value]>,
    /// Remaining generation budget of the rollout.
    pub max_tokens: u32,
    /// Per-request seed, a pure function of (episode seed, rollout path, turn).
    pub seed: u64,
}

impl PolicyRequest<'_> {
    /// Content of the first user message.
    pub fn prompt(&self) -> &str {
        self.history
            .iter()
            .find(|m| m.role == ChatRole::User)
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Scripted,
    Random,
    ToySoftmax,
    Remote,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Determinism {
    Deterministic,
    SeededStochastic,
    External,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Concurrency {
    ConcurrentSafe,
    Serial,
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum PolicyError {
    #[error("transport failure after {attempts} attempt(s){}: {message}", .status.map(|s| alloc::format!(" (HTTP {s})")).unwrap_or_default())]
    Transport {
        message: String,
        status: Option<u16>,
        attempts: u32,
        retryable: bool,
    },
    #[error("invalid backend response: {0}")]
    InvalidResponse(String),
    #[error("state {state} / action {action} out of range")]
    OutOfRange { state: usize, action: usize },
    #[error("invalid policy table: {0}")]
    InvalidTable(&'static str),
}

impl PolicyError {
    pub fn is_transport(&self) -> bool {
        matches!(self, PolicyError::Transport { .. } | PolicyError::InvalidResponse(_))
    }
}

pub trait PolicyBackend: Send + Sync {
    fn kind(&self) -> BackendKind;

    fn determinism(&self) -> Determinism;

    fn concurrency(&self) -> Concurrency {
        Concurrency::ConcurrentSafe
    }

    fn next_message(&self, request: &PolicyRequest<'_>) -> Result<Completion, PolicyError>;
}

impl<P: PolicyBackend + ?Sized> PolicyBackend for &P {
    fn kind(&self) -> BackendKind {
        (**self).kind()
    }

    fn determinism(&self) -> Determinism {
        (**self).determinism()
    }

    fn concurrency(&self) -> Concurrency {
        (**self).concurrency()
    }

    fn next_message(&self, request: &PolicyRequest<'_>) -> Result<Completion, PolicyError> {
        (**self).next_message(request)
    }
}

impl<P: PolicyBackend + ?Sized> PolicyBackend for alloc::boxed::Box<P> {
    fn kind(&self) -> BackendKind {
        (**self).kind()
    }

    fn determinism(&self) -> Determinism {
        (**self).determinism()
    }

    fn concurrency(&self) -> Concurrency {
        (**self).concurrency()
    }

    fn next_message(&self, request: &PolicyRequest<'_>) -> Result<Completion, PolicyError> {
        (**self).next_message(request)
    }
}

/// Helpers shared by the built-in backends for reading prompts they were
/// given by the orchestrator.
pub(crate) mod read {
    use super::{ChatMessage, ChatRole};
    use crate::protocol::{parse_tool_call, parse_tool_result_line};
    use alloc::collections::BTreeMap;
    use alloc::string::String;

    /// Value following `label` on its own line, e.g. `Expression: 1+2`.
    pub fn labeled<'a>(text: &'a str, label: &str) -> Option<&'a str> {
        text.lines()
            .find_map(|l| l.trim_start().strip_prefix(label))
            .map(str::trim)
    }

    /// Everything after a `label` line up to the next blank-line-separated
    /// section header (a line ending in `:` that starts with `label`-like text)
    /// or end of text.
    pub fn section<'a>(text: &'a str, header: &str) -> Option<&'a str> {
        let start = text.find(header)?;
        let body = &text[start + header.len()..];
        let body = body.strip_prefix('\n').unwrap_or(body);
        Some(body)
    }

    /// Pairs every returned tool result with the task of the call it answers.
    /// Returns `task -> (attempts, usable content of the latest usable return)`.
    pub fn delegation_log(history: &[ChatMessage]) -> BTreeMap<String, (u32, Option<String>)> {
        let mut tasks_by_id: BTreeMap<String, String> = BTreeMap::new();
        let mut log: BTreeMap<String, (u32, Option<String>)> = BTreeMap::new();
        for m in history {
            match m.role {
                ChatRole::Assistant => {
                    for call in &m.tool_calls {
                        if let Ok(c) = parse_tool_call(&call.id, &call.arguments, u32::MAX) {
                            tasks_by_id.insert(call.id.clone(), c.task.clone());
                            log.entry(c.task).or_insert((0, None)).0 += 1;
                        }
                    }
                }
                ChatRole::Tool => {
                    let Some(task) = m.tool_call_id.as_ref().and_then(|id| tasks_by_id.get(id)) else {
                        continue;
                    };
                    if let Some((_, true, content)) = parse_tool_result_line(&m.content) {
                        if let Some(entry) = log.get_mut(task) {
                            entry.1 = Some(String::from(content));
                        }
                    }
                }
                _ => {}
            }
        }
        log
    }

    pub fn tool_turns(history: &[ChatMessage]) -> usize {
        history
            .iter()
            .filter(|m| m.role == ChatRole::Assistant && !m.tool_calls.is_empty())
            .count()
    }
}
