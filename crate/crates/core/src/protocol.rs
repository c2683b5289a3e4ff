//! The clone tool: schema, tool-call parsing with JSON repair, and extraction
//! of the marker-delimited payload a clone hands back to the root.

use alloc::borrow::ToOwned;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub const CLONE_TOOL_NAME: &str = "clone";
pub const DEFAULT_MAX_RETURN_BYTES: usize = 256;

const INLINE_CALL_OPEN: &str = "<tool_call>";
const INLINE_CALL_CLOSE: &str = "</tool_call>";

/// Delimiter pair a clone wraps its final answer in.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkerConfig {
    pub open: String,
    pub close: String,
}

impl Default for MarkerConfig {
    fn default() -> Self {
        MarkerConfig {
            open: "<return>".into(),
            close: "</return>".into(),
        }
    }
}

impl MarkerConfig {
    pub fn wrap(&self, content: &str) -> String {
        format!("{}{}{}", self.open, content, self.close)
    }
}

/// A tool call as emitted by a backend, before argument parsing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawToolCall {
    pub id: String,
    pub name: String,
    /// Argument payload exactly as generated (possibly malformed JSON).
    pub arguments: String,
}

/// One generated assistant turn.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssistantMessage {
    pub content: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tool_calls: Vec<RawToolCall>,
}

impl AssistantMessage {
    pub fn text(content: impl Into<String>) -> Self {
        AssistantMessage {
            content: content.into(),
            tool_calls: Vec::new(),
        }
    }

    /// Text form used for token accounting: content followed by each
    /// structured call rendered as an inline block.
    pub fn generated_text(&self) -> String {
        let mut out = self.content.clone();
        for call in &self.tool_calls {
            if !out.is_empty() {
                out.push('\n');
            }
            out.push_str(INLINE_CALL_OPEN);
            out.push_str(&format!(
                "{{\"name\":{},\"arguments\":{}}}",
                json!(call.name),
                call.arguments
            ));
            out.push_str(INLINE_CALL_CLOSE);
        }
        out
    }

    /// True when the message carries any tool call, structured or inline.
    pub fn has_tool_calls(&self) -> bool {
        !self.tool_calls.is_empty() || self.content.contains(INLINE_CALL_OPEN)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolCall {
    pub call_id: String,
    pub task: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_key: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
    pub repaired: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CloneReturn {
    pub clone_index: u32,
    pub content: String,
    pub parseable: bool,
    pub truncated: bool,
}

impl CloneReturn {
    /// The return a null clone produces: nothing.
    pub fn null(clone_index: u32) -> Self {
        CloneReturn {
            clone_index,
            content: String::new(),
            parseable: false,
            truncated: true,
        }
    }

    /// A marker was found and it encloses something.
    pub fn is_usable(&self) -> bool {
        self.parseable && !self.content.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum ProtocolError {
    #[error("unrepairable tool-call payload: {raw}")]
    Unrepairable { raw: String },
    #[error("malformed tool call ({reason}): {raw}")]
    Malformed { reason: &'static str, raw: String },
    #[error("unknown tool {0:?}")]
    UnknownTool(String),
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("payload could not be repaired into valid JSON")]
pub struct RepairError {
    pub raw: String,
}

/// Chat-completions tool declaration for the clone tool.
pub fn clone_tool_schema() -> Value {
    json!({
        "type": "function",
        "function": {
            "name": CLONE_TOOL_NAME,
            "description": "Spawn a helper clone with the same weights in a fresh context. \
                The clone sees only `task` (plus the document behind `context_key`, if given) \
                and returns a short answer.",
            "parameters": {
                "type": "object",
                "properties": {
                    "task": {"type": "string", "description": "Self-contained sub-task for the clone."},
                    "context_key": {"type": "string", "description": "Key of a stored document to load into the clone's context."},
                    "max_tokens": {"type": "integer", "description": "Generation budget for the clone."}
                },
                "required": ["task"]
            }
        }
    })
}

/// Strict parse first; on failure run the ordered repair pass and parse again.
pub fn repair_json(raw: &[u8]) -> Result<(Value, bool), RepairError> {
    let text = core::str::from_utf8(raw).map_err(|_| RepairError {
        raw: String::from_utf8_lossy(raw).into_owned(),
    })?;
    if let Ok(v) = serde_json::from_str::<Value>(text) {
        return Ok((v, false));
    }
    let fixed = repair_text(text);
    serde_json::from_str::<Value>(&fixed)
        .map(|v| (v, true))
        .map_err(|_| RepairError { raw: text.to_owned() })
}

/// The repair pass on its own: code fences, quotes, bare keys, trailing
/// commas, then bracket balancing.
pub fn repair_text(text: &str) -> String {
    let s = strip_code_fences(text);
    let s = normalize_single_quotes(&s);
    let s = quote_bare_keys(&s);
    let s = remove_trailing_commas(&s);
    balance_brackets(&s)
}

fn strip_code_fences(text: &str) -> String {
    let Some(start) = text.find("```") else {
        return text.to_owned();
    };
    let after = &text[start + 3..];
    // Skip the info string ("json") on the opening fence line.
    let body_start = after.find('\n').map(|i| i + 1).unwrap_or(after.len());
    let body = &after[body_start..];
    let body = match body.find("```") {
        Some(end) => &body[..end],
        None => body,
    };
    body.trim().to_owned()
}

fn normalize_single_quotes(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut chars = text.chars();
    let mut in_double = false;
    let mut in_single = false;
    while let Some(c) = chars.next() {
        if in_double {
            out.push(c);
            if c == '\\' {
                if let Some(n) = chars.next() {
                    out.push(n);
                }
            } else if c == '"' {
                in_double = false;
            }
        } else if in_single {
            match c {
                '\\' => match chars.next() {
                    Some('\'') => out.push('\''),
                    Some(n) => {
                        out.push('\\');
                        out.push(n);
                    }
                    None => out.push('\\'),
                },
                '"' => out.push_str("\\\""),
                '\'' => {
                    out.push('"');
                    in_single = false;
                }
                _ => out.push(c),
            }
        } else {
            match c {
                '"' => {
                    in_double = true;
                    out.push(c);
                }
                '\'' => {
                    in_single = true;
                    out.push('"');
                }
                _ => out.push(c),
            }
        }
    }
    out
}

fn is_ident_start(c: char) -> bool {
    c.is_ascii_alphabetic() || c == '_' || c == '$'
}

fn is_ident_continue(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_' || c == '$' || c == '-'
}

fn quote_bare_keys(text: &str) -> String {
    let chars: Vec<char> = text.chars().collect();
    let mut out = String::with_capacity(text.len() + 8);
    let mut in_string = false;
    let mut last_significant: Option<char> = None;
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if in_string {
            out.push(c);
            if c == '\\' {
                if let Some(&n) = chars.get(i + 1) {
                    out.push(n);
                    i += 1;
                }
            } else if c == '"' {
                in_string = false;
                last_significant = Some('"');
            }
            i += 1;
            continue;
        }
        if c == '"' {
            in_string = true;
            out.push(c);
            i += 1;
            continue;
        }
        if is_ident_start(c) && matches!(last_significant, Some('{') | Some(',')) {
            let start = i;
            let mut end = i;
            while end < chars.len() && is_ident_continue(chars[end]) {
                end += 1;
            }
            let mut look = end;
            while look < chars.len() && chars[look].is_whitespace() {
                look += 1;
            }
            let ident: String = chars[start..end].iter().collect();
            if chars.get(look) == Some(&':') {
                out.push('"');
                out.push_str(&ident);
                out.push('"');
            } else {
                out.push_str(&ident);
            }
            last_significant = chars[end - 1].into();
            i = end;
            continue;
        }
        if !c.is_whitespace() {
            last_significant = Some(c);
        }
        out.push(c);
        i += 1;
    }
    out
}

fn remove_trailing_commas(text: &str) -> String {
    let chars: Vec<char> = text.chars().collect();
    let mut out = String::with_capacity(text.len());
    let mut in_string = false;
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if in_string {
            out.push(c);
            if c == '\\' {
                if let Some(&n) = chars.get(i + 1) {
                    out.push(n);
                    i += 1;
                }
            } else if c == '"' {
                in_string = false;
            }
        } else if c == '"' {
            in_string = true;
            out.push(c);
        } else if c == ',' {
            let mut look = i + 1;
            while look < chars.len() && chars[look].is_whitespace() {
                look += 1;
            }
            if !matches!(chars.get(look), Some('}') | Some(']')) {
                out.push(c);
            }
        } else {
            out.push(c);
        }
        i += 1;
    }
    out
}

fn balance_brackets(text: &str) -> String {
    let mut stack = Vec::new();
    let mut in_string = false;
    let mut escaped = false;
    for c in text.chars() {
        if in_string {
            if escaped {
                escaped = false;
            } else if c == '\\' {
                escaped = true;
            } else if c == '"' {
                in_string = false;
            }
            continue;
        }
        match c {
            '"' => in_string = true,
            '{' => stack.push('}'),
            '[' => stack.push(']'),
            '}' | ']' if stack.last() == Some(&c) => {
                stack.pop();
            }
            _ => {}
        }
    }
    let mut out = text.trim_end().to_owned();
    if in_string {
        if escaped {
            out.pop();
        }
        out.push('"');
    } else if stack.is_empty() {
        return out;
    }
    if !in_string {
        while out.ends_with(',') {
            out.pop();
            out.truncate(out.trim_end().len());
        }
    }
    while let Some(close) = stack.pop() {
        out.push(close);
    }
    out
}

/// Splits a message into its raw call payloads: structured calls first, then
/// `<tool_call>` blocks found inline in the text (an unterminated final block
/// runs to the end of the text).
fn raw_payloads(message: &AssistantMessage) -> Vec<(Option<&RawToolCall>, &str)> {
    let mut out: Vec<(Option<&RawToolCall>, &str)> = message
        .tool_calls
        .iter()
        .map(|c| (Some(c), c.arguments.as_str()))
        .collect();
    let mut rest = message.content.as_str();
    while let Some(start) = rest.find(INLINE_CALL_OPEN) {
        let body = &rest[start + INLINE_CALL_OPEN.len()..];
        match body.find(INLINE_CALL_CLOSE) {
            Some(end) => {
                out.push((None, body[..end].trim()));
                rest = &body[end + INLINE_CALL_CLOSE.len()..];
            }
            None => {
                out.push((None, body.trim()));
                break;
            }
        }
    }
    out
}

/// Parses every clone call in `message`, in emission order. Each entry is
/// independent: a malformed payload yields an error for that call only.
/// `max_tokens` is clamped to `generation_limit`.
pub fn parse_tool_calls(message: &AssistantMessage, generation_limit: u32) -> Vec<Result<ToolCall, ProtocolError>> {
    parse_tool_calls_with_prefix(message, generation_limit, "call_")
}

/// As [`parse_tool_calls`], with inline or id-less calls named `{prefix}{n}`.
pub fn parse_tool_calls_with_prefix(
    message: &AssistantMessage,
    generation_limit: u32,
    id_prefix: &str,
) -> Vec<Result<ToolCall, ProtocolError>> {
    raw_payloads(message)
        .into_iter()
        .enumerate()
        .map(|(n, (structured, payload))| {
            let id = call_id_for(message, n, id_prefix);
            match structured {
                Some(call) => {
                    if call.name != CLONE_TOOL_NAME {
                        return Err(ProtocolError::UnknownTool(call.name.clone()));
                    }
                    parse_arguments(id, payload, generation_limit, false)
                }
                None => parse_arguments(id, payload, generation_limit, true),
            }
        })
        .collect()
}

/// Id of the `n`-th call of `message` (structured calls first, then inline).
pub fn call_id_for(message: &AssistantMessage, n: usize, id_prefix: &str) -> String {
    match message.tool_calls.get(n) {
        Some(call) if !call.id.is_empty() => call.id.clone(),
        _ => format!("{id_prefix}{n}"),
    }
}

/// Argument JSON for a parsed call, as it is replayed into chat history.
pub fn call_arguments_json(call: &ToolCall) -> String {
    let mut obj = serde_json::Map::new();
    obj.insert("task".into(), Value::String(call.task.clone()));
    if let Some(k) = &call.context_key {
        obj.insert("context_key".into(), Value::String(k.clone()));
    }
    if let Some(m) = call.max_tokens {
        obj.insert("max_tokens".into(), Value::from(m));
    }
    Value::Object(obj).to_string()
}

/// Message content with inline `<tool_call>` blocks removed.
pub fn strip_inline_calls(content: &str) -> String {
    let mut out = String::new();
    let mut rest = content;
    while let Some(start) = rest.find(INLINE_CALL_OPEN) {
        out.push_str(&rest[..start]);
        let body = &rest[start + INLINE_CALL_OPEN.len()..];
        match body.find(INLINE_CALL_CLOSE) {
            Some(end) => rest = &body[end + INLINE_CALL_CLOSE.len()..],
            None => {
                rest = "";
                break;
            }
        }
    }
    out.push_str(rest);
    out.trim().to_owned()
}

/// Parses one argument payload into a [`ToolCall`].
pub fn parse_tool_call(call_id: &str, payload: &str, generation_limit: u32) -> Result<ToolCall, ProtocolError> {
    parse_arguments(call_id.to_owned(), payload, generation_limit, false)
}

fn parse_arguments(
    call_id: String,
    payload: &str,
    generation_limit: u32,
    may_be_wrapped: bool,
) -> Result<ToolCall, ProtocolError> {
    let unrepairable = || ProtocolError::Unrepairable {
        raw: payload.to_owned(),
    };
    let (mut value, mut repaired) = repair_json(payload.as_bytes()).map_err(|_| unrepairable())?;

    // Inline blocks carry {"name": ..., "arguments": ...}.
    if may_be_wrapped {
        if let Some(obj) = value.as_object() {
            if obj.contains_key("arguments") {
                let name = obj.get("name").and_then(Value::as_str).unwrap_or(CLONE_TOOL_NAME);
                if name != CLONE_TOOL_NAME {
                    return Err(ProtocolError::UnknownTool(name.to_owned()));
                }
                let args = obj["arguments"].clone();
                value = match args {
                    Value::String(s) => {
                        let (v, r) = repair_json(s.as_bytes()).map_err(|_| unrepairable())?;
                        repaired |= r;
                        v
                    }
                    other => other,
                };
            }
        }
    }

    let malformed = |reason| ProtocolError::Malformed {
        reason,
        raw: payload.to_owned(),
    };
    let obj = value
        .as_object()
        .ok_or_else(|| malformed("arguments are not an object"))?;
    let task = obj
        .get("task")
        .and_then(Value::as_str)
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .ok_or_else(|| malformed("missing or empty task"))?;
    let context_key = match obj.get("context_key") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => return Err(malformed("context_key is not a string")),
    };
    let max_tokens = match obj.get("max_tokens") {
        None | Some(Value::Null) => None,
        Some(v) => {
            let n = v
                .as_u64()
                .ok_or_else(|| malformed("max_tokens is not a non-negative integer"))?;
            Some(n.min(generation_limit as u64) as u32)
        }
    };
    Ok(ToolCall {
        call_id,
        task: task.to_owned(),
        context_key,
        max_tokens,
        repaired,
    })
}

fn floor_char_boundary(s: &str, mut i: usize) -> usize {
    if i >= s.len() {
        return s.len();
    }
    while !s.is_char_boundary(i) {
        i -= 1;
    }
    i
}

fn ceil_char_boundary(s: &str, mut i: usize) -> usize {
    while i < s.len() && !s.is_char_boundary(i) {
        i += 1;
    }
    i
}

/// Longest prefix of `s` that fits in `max_bytes` without splitting a char.
pub fn truncate_bytes(s: &str, max_bytes: usize) -> &str {
    &s[..floor_char_boundary(s, max_bytes)]
}

/// Longest suffix of `s` that fits in `max_bytes` without splitting a char.
pub fn tail_bytes(s: &str, max_bytes: usize) -> &str {
    if s.len() <= max_bytes {
        return s;
    }
    &s[ceil_char_boundary(s, s.len() - max_bytes)..]
}

/// Pulls the clone's answer out of its full output. With a complete marker
/// pair the innermost span of the last pair is used; otherwise the output's
/// tail stands in for it and the return is flagged unparseable.
pub fn extract_return(raw_output: &str, marker: &MarkerConfig, max_bytes: usize, clone_index: u32) -> CloneReturn {
    if let Some(span) = marked_span(raw_output, marker) {
        let span = span.trim();
        let content = truncate_bytes(span, max_bytes);
        return CloneReturn {
            clone_index,
            truncated: content.len() < span.len(),
            content: content.to_owned(),
            parseable: true,
        };
    }
    CloneReturn {
        clone_index,
        content: tail_bytes(raw_output, max_bytes).to_owned(),
        parseable: false,
        truncated: true,
    }
}

fn marked_span<'a>(text: &'a str, marker: &MarkerConfig) -> Option<&'a str> {
    if marker.open.is_empty() || marker.close.is_empty() {
        return None;
    }
    let mut search_end = text.len();
    while let Some(close) = text[..search_end].rfind(&marker.close) {
        if let Some(open) = text[..close].rfind(&marker.open) {
            return Some(&text[open + marker.open.len()..close]);
        }
        search_end = close;
    }
    None
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolResultEntry {
    pub clone_index: u32,
    pub text: String,
}

/// Join-step output: one labeled entry per clone, in clone order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolResultMessage {
    pub entries: Vec<ToolResultEntry>,
}

impl ToolResultMessage {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_text(&self) -> String {
        let lines: Vec<&str> = self.entries.iter().map(|e| e.text.as_str()).collect();
        lines.join("\n")
    }
}

pub const FLAG_UNVERIFIED: &str = "UNVERIFIED/TRUNCATED";
pub const FLAG_TRUNCATED: &str = "TRUNCATED";
pub const FLAG_EMPTY: &str = "EMPTY";

pub fn render_clone_return(ret: &CloneReturn) -> String {
    let flag = if !ret.parseable {
        Some(FLAG_UNVERIFIED)
    } else if ret.content.is_empty() {
        Some(FLAG_EMPTY)
    } else if ret.truncated {
        Some(FLAG_TRUNCATED)
    } else {
        None
    };
    match flag {
        Some(f) => format!("clone {} [{f}]: {}", ret.clone_index, ret.content),
        None => format!("clone {}: {}", ret.clone_index, ret.content),
    }
}

pub fn render_tool_result(returns: &[CloneReturn]) -> ToolResultMessage {
    ToolResultMessage {
        entries: returns
            .iter()
            .map(|r| ToolResultEntry {
                clone_index: r.clone_index,
                text: render_clone_return(r),
            })
            .collect(),
    }
}

/// Parsed form of a rendered tool result line: `(clone_index, usable, content)`.
pub fn parse_tool_result_line(line: &str) -> Option<(u32, bool, &str)> {
    let rest = line.strip_prefix("clone ")?;
    let (head, content) = rest
        .split_once(": ")
        .or_else(|| rest.strip_suffix(':').map(|h| (h, "")))?;
    let (idx, usable) = match head.split_once(' ') {
        Some((idx, _flag)) => (idx, head.ends_with(&format!("[{FLAG_TRUNCATED}]"))),
        None => (head, true),
    };
    let usable = usable && !content.is_empty();
    Some((idx.parse().ok()?, usable, content))
}

/// Final answer of a root turn: the last `<answer>` span, else the last
/// `\boxed{}` argument, else the trimmed text.
pub fn extract_final_answer(text: &str) -> Option<String> {
    let marker = MarkerConfig {
        open: "<answer>".into(),
        close: "</answer>".into(),
    };
    if let Some(span) = marked_span(text, &marker) {
        return Some(span.trim().to_string());
    }
    if let Some(start) = text.rfind("\\boxed{") {
        let body = &text[start + 7..];
        let mut depth = 1usize;
        for (i, c) in body.char_indices() {
            match c {
                '{' => depth += 1,
                '}' => {
                    depth -= 1;
                    if depth == 0 {
                        return Some(body[..i].trim().to_string());
                    }
                }
                _ => {}
            }
        }
    }
    let t = text.trim();
    (!t.is_empty()).then(|| t.to_string())
}
