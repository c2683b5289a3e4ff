//! Chat-completions client for OpenAI-compatible inference servers.

use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use delegate_core::policy::{
    BackendKind, ChatMessage, ChatRole, Completion, Determinism, FinishReason, PolicyBackend, PolicyError,
    PolicyRequest, Usage,
};
use delegate_core::protocol::{AssistantMessage, RawToolCall};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub const DEFAULT_API_KEY_ENV: &str = "DELEGATE_API_KEY";
pub const BASE_URL_ENV: &str = "DELEGATE_BASE_URL";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
    pub temperature: f64,
    pub top_p: f64,
    pub timeout_secs: u64,
    /// Extra attempts after the first on retryable failures.
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub max_in_flight: usize,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig {
            base_url: "http://localhost:8000".into(),
            model: "default".into(),
            api_key_env: DEFAULT_API_KEY_ENV.into(),
            temperature: 1.0,
            top_p: 1.0,
            timeout_secs: 120,
            max_retries: 3,
            backoff_ms: 500,
            max_in_flight: 16,
        }
    }
}

/// Counting semaphore capping concurrent requests.
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Gate {
    fn acquire(&self) -> GatePermit<'_> {
        let mut free = self.free.lock().expect("gate lock");
        while *free == 0 {
            free = self.cv.wait(free).expect("gate lock");
        }
        *free -= 1;
        GatePermit(self)
    }
}

struct GatePermit<'a>(&'a Gate);

impl Drop for GatePermit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("gate lock") += 1;
        self.0.cv.notify_one();
    }
}

pub struct RemoteBackend {
    config: RemoteConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
    gate: Gate,
}

impl RemoteBackend {
    /// Reads the credential from the configured environment variable; a
    /// `DELEGATE_BASE_URL` in the environment overrides the configured URL.
    pub fn from_env(mut config: RemoteConfig) -> Self {
        if let Ok(url) = std::env::var(BASE_URL_ENV) {
            if !url.is_empty() {
                config.base_url = url;
            }
        }
        let key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        Self::new(config, key)
    }

    pub fn new(config: RemoteConfig, api_key: Option<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        let gate = Gate {
            free: Mutex::new(config.max_in_flight.max(1)),
            cv: Condvar::new(),
        };
        RemoteBackend {
            config,
            api_key,
            agent,
            gate,
        }
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn endpoint(&self) -> String {
        format!("{}/v1/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    pub fn request_body(&self, request: &PolicyRequest<'_>) -> Value {
        let messages: Vec<Value> = request.history.iter().map(wire_message).collect();
        let mut body = json!({
            "model": self.config.model,
            "messages": messages,
            "max_tokens": request.max_tokens,
            "temperature": self.config.temperature,
            "top_p": self.config.top_p,
            "seed": request.seed,
        });
        if let Some(tools) = request.tools {
            body["tools"] = Value::Array(tools.to_vec());
        }
        body
    }

    /// One HTTP round trip: `Ok` on 2xx, otherwise `(status, message, retryable)`.
    fn attempt(&self, body: &Value) -> Result<Value, (Option<u16>, String, bool)> {
        let mut req = self
            .agent
            .post(self.endpoint())
            .header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = match req.send_json(body) {
            Ok(r) => r,
            Err(e) => return Err((None, e.to_string(), true)),
        };
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| (Some(status), e.to_string(), true))?;
        if !(200..300).contains(&status) {
            let retryable = status == 408 || status == 429 || status >= 500;
            let snippet: String = text.chars().take(200).collect();
            return Err((Some(status), format!("HTTP {status}: {snippet}"), retryable));
        }
        serde_json::from_str(&text).map_err(|e| (Some(status), format!("response is not JSON: {e}"), false))
    }
}

fn wire_message(m: &ChatMessage) -> Value {
    let role = match m.role {
        ChatRole::System => "system",
        ChatRole::User => "user",
        ChatRole::Assistant => "assistant",
        ChatRole::Tool => "tool",
    };
    let mut v = json!({ "role": role, "content": m.content });
    if !m.tool_calls.is_empty() {
        v["tool_calls"] = m
            .tool_calls
            .iter()
            .map(|c| {
                json!({
                    "id": c.id,
                    "type": "function",
                    "function": { "name": c.name, "arguments": c.arguments },
                })
            })
            .collect();
    }
    if let Some(id) = &m.tool_call_id {
        v["tool_call_id"] = Value::String(id.clone());
    }
    v
}

/// Parses a chat-completions response body.
pub fn parse_response(body: &Value) -> Result<Completion, PolicyError> {
    let invalid = |m: &str| PolicyError::InvalidResponse(m.to_string());
    let choice = body
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| invalid("no choices"))?;
    let msg = choice.get("message").ok_or_else(|| invalid("choice without message"))?;
    let content = msg.get("content").and_then(Value::as_str).unwrap_or("").to_string();
    let mut tool_calls = Vec::new();
    if let Some(calls) = msg.get("tool_calls").and_then(Value::as_array) {
        for c in calls {
            let f = c.get("function").ok_or_else(|| invalid("tool call without function"))?;
            let arguments = match f.get("arguments") {
                Some(Value::String(s)) => s.clone(),
                Some(other) => other.to_string(),
                None => String::new(),
            };
            tool_calls.push(RawToolCall {
                id: c.get("id").and_then(Value::as_str).unwrap_or("").to_string(),
                name: f.get("name").and_then(Value::as_str).unwrap_or("").to_string(),
                arguments,
            });
        }
    }
    let finish = match choice.get("finish_reason").and_then(Value::as_str) {
        Some("length") => FinishReason::Length,
        _ => FinishReason::Stop,
    };
    let usage = body.get("usage").and_then(|u| {
        Some(Usage {
            prompt_tokens: u.get("prompt_tokens")?.as_u64()? as u32,
            completion_tokens: u.get("completion_tokens")?.as_u64()? as u32,
        })
    });
    Ok(Completion {
        message: AssistantMessage { content, tool_calls },
        usage,
        finish,
    })
}

impl PolicyBackend for RemoteBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Remote
    }

    fn determinism(&self) -> Determinism {
        Determinism::External
    }

    fn next_message(&self, request: &PolicyRequest<'_>) -> Result<Completion, PolicyError> {
        let body = self.request_body(request);
        let _permit = self.gate.acquire();
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(&body) {
                Ok(v) => return parse_response(&v),
                Err((status, message, retryable)) => {
                    if !retryable || attempts > self.config.max_retries {
                        return Err(PolicyError::Transport {
                            message,
                            status,
                            attempts,
                            retryable,
                        });
                    }
                    let wait = self.config.backoff_ms.saturating_mul(1 << (attempts - 1).min(6));
                    thread::sleep(Duration::from_millis(wait));
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_tool_calls_and_usage() {
        let body = json!({
            "choices": [{
                "message": {
                    "content": null,
                    "tool_calls": [{"id": "x1", "type": "function",
                        "function": {"name": "clone", "arguments": "{\"task\": \"compute 1+1\"}"}}]
                },
                "finish_reason": "tool_calls"
            }],
            "usage": {"prompt_tokens": 40, "completion_tokens": 12}
        });
        let c = parse_response(&body).unwrap();
        assert_eq!(c.message.content, "");
        assert_eq!(c.message.tool_calls[0].id, "x1");
        assert_eq!(c.usage.unwrap().completion_tokens, 12);
        assert_eq!(c.finish, FinishReason::Stop);
        assert!(parse_response(&json!({"choices": []})).is_err());
    }

    #[test]
    fn wire_format_carries_tool_ids() {
        let m = ChatMessage::tool("x1", "clone 0: 2");
        let v = wire_message(&m);
        assert_eq!(v["role"], "tool");
        assert_eq!(v["tool_call_id"], "x1");
    }
}
