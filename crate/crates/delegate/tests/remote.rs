use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;

use delegate::commands::run_eval;
use delegate::remote::{RemoteBackend, RemoteConfig};
use delegate::RunConfig;
use delegate_core::orchestrator::{StandardEnv, TaskSpec};
use delegate_core::policy::{ChatMessage, PolicyBackend, PolicyError, PolicyRequest, RolloutRole};
use delegate_core::Orchestrator;
use serde_json::{json, Value};

type Handler = dyn Fn(&Value) -> (u16, String) + Send + Sync;

/// Minimal HTTP/1.1 server: one request per connection.
struct Mock {
    url: String,
    hits: Arc<AtomicUsize>,
}

fn serve(handler: Arc<Handler>) -> Mock {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let h = hits.clone();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(stream) = stream else { continue };
            let handler = handler.clone();
            let h = h.clone();
            thread::spawn(move || answer(stream, &*handler, &h));
        }
    });
    Mock { url, hits }
}

fn answer(stream: TcpStream, handler: &Handler, hits: &AtomicUsize) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut len = 0usize;
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line).unwrap_or(0) == 0 {
            return;
        }
        let line = line.trim_end();
        if line.is_empty() {
            break;
        }
        if let Some((k, v)) = line.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                len = v.trim().parse().unwrap();
            }
        }
    }
    let mut body = vec![0; len];
    reader.read_exact(&mut body).unwrap();
    hits.fetch_add(1, Ordering::SeqCst);
    let req: Value = serde_json::from_slice(&body).unwrap();
    let (status, text) = handler(&req);
    let mut out = stream;
    let _ = write!(
        out,
        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
        text.len()
    );
}

fn completion(content: &str) -> String {
    json!({
        "choices": [{"message": {"role": "assistant", "content": content}, "finish_reason": "stop"}],
        "usage": {"prompt_tokens": 30, "completion_tokens": 5}
    })
    .to_string()
}

fn config(url: &str) -> RemoteConfig {
    RemoteConfig {
        base_url: url.into(),
        model: "test-model".into(),
        max_retries: 2,
        backoff_ms: 1,
        timeout_secs: 10,
        ..RemoteConfig::default()
    }
}

fn request<'a>(history: &'a [ChatMessage], tools: &'a [Value]) -> PolicyRequest<'a> {
    PolicyRequest {
        role: RolloutRole::Root,
        depth: 0,
        turn: 0,
        history,
        tools: Some(tools),
        max_tokens: 64,
        seed: 99,
    }
}

#[test]
fn canned_completion_round_trip() {
    let seen = Arc::new(std::sync::Mutex::new(Value::Null));
    let s = seen.clone();
    let mock = serve(Arc::new(move |req: &Value| {
        *s.lock().unwrap() = req.clone();
        (200, completion("<answer>42</answer>"))
    }));
    let backend = RemoteBackend::new(config(&mock.url), Some("sk-test".into()));
    let history = vec![ChatMessage::system("sys"), ChatMessage::user("what is 6*7")];
    let tools = vec![delegate_core::protocol::clone_tool_schema()];
    let c = backend.next_message(&request(&history, &tools)).unwrap();
    assert_eq!(c.message.content, "<answer>42</answer>");
    assert_eq!(c.usage.unwrap().prompt_tokens, 30);
    let req = seen.lock().unwrap().clone();
    assert_eq!(req["model"], "test-model");
    assert_eq!(req["seed"], 99);
    assert_eq!(req["max_tokens"], 64);
    assert_eq!(req["messages"][1]["content"], "what is 6*7");
    assert_eq!(req["tools"][0]["function"]["name"], "clone");
}

#[test]
fn server_error_is_a_transport_failure_after_retries() {
    let mock = serve(Arc::new(|_: &Value| (500, "{\"error\":\"boom\"}".into())));
    let backend = RemoteBackend::new(config(&mock.url), None);
    let history = vec![ChatMessage::user("x")];
    let err = backend.next_message(&request(&history, &[])).unwrap_err();
    match err {
        PolicyError::Transport {
            status,
            attempts,
            retryable,
            ..
        } => {
            assert_eq!(status, Some(500));
            assert_eq!(attempts, 3);
            assert!(retryable);
        }
        other => panic!("expected transport error, got {other:?}"),
    }
    assert_eq!(mock.hits.load(Ordering::SeqCst), 3);
}

#[test]
fn client_error_is_not_retried() {
    let mock = serve(Arc::new(|_: &Value| (400, "{}".into())));
    let backend = RemoteBackend::new(config(&mock.url), None);
    let history = vec![ChatMessage::user("x")];
    let err = backend.next_message(&request(&history, &[])).unwrap_err();
    assert!(matches!(
        err,
        PolicyError::Transport {
            status: Some(400),
            attempts: 1,
            retryable: false,
            ..
        }
    ));
}

#[test]
fn failed_episode_produces_no_trajectory() {
    let mock = serve(Arc::new(|_: &Value| (500, "{}".into())));
    let backend = RemoteBackend::new(config(&mock.url), None);
    let task = TaskSpec::qa("q", "Who?", "Ada", vec![]);
    let err = Orchestrator::default()
        .run_episode(&task, &backend, &StandardEnv::new(), 1)
        .unwrap_err();
    assert!(err.to_string().contains("HTTP 500"), "{err}");
}

#[test]
fn refused_connection_is_a_transport_failure() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let backend = RemoteBackend::new(config(&format!("http://127.0.0.1:{port}")), None);
    let history = vec![ChatMessage::user("x")];
    let err = backend.next_message(&request(&history, &[])).unwrap_err();
    assert!(matches!(err, PolicyError::Transport { status: None, .. }));
}

fn dataset(dir: &std::path::Path, n: u64) -> std::path::PathBuf {
    let path = dir.join("ds.jsonl");
    delegate::commands::gen_dataset(&delegate_core::GenConfig::with_seed(5), n, &path).unwrap();
    path
}

fn remote_run(dir: &std::path::Path, url: &str) -> RunConfig {
    let mut c = RunConfig {
        dataset: dataset(dir, 4),
        output_dir: dir.join("run"),
        workers: 4,
        ..RunConfig::default()
    };
    c.policy.backend = "remote".into();
    c.policy.remote = config(url);
    c
}

#[test]
fn partial_failures_are_unscored_and_the_run_continues() {
    let dir = tempfile::tempdir().unwrap();
    let first = delegate::io::read_tasks(&dataset(dir.path(), 4)).unwrap()[0]
        .question
        .clone();
    let mock = serve(Arc::new(move |req: &Value| {
        let prompt = req["messages"][1]["content"].as_str().unwrap_or("");
        if prompt.contains(&first) {
            (503, "{}".into())
        } else {
            (200, completion("<answer>0</answer>"))
        }
    }));
    let out = run_eval(&remote_run(dir.path(), &mock.url)).unwrap();
    assert_eq!(out.unscored.len(), 4);
    assert_eq!(out.trajectories.len(), 12);
    assert_eq!(out.report.metrics.unscored, 4);
    assert_eq!(out.report.metrics.episodes, 12);
    let unscored: Vec<Value> = delegate::io::read_jsonl(&dir.path().join("run/unscored.jsonl")).unwrap();
    assert_eq!(unscored.len(), 4);
    assert!(unscored.iter().all(|u| u["task_index"] == 0));
}

#[test]
fn majority_failure_is_a_run_error() {
    let dir = tempfile::tempdir().unwrap();
    let mock = serve(Arc::new(|_: &Value| (500, "{}".into())));
    let err = run_eval(&remote_run(dir.path(), &mock.url))
        .err()
        .expect("run must fail");
    assert!(err.to_string().contains("more than half"), "{err}");
    // The failures are still on disk for inspection.
    assert!(dir.path().join("run/unscored.jsonl").exists());
    assert!(!dir.path().join("run/trajectories.jsonl").exists());
}
