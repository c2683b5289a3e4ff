//! Deterministic scripted policies used as regression fixtures.
//!
//! Each script is a pure function of the rollout history: the root re-derives
//! its state from the prompt plus the tool results it has seen.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde_json::json;

use super::read;
use super::{BackendKind, Completion, Determinism, PolicyBackend, PolicyError, PolicyRequest, RolloutRole};
use crate::arith::{evaluate_expr, parse_expr, render_expr, Expr};
use crate::protocol::{AssistantMessage, MarkerConfig, RawToolCall, CLONE_TOOL_NAME};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RootScript {
    /// Spawns one clone per ready sub-expression each turn, substitutes the
    /// returned values and answers once the tree collapses. Unusable returns
    /// are re-delegated up to `max_attempts` times per task.
    Delegator { max_attempts: u32 },
    /// Answers without tools; `correct = false` answers off by one.
    DirectAnswer { correct: bool },
    /// Spawns one clone per left-spine prefix, then finishes from the longest
    /// prefix that came back usable.
    PrefixFanout,
    /// Two-hop lookup through keyed documents held by clones.
    MultiHopKeyed,
    /// Two-hop lookup over documents inlined in its own prompt.
    MultiHopInline,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CloneScript {
    /// Evaluates `compute <expr>` and returns the value inside the marker.
    Exact,
    /// Evaluates correctly but never writes the marker.
    Lazy,
    /// Writes `bytes` of step-by-step chatter and no marker.
    Verbose { bytes: usize },
    /// `Exact` for tasks with at most `max_ops` operators, `Verbose` beyond.
    OpsThreshold { max_ops: u32, bytes: usize },
    /// Answers `What is the <rel> of <entity>?` from the loaded document.
    FactLookup,
}

#[derive(Clone, Debug)]
pub struct ScriptedPolicy {
    pub name: String,
    pub root: RootScript,
    pub clone: CloneScript,
    pub marker: MarkerConfig,
}

const VERBOSE_BYTES: usize = 6000;

impl ScriptedPolicy {
    pub fn new(name: &str, root: RootScript, clone: CloneScript) -> Self {
        ScriptedPolicy {
            name: name.into(),
            root,
            clone,
            marker: MarkerConfig::default(),
        }
    }

    pub fn perfect_delegator() -> Self {
        Self::new(
            "perfect-delegator",
            RootScript::Delegator { max_attempts: 2 },
            CloneScript::Exact,
        )
    }

    pub fn direct_answerer() -> Self {
        Self::new(
            "direct-answerer",
            RootScript::DirectAnswer { correct: true },
            CloneScript::Exact,
        )
    }

    pub fn wrong_answerer() -> Self {
        Self::new(
            "wrong-answerer",
            RootScript::DirectAnswer { correct: false },
            CloneScript::Exact,
        )
    }

    pub fn lazy_clone() -> Self {
        Self::new(
            "lazy-clone",
            RootScript::Delegator { max_attempts: 2 },
            CloneScript::Lazy,
        )
    }

    pub fn verbose_clone() -> Self {
        Self::new(
            "verbose-clone",
            RootScript::Delegator { max_attempts: 2 },
            CloneScript::Verbose { bytes: VERBOSE_BYTES },
        )
    }

    /// Replays the five-prefix fan-out: prefixes with more than three
    /// operators exhaust the clone budget.
    pub fn five_prefix_replayer() -> Self {
        Self::new(
            "five-prefix",
            RootScript::PrefixFanout,
            CloneScript::OpsThreshold {
                max_ops: 3,
                bytes: VERBOSE_BYTES,
            },
        )
    }

    pub fn multi_hop_keyed() -> Self {
        Self::new("multi-hop", RootScript::MultiHopKeyed, CloneScript::FactLookup)
    }

    pub fn multi_hop_inline() -> Self {
        Self::new("multi-hop-inline", RootScript::MultiHopInline, CloneScript::FactLookup)
    }

    /// Looks a library policy up by its CLI name.
    pub fn by_name(name: &str) -> Option<Self> {
        Some(match name {
            "perfect-delegator" => Self::perfect_delegator(),
            "direct-answerer" => Self::direct_answerer(),
            "wrong-answerer" => Self::wrong_answerer(),
            "lazy-clone" => Self::lazy_clone(),
            "verbose-clone" => Self::verbose_clone(),
            "five-prefix" => Self::five_prefix_replayer(),
            "multi-hop" => Self::multi_hop_keyed(),
            "multi-hop-inline" => Self::multi_hop_inline(),
            _ => return None,
        })
    }

    pub const NAMES: [&'static str; 8] = [
        "perfect-delegator",
        "direct-answerer",
        "wrong-answerer",
        "lazy-clone",
        "verbose-clone",
        "five-prefix",
        "multi-hop",
        "multi-hop-inline",
    ];
}

impl PolicyBackend for ScriptedPolicy {
    fn kind(&self) -> BackendKind {
        BackendKind::Scripted
    }

    fn determinism(&self) -> Determinism {
        Determinism::Deterministic
    }

    fn next_message(&self, request: &PolicyRequest<'_>) -> Result<Completion, PolicyError> {
        let message = match request.role {
            RolloutRole::Root => self.root_turn(request),
            RolloutRole::Clone => self.clone_turn(request),
        };
        Ok(Completion::new(message))
    }
}

fn answer(text: &str, value: impl core::fmt::Display) -> AssistantMessage {
    AssistantMessage::text(format!("{text}\n<answer>{value}</answer>"))
}

fn spawn(turn: u32, intro: &str, calls: Vec<(String, Option<String>)>) -> AssistantMessage {
    AssistantMessage {
        content: intro.into(),
        tool_calls: calls
            .into_iter()
            .enumerate()
            .map(|(k, (task, key))| {
                let args = match key {
                    Some(key) => json!({ "task": task, "context_key": key }),
                    None => json!({ "task": task }),
                };
                RawToolCall {
                    id: format!("call_{turn}_{k}"),
                    name: CLONE_TOOL_NAME.into(),
                    arguments: args.to_string(),
                }
            })
            .collect(),
    }
}

fn compute_task(e: &Expr) -> String {
    let text = render_expr(e);
    let bare = match e {
        Expr::Binary { .. } => &text[1..text.len() - 1],
        Expr::Leaf(_) => &text,
    };
    format!("compute {bare}")
}

type Log = BTreeMap<String, (u32, Option<String>)>;

fn known_value(log: &Log, task: &str) -> Option<i128> {
    log.get(task)
        .and_then(|(_, v)| v.as_deref())
        .and_then(crate::arith::normalize_answer)
}

/// Substitutes every sub-expression whose task already came back usable.
fn reduce(e: &Expr, log: &Log) -> Expr {
    match e {
        Expr::Leaf(_) => e.clone(),
        Expr::Binary { op, lhs, rhs } => {
            let l = reduce(lhs, log);
            let r = reduce(rhs, log);
            let node = Expr::binary(*op, l, r);
            if let Expr::Binary { lhs, rhs, .. } = &node {
                if matches!(**lhs, Expr::Leaf(_)) && matches!(**rhs, Expr::Leaf(_)) {
                    if let Some(v) = known_value(log, &compute_task(&node)) {
                        return Expr::Leaf(v);
                    }
                }
            }
            node
        }
    }
}

/// Binary nodes whose children are both leaves, left to right.
fn ready_nodes<'a>(e: &'a Expr, out: &mut Vec<&'a Expr>) {
    if let Expr::Binary { lhs, rhs, .. } = e {
        if matches!(**lhs, Expr::Leaf(_)) && matches!(**rhs, Expr::Leaf(_)) {
            out.push(e);
        } else {
            ready_nodes(lhs, out);
            ready_nodes(rhs, out);
        }
    }
}

/// Left-spine nodes, innermost first: for `((a+b)×c)+d` that is
/// `a+b`, `(a+b)×c`, `((a+b)×c)+d`.
fn left_spine(e: &Expr) -> Vec<&Expr> {
    let mut spine = Vec::new();
    let mut cur = e;
    while let Expr::Binary { lhs, .. } = cur {
        spine.push(cur);
        cur = lhs;
    }
    spine.reverse();
    spine
}

fn slug(entity: &str) -> String {
    let mut s = String::from("doc:");
    let mut last_us = false;
    for c in entity.trim().chars() {
        if c.is_alphanumeric() {
            s.extend(c.to_lowercase());
            last_us = false;
        } else if !last_us && s.len() > 4 {
            s.push('_');
            last_us = true;
        }
    }
    while s.ends_with('_') {
        s.pop();
    }
    s
}

/// Splits `What is the <outer> of the <inner> of <entity>?`.
fn two_hop_question(q: &str) -> Option<(&str, &str, &str)> {
    let rest = q.trim().strip_prefix("What is the ")?;
    let (outer, rest) = rest.split_once(" of the ")?;
    let (inner, entity) = rest.split_once(" of ")?;
    Some((outer.trim(), inner.trim(), entity.trim().trim_end_matches('?').trim()))
}

/// Splits `What is the <rel> of <entity>?`.
fn one_hop_question(q: &str) -> Option<(&str, &str)> {
    let rest = q.trim().strip_prefix("What is the ")?;
    let (rel, entity) = rest.split_once(" of ")?;
    Some((rel.trim(), entity.trim().trim_end_matches('?').trim()))
}

/// Value of a `<rel>: <value>` line in a document.
fn fact(document: &str, rel: &str) -> Option<String> {
    document.lines().find_map(|l| {
        let (k, v) = l.split_once(':')?;
        k.trim().eq_ignore_ascii_case(rel).then(|| v.trim().to_string())
    })
}

/// `Document <key>:` sections of a prompt.
fn documents(prompt: &str) -> BTreeMap<String, String> {
    let mut docs = BTreeMap::new();
    let mut current: Option<(String, String)> = None;
    for line in prompt.lines() {
        if let Some(key) = line.strip_prefix("Document ").and_then(|l| l.strip_suffix(':')) {
            if let Some((k, body)) = current.take() {
                docs.insert(k, body);
            }
            current = Some((key.trim().to_string(), String::new()));
        } else if let Some((_, body)) = current.as_mut() {
            body.push_str(line);
            body.push('\n');
        }
    }
    if let Some((k, body)) = current {
        docs.insert(k, body);
    }
    docs
}

impl ScriptedPolicy {
    fn root_turn(&self, req: &PolicyRequest<'_>) -> AssistantMessage {
        let prompt = req.prompt();
        let tools = req.tools.is_some();
        match &self.root {
            RootScript::DirectAnswer { correct } => {
                let Some(v) = read::labeled(prompt, "Expression:")
                    .and_then(|e| parse_expr(e).ok())
                    .and_then(|e| evaluate_expr(&e).ok())
                else {
                    return answer("I cannot parse this task.", "unknown");
                };
                let v = if *correct { v } else { v + 1 };
                answer(&format!("Working it out directly, the value is {v}."), v)
            }
            RootScript::Delegator { max_attempts } => {
                let Some(expr) = read::labeled(prompt, "Expression:").and_then(|e| parse_expr(e).ok()) else {
                    return answer("I cannot parse this task.", "unknown");
                };
                let log = read::delegation_log(req.history);
                let reduced = reduce(&expr, &log);
                if let Expr::Leaf(v) = reduced {
                    return answer(&format!("All parts are in; the value is {v}."), v);
                }
                if !tools {
                    return answer("No tools available.", "unknown");
                }
                let mut ready = Vec::new();
                ready_nodes(&reduced, &mut ready);
                let calls: Vec<(String, Option<String>)> = ready
                    .into_iter()
                    .map(compute_task)
                    .filter(|t| log.get(t).map(|(n, _)| *n < *max_attempts).unwrap_or(true))
                    .map(|t| (t, None))
                    .collect();
                if calls.is_empty() {
                    return answer("Delegation failed; giving up.", "unknown");
                }
                spawn(
                    req.turn,
                    &format!("Delegating {} independent sub-expressions.", calls.len()),
                    calls,
                )
            }
            RootScript::PrefixFanout => {
                let Some(expr) = read::labeled(prompt, "Expression:").and_then(|e| parse_expr(e).ok()) else {
                    return answer("I cannot parse this task.", "unknown");
                };
                let log = read::delegation_log(req.history);
                let spine = left_spine(&expr);
                if log.is_empty() {
                    if !tools || spine.is_empty() {
                        return answer("Nothing to delegate.", evaluate_expr(&expr).unwrap_or_default());
                    }
                    let calls = spine.iter().map(|e| (compute_task(e), None)).collect();
                    return spawn(req.turn, "One clone per prefix.", calls);
                }
                // Longest prefix that came back usable.
                let Some((k, v)) = spine
                    .iter()
                    .enumerate()
                    .rev()
                    .find_map(|(k, e)| known_value(&log, &compute_task(e)).map(|v| (k, v)))
                else {
                    return answer("No prefix came back usable.", "unknown");
                };
                if k + 1 == spine.len() {
                    return answer(&format!("The full expression came back as {v}."), v);
                }
                let mut rest = Expr::Leaf(v);
                for node in &spine[k + 1..] {
                    if let Expr::Binary { op, rhs, .. } = node {
                        rest = Expr::binary(*op, rest, (**rhs).clone());
                    }
                }
                let task = compute_task(&rest);
                if let Some(done) = known_value(&log, &task) {
                    return answer(&format!("Finishing from prefix {}: {done}.", k + 1), done);
                }
                if log.contains_key(&task) {
                    return answer("The recovery clone failed too.", "unknown");
                }
                spawn(
                    req.turn,
                    &format!("Prefixes beyond {} are unusable; continuing from {v}.", k + 1),
                    alloc::vec![(task, None)],
                )
            }
            RootScript::MultiHopKeyed => {
                let Some((outer, inner, entity)) = read::labeled(prompt, "Question:").and_then(two_hop_question) else {
                    return answer("I cannot parse this question.", "unknown");
                };
                let log = read::delegation_log(req.history);
                let first = format!("What is the {inner} of {entity}?");
                let Some(bridge) = log.get(&first).and_then(|(_, v)| v.clone()) else {
                    if log.contains_key(&first) || !tools {
                        return answer("The first hop failed.", "unknown");
                    }
                    return spawn(
                        req.turn,
                        "Looking up the first hop.",
                        alloc::vec![(first, Some(slug(entity)))],
                    );
                };
                let second = format!("What is the {outer} of {bridge}?");
                match log.get(&second) {
                    Some((_, Some(v))) => answer(&format!("{bridge} leads to {v}."), v),
                    Some(_) => answer("The second hop failed.", "unknown"),
                    None => spawn(
                        req.turn,
                        &format!("First hop gave {bridge}; looking up the second hop."),
                        alloc::vec![(second, Some(slug(&bridge)))],
                    ),
                }
            }
            RootScript::MultiHopInline => {
                let Some((outer, inner, entity)) = read::labeled(prompt, "Question:").and_then(two_hop_question) else {
                    return answer("I cannot parse this question.", "unknown");
                };
                let docs = documents(prompt);
                let bridge = docs.get(&slug(entity)).and_then(|d| fact(d, inner));
                let result = bridge
                    .as_ref()
                    .and_then(|b| docs.get(&slug(b)))
                    .and_then(|d| fact(d, outer));
                match result {
                    Some(v) => answer("Read both hops from the context.", v),
                    None => answer("The context does not contain the answer.", "unknown"),
                }
            }
        }
    }

    fn clone_turn(&self, req: &PolicyRequest<'_>) -> AssistantMessage {
        let prompt = req.prompt();
        let task = read::labeled(prompt, "Task:").unwrap_or("");
        let expr = task.strip_prefix("compute ").and_then(|e| parse_expr(e).ok());
        match &self.clone {
            CloneScript::Exact => match expr.as_ref().and_then(|e| evaluate_expr(e).ok()) {
                Some(v) => AssistantMessage::text(format!("Evaluating {task}.\n{}", self.marker.wrap(&v.to_string()))),
                None => AssistantMessage::text(format!("I could not evaluate this.\n{}", self.marker.wrap("error"))),
            },
            CloneScript::Lazy => match expr.as_ref().and_then(|e| evaluate_expr(e).ok()) {
                Some(v) => AssistantMessage::text(format!("The result is {v}.")),
                None => AssistantMessage::text("No idea."),
            },
            CloneScript::Verbose { bytes } => AssistantMessage::text(chatter(task, *bytes)),
            CloneScript::OpsThreshold { max_ops, bytes } => match expr {
                Some(e) if e.op_count() <= *max_ops => match evaluate_expr(&e) {
                    Ok(v) => {
                        AssistantMessage::text(format!("Evaluating {task}.\n{}", self.marker.wrap(&v.to_string())))
                    }
                    Err(_) => AssistantMessage::text(chatter(task, *bytes)),
                },
                _ => AssistantMessage::text(chatter(task, *bytes)),
            },
            CloneScript::FactLookup => {
                let document = read::section(prompt, "\nDocument ")
                    .map(|d| d.split_once('\n').map(|(_, body)| body).unwrap_or(""))
                    .unwrap_or("");
                let value = one_hop_question(task).and_then(|(rel, _)| fact(document, rel));
                match value {
                    Some(v) => AssistantMessage::text(format!("Found it in the document.\n{}", self.marker.wrap(&v))),
                    None => AssistantMessage::text(format!("Not in the document.\n{}", self.marker.wrap("unknown"))),
                }
            }
        }
    }
}

/// Long-winded working that never reaches an answer marker.
fn chatter(task: &str, bytes: usize) -> String {
    let mut out = format!("Let me work through {task} digit by digit.\n");
    let mut step = 1;
    while out.len() < bytes {
        out.push_str(&format!(
            "Step {step}: carry the partial product and re-check the previous column before moving on.\n"
        ));
        step += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::ChatMessage;
    use alloc::vec;

    fn root_request<'a>(history: &'a [ChatMessage], tools: &'a [serde_json::Value]) -> PolicyRequest<'a> {
        PolicyRequest {
            role: RolloutRole::Root,
            depth: 0,
            turn: 0,
            history,
            tools: Some(tools),
            max_tokens: 1024,
            seed: 0,
        }
    }

    #[test]
    fn delegator_first_turn_spawns_ready_nodes() {
        let history = vec![
            ChatMessage::system("sys"),
            ChatMessage::user("Compute.\nExpression: ((3+4)×5)\n"),
        ];
        let tools = [crate::protocol::clone_tool_schema()];
        let msg = ScriptedPolicy::perfect_delegator()
            .next_message(&root_request(&history, &tools))
            .unwrap()
            .message;
        assert_eq!(msg.tool_calls.len(), 1);
        assert!(msg.tool_calls[0].arguments.contains("\"compute 3+4\""));
    }

    #[test]
    fn exact_clone_returns_marker() {
        let history = vec![
            ChatMessage::system("sys"),
            ChatMessage::user("Task: compute 3483838+239"),
        ];
        let req = PolicyRequest {
            role: RolloutRole::Clone,
            depth: 1,
            turn: 0,
            history: &history,
            tools: None,
            max_tokens: 1024,
            seed: 0,
        };
        let msg = ScriptedPolicy::perfect_delegator().next_message(&req).unwrap().message;
        assert!(msg.content.ends_with("<return>3484077</return>"));
    }

    #[test]
    fn scripted_is_referentially_transparent() {
        let history = vec![
            ChatMessage::system("sys"),
            ChatMessage::user("Expression: ((1+2)×(3+4))"),
        ];
        let tools = [crate::protocol::clone_tool_schema()];
        let p = ScriptedPolicy::perfect_delegator();
        let a = p.next_message(&root_request(&history, &tools)).unwrap();
        let b = p.next_message(&root_request(&history, &tools)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.message.tool_calls.len(), 2);
    }

    #[test]
    fn question_parsing() {
        assert_eq!(
            two_hop_question("What is the spouse of the director of Night Harbor?"),
            Some(("spouse", "director", "Night Harbor"))
        );
        assert_eq!(
            one_hop_question("What is the director of Night Harbor?"),
            Some(("director", "Night Harbor"))
        );
        assert_eq!(slug("Night Harbor"), "doc:night_harbor");
        assert_eq!(slug(" Jean-Luc  Dupont "), "doc:jean_luc_dupont");
    }

    #[test]
    fn spine_of_five_prefix_expression() {
        let e = parse_expr("(3483838+239)×5709526+8803−5446472+5530030").unwrap();
        let spine = left_spine(&e);
        assert_eq!(spine.len(), 5);
        assert_eq!(render_expr(spine[0]), "(3483838+239)");
        assert_eq!(spine.iter().map(|e| e.op_count()).collect::<Vec<_>>(), [1, 2, 3, 4, 5]);
    }

    #[test]
    fn library_names_resolve() {
        for n in ScriptedPolicy::NAMES {
            assert_eq!(ScriptedPolicy::by_name(n).unwrap().name, n);
        }
        assert!(ScriptedPolicy::by_name("nope").is_none());
    }
}
