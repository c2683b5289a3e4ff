//! The joint episode: a root rollout whose clone calls spawn child rollouts
//! that share the same policy backend.
//!
//! Scheduling is per message. Every request seed is a function of the
//! episode seed, the rollout's position in the spawn tree and its turn, so the
//! assembled [`Trajectory`] does not depend on which clones ran first.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::credit::{compute_reward, RewardConfig};
use crate::policy::{ChatMessage, FinishReason, PolicyBackend, PolicyError, PolicyRequest, RolloutRole};
use crate::protocol::{
    call_arguments_json, clone_tool_schema, extract_final_answer, extract_return, parse_tool_calls_with_prefix,
    render_clone_return, strip_inline_calls, AssistantMessage, CloneReturn, MarkerConfig, ProtocolError, RawToolCall,
    ToolCall, CLONE_TOOL_NAME, DEFAULT_MAX_RETURN_BYTES,
};
use crate::seed::mix_seed;
use crate::tokens::{count_tokens, truncate_to_tokens, TokenCounter};

mod env;

pub use env::{
    expand_context_key, ClonePromptOptions, ContextMode, ContextRecord, ContextStore, EnvAdapter, EnvError,
    PromptParts, StandardEnv, TaskKind, TaskSpec, PROMPT_VERSION, REPROMPT, ROOT_SYSTEM_PROMPT,
};

pub const TRAJECTORY_SCHEMA_VERSION: u32 = 1;

pub const FLAG_PROMPT_TRUNCATED: &str = "prompt_truncated";
pub const FLAG_USAGE_MISSING: &str = "usage_missing";
pub const FLAG_FORCED_REPROMPT: &str = "forced_reprompt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    System,
    User,
    Generated,
    ToolResult,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub origin: Origin,
    pub text: String,
    pub token_count: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutStatus {
    Completed,
    TruncatedByTokenLimit,
    TruncatedByTurnLimit,
    ProtocolError,
}

impl RolloutStatus {
    pub fn is_unfinished(self) -> bool {
        matches!(
            self,
            RolloutStatus::TruncatedByTokenLimit | RolloutStatus::TruncatedByTurnLimit
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RolloutStatus::Completed => "completed",
            RolloutStatus::TruncatedByTokenLimit => "truncated_by_token_limit",
            RolloutStatus::TruncatedByTurnLimit => "truncated_by_turn_limit",
            RolloutStatus::ProtocolError => "protocol_error",
        }
    }
}

/// Position of a call in its parent's transcript.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CallSite {
    pub turn: u32,
    pub call_index: u32,
}

/// A clone's location in the spawn tree: call sites from the root down.
pub type ClonePath = Vec<CallSite>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParentCall {
    pub parent: u32,
    pub turn: u32,
    pub call_index: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rollout {
    pub rollout_id: u32,
    pub role: RolloutRole,
    pub depth: u32,
    pub parent_call: Option<ParentCall>,
    pub generation_limit: u32,
    pub segments: Vec<Segment>,
    pub status: RolloutStatus,
    pub generated_tokens: u32,
    pub clone_return: Option<CloneReturn>,
    /// Calls this rollout issued whose arguments needed JSON repair.
    pub repaired_calls: u32,
    pub tool_turns: u32,
}

impl Rollout {
    /// All generated text, turns separated by newlines.
    pub fn generated_text(&self) -> String {
        let parts: Vec<&str> = self
            .segments
            .iter()
            .filter(|s| s.origin == Origin::Generated)
            .map(|s| s.text.as_str())
            .collect();
        parts.join("\n")
    }

    /// Text of the last generated turn.
    pub fn final_text(&self) -> &str {
        self.segments
            .iter()
            .rev()
            .find(|s| s.origin == Origin::Generated)
            .map(|s| s.text.as_str())
            .unwrap_or("")
    }

    pub fn context_tokens(&self) -> u64 {
        self.segments.iter().map(|s| s.token_count as u64).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub schema_version: u32,
    pub trajectory_id: String,
    pub task_id: String,
    pub seed: u64,
    pub rollouts: Vec<Rollout>,
    /// Root turn -> ids of the clones spawned on that turn.
    pub spawn_tree: BTreeMap<u32, Vec<u32>>,
    pub final_answer: Option<String>,
    pub rt_tokens: u32,
    /// Generated tokens per clone, in rollout-id order.
    pub clone_tokens: Vec<u32>,
    pub total_context_tokens: u64,
    pub repaired_calls: u32,
    pub correct: Option<bool>,
    pub reward: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
    /// Set by batch runners: which GRPO group this episode belongs to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<GroupTag>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupTag {
    pub group_id: String,
    pub member: u32,
    pub size: u32,
}

impl Trajectory {
    pub fn root(&self) -> &Rollout {
        &self.rollouts[0]
    }

    pub fn clones(&self) -> impl Iterator<Item = &Rollout> {
        self.rollouts.iter().filter(|r| r.role == RolloutRole::Clone)
    }

    pub fn clone_count(&self) -> usize {
        self.clones().count()
    }

    /// Root plus clone generated tokens.
    pub fn generated_tokens(&self) -> u64 {
        self.rollouts.iter().map(|r| r.generated_tokens as u64).sum()
    }

    pub fn has_flag(&self, flag: &str) -> bool {
        self.flags.iter().any(|f| f == flag)
    }

    /// Spawn-tree path of a rollout, root first.
    pub fn path_of(&self, rollout_id: u32) -> Option<ClonePath> {
        let mut path = Vec::new();
        let mut cur = self.rollouts.get(rollout_id as usize)?;
        while let Some(pc) = cur.parent_call {
            path.push(CallSite {
                turn: pc.turn,
                call_index: pc.call_index,
            });
            cur = self.rollouts.get(pc.parent as usize)?;
        }
        path.reverse();
        Some(path)
    }

    /// Checks the structural invariants; returns the first violation.
    pub fn validate(&self) -> Result<(), String> {
        let roots = self.rollouts.iter().filter(|r| r.role == RolloutRole::Root).count();
        if roots != 1 || self.rollouts.first().map(|r| r.role) != Some(RolloutRole::Root) {
            return Err("exactly one root, at id 0".into());
        }
        for (i, r) in self.rollouts.iter().enumerate() {
            if r.rollout_id as usize != i {
                return Err(format!("rollout {i} carries id {}", r.rollout_id));
            }
            let generated: u32 = r
                .segments
                .iter()
                .filter(|s| s.origin == Origin::Generated)
                .map(|s| s.token_count)
                .sum();
            if generated != r.generated_tokens {
                return Err(format!("rollout {i}: generated_tokens mismatch"));
            }
            if r.generated_tokens > r.generation_limit {
                return Err(format!("rollout {i}: over its generation limit"));
            }
            if r.status == RolloutStatus::TruncatedByTokenLimit && r.generated_tokens < r.generation_limit {
                return Err(format!("rollout {i}: token-limit status below the limit"));
            }
            if (r.role == RolloutRole::Clone) != r.parent_call.is_some() {
                return Err(format!("rollout {i}: parent_call inconsistent with role"));
            }
            if let Some(pc) = r.parent_call {
                if pc.parent as usize >= i {
                    return Err(format!("rollout {i}: parent is not earlier"));
                }
            }
        }
        if self.rt_tokens != self.root().generated_tokens {
            return Err("rt_tokens differs from root generated tokens".into());
        }
        if self.clone_tokens.len() != self.clone_count() {
            return Err("clone_tokens length differs from clone count".into());
        }
        for ids in self.spawn_tree.values() {
            for id in ids {
                if *id as usize >= self.rollouts.len() || *id == 0 {
                    return Err(format!("spawn tree references missing rollout {id}"));
                }
            }
        }
        let total: u64 = self.rollouts.iter().map(Rollout::context_tokens).sum();
        if total != self.total_context_tokens {
            return Err("total_context_tokens does not add up".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BudgetConfig {
    pub prompt_limit: u32,
    pub generation_limit: u32,
    pub max_tool_turns: u32,
    pub max_clone_depth: u32,
    pub max_parallel_clones_per_turn: u32,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        BudgetConfig {
            prompt_limit: 1024,
            generation_limit: 1024,
            max_tool_turns: 10,
            max_clone_depth: 1,
            max_parallel_clones_per_turn: 16,
        }
    }
}

impl BudgetConfig {
    pub fn validate(&self) -> Result<(), &'static str> {
        if self.prompt_limit == 0
            || self.generation_limit == 0
            || self.max_tool_turns == 0
            || self.max_clone_depth == 0
            || self.max_parallel_clones_per_turn == 0
        {
            return Err("all budgets must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeOptions {
    pub tools_enabled: bool,
    /// Reject a direct answer given before any spawn turn once, with a re-prompt.
    pub force_spawn: bool,
    pub clone_sees_question: bool,
    pub marker: MarkerConfig,
    pub max_return_bytes: usize,
    pub counter: TokenCounter,
    /// Clones replaced by a null clone that generates nothing.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub null_clones: Vec<ClonePath>,
}

impl Default for EpisodeOptions {
    fn default() -> Self {
        EpisodeOptions {
            tools_enabled: true,
            force_spawn: false,
            clone_sees_question: false,
            marker: MarkerConfig::default(),
            max_return_bytes: DEFAULT_MAX_RETURN_BYTES,
            counter: TokenCounter::ByteHeuristic,
            null_clones: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum EpisodeError {
    #[error("policy transport failure: {0}")]
    Transport(PolicyError),
    #[error("policy error: {0}")]
    Policy(PolicyError),
    #[error("invalid budgets: {0}")]
    Budget(&'static str),
}

impl From<PolicyError> for EpisodeError {
    fn from(e: PolicyError) -> Self {
        if e.is_transport() {
            EpisodeError::Transport(e)
        } else {
            EpisodeError::Policy(e)
        }
    }
}

/// A clone waiting to run. Opaque to executors, which only pass it back.
pub struct CloneJob {
    path: ClonePath,
    depth: u32,
    clone_index: u32,
    generation_limit: u32,
    system: String,
    prompt: String,
    null: bool,
}

/// A finished rollout and its finished children.
pub struct RolloutNode {
    rollout: Rollout,
    children: Vec<(CallSite, RolloutNode)>,
    flags: Vec<&'static str>,
}

pub type JobOutcome = Result<RolloutNode, EpisodeError>;

/// Runs the clones of one turn. Implementations may run jobs concurrently but
/// must return outcomes in job order.
pub trait CloneExecutor: Sync {
    fn execute(&self, jobs: Vec<CloneJob>, run: &(dyn Fn(CloneJob) -> JobOutcome + Sync)) -> Vec<JobOutcome>;
}

/// Runs clones one after another on the calling thread.
#[derive(Clone, Copy, Debug, Default)]
pub struct Sequential;

impl CloneExecutor for Sequential {
    fn execute(&self, jobs: Vec<CloneJob>, run: &(dyn Fn(CloneJob) -> JobOutcome + Sync)) -> Vec<JobOutcome> {
        jobs.into_iter().map(run).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Orchestrator {
    pub budgets: BudgetConfig,
    pub options: EpisodeOptions,
    pub reward: RewardConfig,
}

/// Seed of one policy request.
pub fn request_seed(episode_seed: u64, path: &[CallSite], turn: u32) -> u64 {
    let mut h = episode_seed;
    for site in path {
        h = mix_seed(h, ((site.turn as u64) << 32) | site.call_index as u64);
    }
    mix_seed(h, 0xA5A5_0000_0000_0000 | turn as u64)
}

struct Ctx<'a> {
    orch: &'a Orchestrator,
    policy: &'a dyn PolicyBackend,
    env: &'a dyn EnvAdapter,
    executor: &'a dyn CloneExecutor,
    task: &'a TaskSpec,
    seed: u64,
    tools: Vec<Value>,
}

impl Orchestrator {
    pub fn new(budgets: BudgetConfig, options: EpisodeOptions, reward: RewardConfig) -> Self {
        Orchestrator {
            budgets,
            options,
            reward,
        }
    }

    pub fn run_episode(
        &self,
        task: &TaskSpec,
        policy: &dyn PolicyBackend,
        env: &dyn EnvAdapter,
        seed: u64,
    ) -> Result<Trajectory, EpisodeError> {
        self.run_episode_with(task, policy, env, seed, &Sequential)
    }

    pub fn run_episode_with(
        &self,
        task: &TaskSpec,
        policy: &dyn PolicyBackend,
        env: &dyn EnvAdapter,
        seed: u64,
        executor: &dyn CloneExecutor,
    ) -> Result<Trajectory, EpisodeError> {
        self.budgets.validate().map_err(EpisodeError::Budget)?;
        let executor: &dyn CloneExecutor = match policy.concurrency() {
            crate::policy::Concurrency::Serial => &Sequential,
            crate::policy::Concurrency::ConcurrentSafe => executor,
        };
        let ctx = Ctx {
            orch: self,
            policy,
            env,
            executor,
            task,
            seed,
            tools: vec![clone_tool_schema()],
        };
        let (prompt, cut) = env
            .root_prompt(task)
            .fit(self.budgets.prompt_limit, self.options.counter);
        let root = ctx.run_rollout(CloneJob {
            path: Vec::new(),
            depth: 0,
            clone_index: 0,
            generation_limit: self.budgets.generation_limit,
            system: env.root_system_prompt(),
            prompt,
            null: false,
        })?;
        let mut traj = assemble(task, seed, root);
        if cut && !traj.has_flag(FLAG_PROMPT_TRUNCATED) {
            traj.flags.insert(0, FLAG_PROMPT_TRUNCATED.into());
        }
        let correct = traj
            .final_answer
            .as_deref()
            .map(|a| env.check(task, a))
            .unwrap_or(false);
        traj.correct = Some(correct);
        traj.reward = compute_reward(&traj, &self.reward).ok();
        Ok(traj)
    }
}

fn segment(origin: Origin, text: String, counter: TokenCounter) -> Segment {
    let token_count = count_tokens(&text, counter);
    Segment {
        origin,
        text,
        token_count,
    }
}

impl Ctx<'_> {
    fn clone_opts(&self) -> ClonePromptOptions<'_> {
        ClonePromptOptions {
            sees_question: self.orch.options.clone_sees_question,
            marker: &self.orch.options.marker,
            max_return_bytes: self.orch.options.max_return_bytes,
        }
    }

    fn run_rollout(&self, job: CloneJob) -> JobOutcome {
        let opts = &self.orch.options;
        let budgets = &self.orch.budgets;
        let counter = opts.counter;
        let role = if job.depth == 0 {
            RolloutRole::Root
        } else {
            RolloutRole::Clone
        };
        let mut flags: Vec<&'static str> = Vec::new();

        let mut rollout = Rollout {
            rollout_id: 0,
            role,
            depth: job.depth,
            parent_call: None,
            generation_limit: job.generation_limit,
            segments: vec![
                segment(Origin::System, job.system.clone(), counter),
                segment(Origin::User, job.prompt.clone(), counter),
            ],
            status: RolloutStatus::Completed,
            generated_tokens: 0,
            clone_return: None,
            repaired_calls: 0,
            tool_turns: 0,
        };
        if job.null {
            rollout.status = RolloutStatus::ProtocolError;
            rollout.clone_return = Some(CloneReturn::null(job.clone_index));
            return Ok(RolloutNode {
                rollout,
                children: Vec::new(),
                flags,
            });
        }

        let mut history = vec![ChatMessage::system(job.system), ChatMessage::user(job.prompt)];
        let mut children: Vec<(CallSite, RolloutNode)> = Vec::new();
        let mut reprompted = false;
        let can_spawn = opts.tools_enabled && job.depth < budgets.max_clone_depth;
        let mut turn: u32 = 0;

        loop {
            let remaining = job.generation_limit - rollout.generated_tokens;
            if remaining == 0 {
                rollout.status = RolloutStatus::TruncatedByTokenLimit;
                break;
            }
            let request = PolicyRequest {
                role,
                depth: job.depth,
                turn,
                history: &history,
                tools: can_spawn.then_some(self.tools.as_slice()),
                max_tokens: remaining,
                seed: request_seed(self.seed, &job.path, turn),
            };
            let completion = self.policy.next_message(&request)?;
            let message = completion.message;
            let text = message.generated_text();

            let mut tokens = match (counter, completion.usage) {
                (TokenCounter::RemoteUsage, Some(u)) => u.completion_tokens,
                (TokenCounter::RemoteUsage, None) => {
                    if !flags.contains(&FLAG_USAGE_MISSING) {
                        flags.push(FLAG_USAGE_MISSING);
                    }
                    count_tokens(&text, counter)
                }
                _ => count_tokens(&text, counter),
            };
            if completion.finish == FinishReason::Length {
                tokens = tokens.max(remaining);
            }
            if tokens >= remaining && (tokens > remaining || completion.finish == FinishReason::Length) {
                // Cut at the budget; whatever was cut off never reaches the
                // transcript, tool calls included.
                let kept = truncate_to_tokens(&text, counter, remaining).to_string();
                rollout.segments.push(Segment {
                    origin: Origin::Generated,
                    text: kept.clone(),
                    token_count: remaining,
                });
                rollout.generated_tokens += remaining;
                history.push(ChatMessage::assistant(&AssistantMessage::text(kept)));
                rollout.status = RolloutStatus::TruncatedByTokenLimit;
                break;
            }
            rollout.segments.push(Segment {
                origin: Origin::Generated,
                text: text.clone(),
                token_count: tokens,
            });
            rollout.generated_tokens += tokens;

            if !message.has_tool_calls() {
                history.push(ChatMessage::assistant(&message));
                let may_reprompt = role == RolloutRole::Root && opts.force_spawn && can_spawn;
                if may_reprompt && rollout.tool_turns == 0 && !reprompted {
                    reprompted = true;
                    flags.push(FLAG_FORCED_REPROMPT);
                    let seg = segment(Origin::User, REPROMPT.into(), counter);
                    history.push(ChatMessage::user(seg.text.clone()));
                    rollout.segments.push(seg);
                    turn += 1;
                    continue;
                }
                rollout.status = if text.trim().is_empty() {
                    RolloutStatus::ProtocolError
                } else {
                    RolloutStatus::Completed
                };
                break;
            }

            if rollout.tool_turns >= budgets.max_tool_turns {
                history.push(ChatMessage::assistant(&message));
                rollout.status = RolloutStatus::TruncatedByTurnLimit;
                break;
            }
            rollout.tool_turns += 1;

            let prefix = format!("call_{turn}_");
            let parsed = parse_tool_calls_with_prefix(&message, job.generation_limit, &prefix);
            history.push(ChatMessage::assistant(&replay_message(&message, &parsed, &prefix)));

            // Per call: Ok(job index) or an error text.
            let mut slots: Vec<(String, Result<usize, String>)> = Vec::new();
            let mut jobs = Vec::new();
            for (k, p) in parsed.iter().enumerate() {
                let id = crate::protocol::call_id_for(&message, k, &prefix);
                let slot = match p {
                    Err(e) => Err(format!("error: {e}")),
                    Ok(call) => {
                        if call.repaired {
                            rollout.repaired_calls += 1;
                        }
                        if !can_spawn {
                            Err("error: depth exceeded".to_string())
                        } else if k as u32 >= budgets.max_parallel_clones_per_turn {
                            Err(format!(
                                "error: too many clones in one turn (limit {})",
                                budgets.max_parallel_clones_per_turn
                            ))
                        } else {
                            match self.env.clone_prompt(self.task, call, &self.clone_opts()) {
                                Err(e) => Err(format!("error: {e}")),
                                Ok(parts) => {
                                    let (prompt, cut) = parts.fit(budgets.prompt_limit, counter);
                                    if cut && !flags.contains(&FLAG_PROMPT_TRUNCATED) {
                                        flags.push(FLAG_PROMPT_TRUNCATED);
                                    }
                                    let site = CallSite {
                                        turn,
                                        call_index: k as u32,
                                    };
                                    let mut path = job.path.clone();
                                    path.push(site);
                                    let null = opts.null_clones.contains(&path);
                                    jobs.push(CloneJob {
                                        path,
                                        depth: job.depth + 1,
                                        clone_index: k as u32,
                                        generation_limit: call
                                            .max_tokens
                                            .unwrap_or(budgets.generation_limit)
                                            .min(budgets.generation_limit),
                                        system: self.env.clone_system_prompt(&self.clone_opts()),
                                        prompt,
                                        null,
                                    });
                                    Ok(jobs.len() - 1)
                                }
                            }
                        }
                    }
                };
                slots.push((id, slot));
            }

            let outcomes = self.executor.execute(jobs, &|j| self.run_rollout(j));
            let mut finished: Vec<Option<RolloutNode>> = Vec::with_capacity(outcomes.len());
            for o in outcomes {
                finished.push(Some(o?));
            }
            for (k, (id, slot)) in slots.into_iter().enumerate() {
                let text = match slot {
                    Err(msg) => format!("clone {k} {msg}"),
                    Ok(j) => {
                        let mut node = finished[j].take().expect("each job joined once");
                        let ret = extract_return(
                            &node.rollout.generated_text(),
                            &opts.marker,
                            opts.max_return_bytes,
                            k as u32,
                        );
                        let ret = if node.rollout.status == RolloutStatus::ProtocolError
                            && node.rollout.generated_tokens == 0
                        {
                            CloneReturn::null(k as u32)
                        } else {
                            ret
                        };
                        let text = render_clone_return(&ret);
                        node.rollout.clone_return = Some(ret);
                        children.push((
                            CallSite {
                                turn,
                                call_index: k as u32,
                            },
                            node,
                        ));
                        text
                    }
                };
                let seg = segment(Origin::ToolResult, text, counter);
                history.push(ChatMessage::tool(id, seg.text.clone()));
                rollout.segments.push(seg);
            }
            turn += 1;
        }

        Ok(RolloutNode {
            rollout,
            children,
            flags,
        })
    }
}

/// The assistant message as it is replayed to the policy: inline calls are
/// lifted into structured calls with the ids the tool results refer to.
fn replay_message(
    message: &AssistantMessage,
    parsed: &[Result<ToolCall, ProtocolError>],
    prefix: &str,
) -> AssistantMessage {
    let tool_calls = parsed
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let id = crate::protocol::call_id_for(message, k, prefix);
            let original = message.tool_calls.get(k);
            let (name, arguments) = match (p, original) {
                (_, Some(raw)) => (raw.name.clone(), raw.arguments.clone()),
                (Ok(call), None) => (CLONE_TOOL_NAME.into(), call_arguments_json(call)),
                (Err(ProtocolError::Unrepairable { raw } | ProtocolError::Malformed { raw, .. }), None) => {
                    (CLONE_TOOL_NAME.into(), raw.clone())
                }
                (Err(ProtocolError::UnknownTool(name)), None) => (name.clone(), "{}".into()),
            };
            RawToolCall { id, name, arguments }
        })
        .collect();
    AssistantMessage {
        content: strip_inline_calls(&message.content),
        tool_calls,
    }
}

/// Numbers rollouts in depth-first preorder and flattens the tree.
fn assemble(task: &TaskSpec, seed: u64, root: RolloutNode) -> Trajectory {
    let mut rollouts = Vec::new();
    let mut spawn_tree: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    let mut flags: Vec<String> = Vec::new();

    fn walk(
        node: RolloutNode,
        parent: Option<(u32, CallSite)>,
        rollouts: &mut Vec<Rollout>,
        spawn_tree: &mut BTreeMap<u32, Vec<u32>>,
        flags: &mut Vec<String>,
    ) {
        let id = rollouts.len() as u32;
        let mut r = node.rollout;
        r.rollout_id = id;
        r.parent_call = parent.map(|(p, site)| ParentCall {
            parent: p,
            turn: site.turn,
            call_index: site.call_index,
        });
        if let Some((0, site)) = parent {
            spawn_tree.entry(site.turn).or_default().push(id);
        }
        for f in node.flags {
            if !flags.iter().any(|x| x == f) {
                flags.push(f.to_string());
            }
        }
        rollouts.push(r);
        for (site, child) in node.children {
            walk(child, Some((id, site)), rollouts, spawn_tree, flags);
        }
    }
    walk(root, None, &mut rollouts, &mut spawn_tree, &mut flags);
    flags.sort();

    let root = &rollouts[0];
    let final_answer = match root.status {
        RolloutStatus::Completed => extract_final_answer(root.final_text()),
        _ => None,
    };
    let clone_tokens: Vec<u32> = rollouts
        .iter()
        .filter(|r| r.role == RolloutRole::Clone)
        .map(|r| r.generated_tokens)
        .collect();
    Trajectory {
        schema_version: TRAJECTORY_SCHEMA_VERSION,
        trajectory_id: format!("{}@{seed:016x}", task.id),
        task_id: task.id.clone(),
        seed,
        rt_tokens: root.generated_tokens,
        total_context_tokens: rollouts.iter().map(Rollout::context_tokens).sum(),
        repaired_calls: rollouts.iter().map(|r| r.repaired_calls).sum(),
        final_answer,
        clone_tokens,
        rollouts,
        spawn_tree,
        correct: None,
        reward: None,
        flags,
        group: None,
    }
}
