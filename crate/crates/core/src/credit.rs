//! Global reward, group-relative advantages, rollout gates and per-token
//! training weights.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::orchestrator::{
    CloneExecutor, EnvAdapter, EpisodeError, Orchestrator, Origin, Rollout, Sequential, TaskSpec, Trajectory,
};
use crate::policy::{Determinism, PolicyBackend, RolloutRole};

pub const GRPO_EPSILON: f64 = 1e-6;
pub const DEFAULT_SOFT_ALPHA: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum CreditError {
    #[error("ramp must be positive, got {0}")]
    InvalidRamp(f64),
    #[error("invalid reward config: {0}")]
    InvalidConfig(&'static str),
    #[error("trajectory {0} has not been scored")]
    NotFinalized(String),
    #[error("group size {0} is below 2")]
    GroupTooSmall(usize),
    #[error("the root rollout is never gated")]
    RootGated,
    #[error("ledger does not match trajectory: {0}")]
    ShapeMismatch(String),
    #[error("no rollout {0} in trajectory")]
    NoSuchRollout(u32),
    #[error("counterfactual replay unsupported: {0}")]
    ReplayUnsupported(&'static str),
    #[error("replay failed: {0}")]
    Replay(EpisodeError),
}

/// `max(0, 1 - exp(-x / ramp))`.
pub fn penalty(x: f64, ramp: f64) -> Result<f64, CreditError> {
    if ramp.is_nan() || ramp <= 0.0 {
        return Err(CreditError::InvalidRamp(ramp));
    }
    if x <= 0.0 {
        return Ok(0.0);
    }
    Ok((-libm::expm1(-x / ramp)).max(0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub rt_threshold: f64,
    pub rt_ramp: f64,
    pub rt_factor: f64,
    pub cl_threshold: f64,
    pub cl_ramp: f64,
    pub cl_factor: f64,
    /// Subtracted once per tool call whose arguments needed repair.
    pub json_repair_penalty: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            rt_threshold: 512.0,
            rt_ramp: 256.0,
            rt_factor: 0.3,
            cl_threshold: 512.0,
            cl_ramp: 512.0,
            cl_factor: 0.2,
            json_repair_penalty: 0.05,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), CreditError> {
        if self.rt_ramp.is_nan() || self.rt_ramp <= 0.0 {
            return Err(CreditError::InvalidRamp(self.rt_ramp));
        }
        if self.cl_ramp.is_nan() || self.cl_ramp <= 0.0 {
            return Err(CreditError::InvalidRamp(self.cl_ramp));
        }
        if self.rt_factor < 0.0 || self.cl_factor < 0.0 || self.json_repair_penalty < 0.0 {
            return Err(CreditError::InvalidConfig("factors must be non-negative"));
        }
        if self.rt_threshold < 0.0 || self.cl_threshold < 0.0 {
            return Err(CreditError::InvalidConfig("thresholds must be non-negative"));
        }
        Ok(())
    }
}

/// Reward from its ingredients; `clone_tokens` may be empty.
pub fn reward_from_parts(
    correct: bool,
    rt_tokens: u32,
    clone_tokens: &[u32],
    repaired_calls: u32,
    cfg: &RewardConfig,
) -> Result<f64, CreditError> {
    cfg.validate()?;
    let r0 = if correct { 1.0 } else { 0.0 };
    let rt = cfg.rt_factor * penalty(rt_tokens as f64 - cfg.rt_threshold, cfg.rt_ramp)?;
    let mut cl = 0.0f64;
    for &c in clone_tokens {
        cl = cl.max(cfg.cl_factor * penalty(c as f64 - cfg.cl_threshold, cfg.cl_ramp)?);
    }
    Ok(r0 - rt - cl - cfg.json_repair_penalty * repaired_calls as f64)
}

/// Reward of a scored trajectory (its `correct` flag must be set).
pub fn compute_reward(traj: &Trajectory, cfg: &RewardConfig) -> Result<f64, CreditError> {
    let correct = traj
        .correct
        .ok_or_else(|| CreditError::NotFinalized(traj.trajectory_id.clone()))?;
    reward_from_parts(correct, traj.rt_tokens, &traj.clone_tokens, traj.repaired_calls, cfg)
}

/// As [`compute_reward`], judging the final answer with `checker`.
pub fn compute_reward_with(
    traj: &Trajectory,
    cfg: &RewardConfig,
    checker: impl Fn(&str) -> bool,
) -> Result<f64, CreditError> {
    let correct = traj.final_answer.as_deref().map(checker).unwrap_or(false);
    reward_from_parts(correct, traj.rt_tokens, &traj.clone_tokens, traj.repaired_calls, cfg)
}

/// `(r - mean) / max(std, 1e-6)` with the population standard deviation.
/// A group of identical rewards gets all-zero advantages.
pub fn grpo_advantages(rewards: &[f64]) -> Result<Vec<f64>, CreditError> {
    let g = rewards.len();
    if g < 2 {
        return Err(CreditError::GroupTooSmall(g));
    }
    if rewards.iter().all(|r| *r == rewards[0]) {
        return Ok(alloc::vec![0.0; g]);
    }
    let mean = rewards.iter().sum::<f64>() / g as f64;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / g as f64;
    let std = libm::sqrt(var).max(GRPO_EPSILON);
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GateKind {
    #[default]
    None,
    Hard,
    Soft {
        alpha: f64,
    },
    Use,
}

impl fmt::Display for GateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GateKind::None => f.write_str("none"),
            GateKind::Hard => f.write_str("hard"),
            GateKind::Soft { alpha } => write!(f, "soft:{alpha}"),
            GateKind::Use => f.write_str("use"),
        }
    }
}

impl FromStr for GateKind {
    type Err = String;

    /// `none`, `hard`, `use`, `soft` or `soft:<alpha>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "none" => Ok(GateKind::None),
            "hard" => Ok(GateKind::Hard),
            "use" => Ok(GateKind::Use),
            "soft" => Ok(GateKind::Soft {
                alpha: DEFAULT_SOFT_ALPHA,
            }),
            other => {
                let alpha = other
                    .strip_prefix("soft:")
                    .and_then(|a| a.parse::<f64>().ok())
                    .filter(|a| a.is_finite())
                    .ok_or_else(|| format!("unknown gate {other:?}"))?;
                Ok(GateKind::Soft { alpha })
            }
        }
    }
}

fn require_clone(clone: &Rollout) -> Result<(), CreditError> {
    if clone.role == RolloutRole::Root {
        return Err(CreditError::RootGated);
    }
    Ok(())
}

/// 1 iff the clone handed back a non-empty marked return.
pub fn gate_hard(clone: &Rollout) -> Result<f64, CreditError> {
    require_clone(clone)?;
    Ok(match &clone.clone_return {
        Some(r) if r.is_usable() => 1.0,
        _ => 0.0,
    })
}

pub const SOFT_BASE_SCORE: i32 = 5;
pub const SOFT_DEDUCTION: i32 = 3;

/// Protocol score: 5, minus 3 for each of a missing or empty marker, an
/// unfinished rollout, and return content that had to be cut.
pub fn soft_score(clone: &Rollout) -> i32 {
    let mut score = SOFT_BASE_SCORE;
    let ret = clone.clone_return.as_ref();
    if !ret.map(|r| r.is_usable()).unwrap_or(false) {
        score -= SOFT_DEDUCTION;
    }
    if clone.status.is_unfinished() {
        score -= SOFT_DEDUCTION;
    }
    let cut = match ret {
        Some(r) if r.parseable => r.truncated,
        Some(r) => r.content.len() < clone.generated_text().len(),
        None => false,
    };
    if cut {
        score -= SOFT_DEDUCTION;
    }
    score
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

pub fn gate_soft(clone: &Rollout, alpha: f64) -> Result<f64, CreditError> {
    require_clone(clone)?;
    Ok(logistic(alpha * soft_score(clone) as f64))
}

/// Collapses whitespace runs to one space and trims.
pub fn normalize_whitespace(s: &str) -> String {
    let words: Vec<&str> = s.split_whitespace().collect();
    words.join(" ")
}

/// 1 iff the clone's usable return occurs verbatim (up to whitespace) in the
/// root's final text.
pub fn gate_use(clone: &Rollout, root_final_text: &str) -> Result<f64, CreditError> {
    require_clone(clone)?;
    let Some(ret) = clone.clone_return.as_ref().filter(|r| r.is_usable()) else {
        return Ok(0.0);
    };
    let needle = normalize_whitespace(&ret.content);
    Ok(
        if !needle.is_empty() && normalize_whitespace(root_final_text).contains(&needle) {
            1.0
        } else {
            0.0
        },
    )
}

/// Gate weight of any rollout in `traj`; the root always weighs 1.
pub fn gate_weight(kind: GateKind, traj: &Trajectory, rollout: &Rollout) -> Result<f64, CreditError> {
    if rollout.role == RolloutRole::Root {
        return Ok(1.0);
    }
    match kind {
        GateKind::None => Ok(1.0),
        GateKind::Hard => gate_hard(rollout),
        GateKind::Soft { alpha } => gate_soft(rollout, alpha),
        GateKind::Use => gate_use(rollout, traj.root().final_text()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutWeights {
    pub rollout_id: u32,
    pub role: RolloutRole,
    pub gate_weight: f64,
    /// Gated to zero: takes no part in the update.
    pub excluded: bool,
    /// One weight per generated token.
    pub token_weights: Vec<f64>,
    /// One weight per segment; zero for anything not generated.
    pub segment_weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvantageLedger {
    pub trajectory_id: String,
    pub gate: GateKind,
    pub group_advantage: f64,
    pub per_rollout: Vec<RolloutWeights>,
}

impl AdvantageLedger {
    /// Sum of all token weights.
    pub fn total_weight(&self) -> f64 {
        self.per_rollout.iter().flat_map(|r| r.token_weights.iter()).sum()
    }

    /// Re-checks the ledger against the trajectory it was built from.
    pub fn check_against(&self, traj: &Trajectory) -> Result<(), CreditError> {
        if self.per_rollout.len() != traj.rollouts.len() || self.trajectory_id != traj.trajectory_id {
            return Err(CreditError::ShapeMismatch("rollout count or id".into()));
        }
        for (w, r) in self.per_rollout.iter().zip(&traj.rollouts) {
            if w.rollout_id != r.rollout_id
                || w.token_weights.len() != r.generated_tokens as usize
                || w.segment_weights.len() != r.segments.len()
            {
                return Err(CreditError::ShapeMismatch(format!("rollout {}", r.rollout_id)));
            }
        }
        Ok(())
    }
}

fn scaled(w: f64, a: f64) -> f64 {
    let v = w * a;
    // No negative zeros in exported weights.
    if v == 0.0 {
        0.0
    } else {
        v
    }
}

/// Resolves a group advantage into per-token weights: `A` for root tokens,
/// `gate · A` for clone tokens, 0 for tokens the policy did not generate.
pub fn per_token_weights(traj: &Trajectory, advantage: f64, gate: GateKind) -> Result<AdvantageLedger, CreditError> {
    let mut per_rollout = Vec::with_capacity(traj.rollouts.len());
    for r in &traj.rollouts {
        let w = gate_weight(gate, traj, r)?;
        let v = scaled(w, advantage);
        let segment_weights = r
            .segments
            .iter()
            .map(|s| if s.origin == Origin::Generated { v } else { 0.0 })
            .collect();
        per_rollout.push(RolloutWeights {
            rollout_id: r.rollout_id,
            role: r.role,
            gate_weight: w,
            excluded: w == 0.0,
            token_weights: alloc::vec![v; r.generated_tokens as usize],
            segment_weights,
        });
    }
    Ok(AdvantageLedger {
        trajectory_id: traj.trajectory_id.clone(),
        gate,
        group_advantage: advantage,
        per_rollout,
    })
}

/// Re-executes an episode with one clone replaced by a null clone.
pub trait CounterfactualReplay {
    fn replay_without(&self, traj: &Trajectory, rollout_id: u32) -> Result<Trajectory, CreditError>;
}

/// Replays through the orchestrator with the episode's own seed. Only
/// policies whose output is a function of (history, request seed) qualify.
pub struct EpisodeReplay<'a> {
    pub orchestrator: &'a Orchestrator,
    pub policy: &'a dyn PolicyBackend,
    pub env: &'a dyn EnvAdapter,
    pub task: &'a TaskSpec,
    pub executor: &'a dyn CloneExecutor,
}

impl<'a> EpisodeReplay<'a> {
    pub fn new(
        orchestrator: &'a Orchestrator,
        policy: &'a dyn PolicyBackend,
        env: &'a dyn EnvAdapter,
        task: &'a TaskSpec,
    ) -> Self {
        EpisodeReplay {
            orchestrator,
            policy,
            env,
            task,
            executor: &Sequential,
        }
    }
}

impl CounterfactualReplay for EpisodeReplay<'_> {
    fn replay_without(&self, traj: &Trajectory, rollout_id: u32) -> Result<Trajectory, CreditError> {
        if self.policy.determinism() == Determinism::External {
            return Err(CreditError::ReplayUnsupported("policy output is not reproducible"));
        }
        let r = traj
            .rollouts
            .get(rollout_id as usize)
            .ok_or(CreditError::NoSuchRollout(rollout_id))?;
        if r.role == RolloutRole::Root {
            return Err(CreditError::ReplayUnsupported("the root cannot be nulled"));
        }
        let path = traj.path_of(rollout_id).ok_or(CreditError::NoSuchRollout(rollout_id))?;
        let mut orch = self.orchestrator.clone();
        orch.options.null_clones.push(path);
        orch.run_episode_with(self.task, self.policy, self.env, traj.seed, self.executor)
            .map_err(CreditError::Replay)
    }
}

/// `R(τ) - R(τ without clone i)`.
pub fn difference_reward(
    traj: &Trajectory,
    rollout_id: u32,
    replay: &dyn CounterfactualReplay,
    cfg: &RewardConfig,
) -> Result<f64, CreditError> {
    let r = compute_reward(traj, cfg)?;
    let counterfactual = replay.replay_without(traj, rollout_id)?;
    Ok(r - compute_reward(&counterfactual, cfg)?)
}

/// Trainer settings carried through to exported batches untouched.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerMetadata {
    pub clip_ratio: f64,
    pub kl_coefficient: f64,
    pub minibatch_size: u32,
    pub loss_aggregation: String,
    pub trajectories_per_batch: u32,
    pub groups_per_batch: u32,
    pub group_size: u32,
    pub learning_rate: f64,
    pub warmup_steps: u32,
}

impl Default for TrainerMetadata {
    fn default() -> Self {
        TrainerMetadata {
            clip_ratio: 0.1,
            kl_coefficient: 5e-4,
            minibatch_size: 8,
            loss_aggregation: "token_mean".to_string(),
            trajectories_per_batch: 128,
            groups_per_batch: 32,
            group_size: 4,
            learning_rate: 6e-7,
            warmup_steps: 10,
        }
    }
}
