//! Exact policy-gradient checks by exhaustive enumeration.
//!
//! A [`MicroEnv`] is a finite game between a root and its clones, all acting
//! through one shared [`ToyPolicy`] table. Enumerating every joint trajectory
//! gives exact expectations, so estimator bias and variance can be compared
//! without sampling noise.

use alloc::boxed::Box;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::policy::{GradTable, ToyPolicy};

pub mod envs;

pub use envs::{env_by_name, ConstantReward, Delegation, OneStep, ParallelPair, PathologicalClone, ENV_NAMES};

/// Hard cap on the number of joint trajectories of an env.
pub const MAX_TRAJECTORIES: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Move {
    pub rollout: usize,
    /// Root turn that spawned the rollout; `None` for the root.
    pub spawn_turn: Option<u32>,
    pub state: usize,
    /// `None` marks a null clone.
    pub action: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Step {
    Decide {
        rollout: usize,
        spawn_turn: Option<u32>,
        state: usize,
    },
    Terminal(f64),
}

pub trait MicroEnv {
    fn name(&self) -> &'static str;

    /// Action count per policy row.
    fn shape(&self) -> Vec<usize>;

    /// What happens after `moves`.
    fn step(&self, moves: &[Move]) -> Step;

    /// Whether a clone's return would pass the protocol gate.
    fn parseable(&self, moves: &[Move], rollout: usize) -> bool {
        moves
            .iter()
            .filter(|m| m.rollout == rollout)
            .all(|m| m.action.is_some())
    }
}

impl<E: MicroEnv + ?Sized> MicroEnv for Box<E> {
    fn name(&self) -> &'static str {
        (**self).name()
    }

    fn shape(&self) -> Vec<usize> {
        (**self).shape()
    }

    fn step(&self, moves: &[Move]) -> Step {
        (**self).step(moves)
    }

    fn parseable(&self, moves: &[Move], rollout: usize) -> bool {
        (**self).parseable(moves, rollout)
    }
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum GradlabError {
    #[error("more than {MAX_TRAJECTORIES} joint trajectories")]
    TooManyTrajectories,
    #[error("policy table shape {policy:?} does not fit env shape {env:?}")]
    ShapeMismatch { policy: Vec<usize>, env: Vec<usize> },
    #[error("group size must be at least 2")]
    GroupTooSmall,
    #[error("unknown micro-env {0:?}")]
    UnknownEnv(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointTrajectory {
    pub moves: Vec<Move>,
    pub reward: f64,
    /// `exp` of the summed log-probabilities.
    pub prob: f64,
    /// Log-probability summed over decisions in time order.
    pub logprob: f64,
    /// Log-probability summed per rollout first, then across rollouts.
    pub logprob_by_rollout: f64,
}

impl JointTrajectory {
    pub fn rollouts(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.moves.iter().map(|m| m.rollout).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

fn check_shape(env: &dyn MicroEnv, policy: &ToyPolicy) -> Result<(), GradlabError> {
    let (e, p) = (env.shape(), policy.shape());
    if e != p {
        return Err(GradlabError::ShapeMismatch { policy: p, env: e });
    }
    Ok(())
}

fn logp(policy: &ToyPolicy, m: &Move) -> f64 {
    match m.action {
        Some(a) => policy.act_logprob(m.state, a).expect("env states fit the table"),
        None => 0.0,
    }
}

/// Every joint trajectory with its probability under `policy`.
pub fn enumerate_trajectories(env: &dyn MicroEnv, policy: &ToyPolicy) -> Result<Vec<JointTrajectory>, GradlabError> {
    check_shape(env, policy)?;
    let mut out = Vec::new();
    let mut moves = Vec::new();
    walk(env, policy, &mut moves, &mut out)?;
    Ok(out)
}

fn walk(
    env: &dyn MicroEnv,
    policy: &ToyPolicy,
    moves: &mut Vec<Move>,
    out: &mut Vec<JointTrajectory>,
) -> Result<(), GradlabError> {
    match env.step(moves) {
        Step::Terminal(reward) => {
            if out.len() == MAX_TRAJECTORIES {
                return Err(GradlabError::TooManyTrajectories);
            }
            let logprob: f64 = moves.iter().map(|m| logp(policy, m)).sum();
            let mut per_rollout: Vec<(usize, f64)> = Vec::new();
            for m in moves.iter() {
                match per_rollout.iter_mut().find(|(r, _)| *r == m.rollout) {
                    Some((_, s)) => *s += logp(policy, m),
                    None => per_rollout.push((m.rollout, logp(policy, m))),
                }
            }
            out.push(JointTrajectory {
                moves: moves.clone(),
                reward,
                prob: libm::exp(logprob),
                logprob,
                logprob_by_rollout: per_rollout.iter().map(|(_, s)| s).sum(),
            });
            Ok(())
        }
        Step::Decide {
            rollout,
            spawn_turn,
            state,
        } => {
            for a in 0..policy.logits(state).len() {
                moves.push(Move {
                    rollout,
                    spawn_turn,
                    state,
                    action: Some(a),
                });
                walk(env, policy, moves, out)?;
                moves.pop();
            }
            Ok(())
        }
    }
}

/// How a counterfactual continuation treats each decision it meets.
enum Forced {
    Action(Option<usize>),
    Marginalize,
}

type ForceRule<'a> = dyn Fn(&[Move], usize, Option<u32>) -> Forced + 'a;

/// Expected reward after `moves`, with `rule` pinning some decisions.
fn expected_value(env: &dyn MicroEnv, policy: &ToyPolicy, moves: &mut Vec<Move>, rule: &ForceRule<'_>) -> f64 {
    match env.step(moves) {
        Step::Terminal(r) => r,
        Step::Decide {
            rollout,
            spawn_turn,
            state,
        } => match rule(moves, rollout, spawn_turn) {
            Forced::Action(action) => {
                moves.push(Move {
                    rollout,
                    spawn_turn,
                    state,
                    action,
                });
                let v = expected_value(env, policy, moves, rule);
                moves.pop();
                v
            }
            Forced::Marginalize => {
                let probs = policy.probs(state);
                let mut v = 0.0;
                for (a, p) in probs.into_iter().enumerate() {
                    moves.push(Move {
                        rollout,
                        spawn_turn,
                        state,
                        action: Some(a),
                    });
                    v += p * expected_value(env, policy, moves, rule);
                    moves.pop();
                }
                v
            }
        },
    }
}

/// `J(θ) = Σ p(τ) R(τ)`.
pub fn objective(env: &dyn MicroEnv, policy: &ToyPolicy) -> Result<f64, GradlabError> {
    let trajs = enumerate_trajectories(env, policy)?;
    // Compensated sum: finite differences of J need every last bit.
    let (mut sum, mut c) = (0.0f64, 0.0f64);
    for t in &trajs {
        let y = t.prob * t.reward - c;
        let s = sum + y;
        c = (s - sum) - y;
        sum = s;
    }
    Ok(sum)
}

/// `Σ_d c_d ∇log π(a_d | s_d)` over the decisions of a trajectory.
fn weighted_score(policy: &ToyPolicy, moves: &[Move], coef: impl Fn(usize, &Move) -> f64) -> GradTable {
    let mut g = GradTable::zeros(&policy.shape());
    for (i, m) in moves.iter().enumerate() {
        if let Some(a) = m.action {
            g.add_row_scaled(m.state, &policy.grad_row(m.state, a), coef(i, m));
        }
    }
    g
}

/// `∇log p(τ)`: the sum of every rollout's decision scores.
pub fn score(policy: &ToyPolicy, traj: &JointTrajectory) -> GradTable {
    weighted_score(policy, &traj.moves, |_, _| 1.0)
}

/// `∇J = Σ p(τ) R(τ) ∇log p(τ)`.
pub fn exact_grad(env: &dyn MicroEnv, policy: &ToyPolicy) -> Result<GradTable, GradlabError> {
    let trajs = enumerate_trajectories(env, policy)?;
    let mut g = GradTable::zeros(&policy.shape());
    for t in &trajs {
        g.add_scaled(&score(policy, t), t.prob * t.reward);
    }
    Ok(g)
}

/// Central differences of `J` against [`exact_grad`]: the largest
/// `|analytic - fd| / (|analytic| + 1e-12)` over all parameters.
pub fn finite_diff_check(env: &dyn MicroEnv, policy: &ToyPolicy, h: f64) -> Result<FiniteDiff, GradlabError> {
    let analytic = exact_grad(env, policy)?;
    let mut max_rel = 0.0f64;
    let mut max_abs = 0.0f64;
    let mut p = policy.clone();
    for (s, row) in policy.rows().iter().enumerate() {
        for (a, &x) in row.iter().enumerate() {
            p.set_logit(s, a, x + h);
            let up = objective(env, &p)?;
            p.set_logit(s, a, x - h);
            let down = objective(env, &p)?;
            p.set_logit(s, a, x);
            let fd = (up - down) / (2.0 * h);
            let an = analytic.rows[s][a];
            let abs = (an - fd).abs();
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(abs / (an.abs() + 1e-12));
        }
    }
    Ok(FiniteDiff {
        max_rel_error: max_rel,
        max_abs_error: max_abs,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiniteDiff {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EstimatorSpec {
    /// `R(τ) ∇log p(τ)`.
    PlainReinforce,
    /// `(R(τ) - b) ∇log p(τ)`.
    ConstantBaseline { baseline: f64 },
    /// Root decisions weighted by `R`, clone `i` decisions by
    /// `R(τ) - R(τ_{-i})` with siblings kept and everything downstream of the
    /// join re-drawn in expectation.
    DifferenceReward,
    /// Every decision weighted by `R(τ) - Σ_a π(a|h) Q(h, a)`.
    ComaCounterfactual,
    /// Group-normalized advantages over groups of `group_size` independent
    /// trajectories; clone scores multiplied by the protocol gate.
    GatedGrpo { group_size: usize },
    /// As `GatedGrpo` with every gate fixed to 1.
    UngatedGrpo { group_size: usize },
    /// `R(τ)` times the gated score: isolates the bias gating alone causes.
    GatedReinforce,
}

impl EstimatorSpec {
    pub fn name(&self) -> &'static str {
        match self {
            EstimatorSpec::PlainReinforce => "plain_reinforce",
            EstimatorSpec::ConstantBaseline { .. } => "constant_baseline",
            EstimatorSpec::DifferenceReward => "difference_reward",
            EstimatorSpec::ComaCounterfactual => "coma_counterfactual",
            EstimatorSpec::GatedGrpo { .. } => "gated_grpo",
            EstimatorSpec::UngatedGrpo { .. } => "ungated_grpo",
            EstimatorSpec::GatedReinforce => "gated_reinforce",
        }
    }
}

/// Exact mean and covariance trace of an estimator.
#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorMoments {
    pub expectation: GradTable,
    pub variance: f64,
}

/// Probability-weighted single-trajectory estimates.
fn per_trajectory(
    env: &dyn MicroEnv,
    policy: &ToyPolicy,
    trajs: &[JointTrajectory],
    spec: EstimatorSpec,
) -> Vec<(f64, GradTable)> {
    trajs
        .iter()
        .map(|t| {
            let r = t.reward;
            let g = match spec {
                EstimatorSpec::PlainReinforce => weighted_score(policy, &t.moves, |_, _| r),
                EstimatorSpec::ConstantBaseline { baseline } => weighted_score(policy, &t.moves, |_, _| r - baseline),
                EstimatorSpec::DifferenceReward => {
                    let mut cf: Vec<(usize, f64)> = Vec::new();
                    for id in t.rollouts().into_iter().filter(|&id| id != 0) {
                        cf.push((id, counterfactual_reward(env, policy, &t.moves, id)));
                    }
                    weighted_score(policy, &t.moves, |_, m| {
                        if m.rollout == 0 {
                            r
                        } else {
                            r - cf
                                .iter()
                                .find(|(id, _)| *id == m.rollout)
                                .map(|(_, v)| *v)
                                .unwrap_or(0.0)
                        }
                    })
                }
                EstimatorSpec::ComaCounterfactual => weighted_score(policy, &t.moves, |i, _| {
                    let mut prefix = t.moves[..i].to_vec();
                    r - expected_value(env, policy, &mut prefix, &|_, _, _| Forced::Marginalize)
                }),
                EstimatorSpec::GatedReinforce => gated_score(env, policy, t, true).scaled(r),
                EstimatorSpec::GatedGrpo { .. } | EstimatorSpec::UngatedGrpo { .. } => {
                    unreachable!("group estimators are handled separately")
                }
            };
            (t.prob, g)
        })
        .collect()
}

/// `E[R | clone `rollout` nulled]`: moves before the clone's first decision
/// are kept, sibling clones (same spawn turn) keep their recorded actions,
/// and every other later decision is averaged under the policy.
pub fn counterfactual_reward(env: &dyn MicroEnv, policy: &ToyPolicy, moves: &[Move], rollout: usize) -> f64 {
    let Some(first) = moves.iter().position(|m| m.rollout == rollout) else {
        let mut all = moves.to_vec();
        return expected_value(env, policy, &mut all, &|_, _, _| Forced::Marginalize);
    };
    let turn = moves[first].spawn_turn;
    let rule = |hist: &[Move], r: usize, spawn_turn: Option<u32>| {
        if r == rollout {
            return Forced::Action(None);
        }
        if r != 0 && spawn_turn == turn {
            let k = hist.iter().filter(|m| m.rollout == r).count();
            if let Some(m) = moves.iter().filter(|m| m.rollout == r).nth(k) {
                return Forced::Action(m.action);
            }
        }
        Forced::Marginalize
    };
    let mut prefix = moves[..first].to_vec();
    expected_value(env, policy, &mut prefix, &rule)
}

/// `V(h)` before decision `index` of `moves`: the COMA baseline.
pub fn coma_baseline(env: &dyn MicroEnv, policy: &ToyPolicy, moves: &[Move], index: usize) -> f64 {
    let mut prefix = moves[..index].to_vec();
    expected_value(env, policy, &mut prefix, &|_, _, _| Forced::Marginalize)
}

fn moments_from(weighted: &[(f64, GradTable)], shape: &[usize]) -> EstimatorMoments {
    let mut mean = GradTable::zeros(shape);
    let mut second = 0.0;
    for (p, g) in weighted {
        mean.add_scaled(g, *p);
        second += p * g.dot(g);
    }
    let variance = (second - mean.dot(&mean)).max(0.0);
    EstimatorMoments {
        expectation: mean,
        variance,
    }
}

/// Score of one trajectory for the group estimators: root decisions in full,
/// each clone's decisions times its gate.
fn gated_score(env: &dyn MicroEnv, policy: &ToyPolicy, t: &JointTrajectory, gated: bool) -> GradTable {
    weighted_score(policy, &t.moves, |_, m| {
        if !gated || m.rollout == 0 || env.parseable(&t.moves, m.rollout) {
            1.0
        } else {
            0.0
        }
    })
}

fn grpo(rewards: &[f64]) -> Vec<f64> {
    crate::credit::grpo_advantages(rewards).expect("group size checked")
}

/// Exact moments of the group estimator `(1/G) Σ_j A_j s_j` over all
/// ordered `G`-tuples of independent trajectories.
fn group_moments(
    env: &dyn MicroEnv,
    policy: &ToyPolicy,
    trajs: &[JointTrajectory],
    group_size: usize,
    gated: bool,
) -> Result<EstimatorMoments, GradlabError> {
    if group_size < 2 {
        return Err(GradlabError::GroupTooSmall);
    }
    let n = trajs.len();
    let scores: Vec<GradTable> = trajs.iter().map(|t| gated_score(env, policy, t, gated)).collect();
    let gram: Vec<Vec<f64>> = scores
        .iter()
        .map(|a| scores.iter().map(|b| a.dot(b)).collect())
        .collect();
    let g = group_size as f64;

    let mut coef = vec![0.0; n];
    let mut second = 0.0;
    let mut idx = vec![0usize; group_size];
    let mut rewards = vec![0.0; group_size];
    loop {
        let mut p = 1.0;
        for (k, &i) in idx.iter().enumerate() {
            p *= trajs[i].prob;
            rewards[k] = trajs[i].reward;
        }
        if p > 0.0 {
            let adv = grpo(&rewards);
            let mut quad = 0.0;
            for (j, &ij) in idx.iter().enumerate() {
                coef[ij] += p * adv[j] / g;
                for (k, &ik) in idx.iter().enumerate() {
                    quad += adv[j] * adv[k] * gram[ij][ik];
                }
            }
            second += p * quad / (g * g);
        }
        // Next tuple in odometer order.
        let mut k = 0;
        loop {
            if k == group_size {
                let mut mean = GradTable::zeros(&policy.shape());
                for (c, s) in coef.iter().zip(&scores) {
                    mean.add_scaled(s, *c);
                }
                let variance = (second - mean.dot(&mean)).max(0.0);
                return Ok(EstimatorMoments {
                    expectation: mean,
                    variance,
                });
            }
            idx[k] += 1;
            if idx[k] < n {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

pub fn estimator_moments(
    spec: EstimatorSpec,
    env: &dyn MicroEnv,
    policy: &ToyPolicy,
) -> Result<EstimatorMoments, GradlabError> {
    let trajs = enumerate_trajectories(env, policy)?;
    match spec {
        EstimatorSpec::GatedGrpo { group_size } => group_moments(env, policy, &trajs, group_size, true),
        EstimatorSpec::UngatedGrpo { group_size } => group_moments(env, policy, &trajs, group_size, false),
        _ => Ok(moments_from(
            &per_trajectory(env, policy, &trajs, spec),
            &policy.shape(),
        )),
    }
}

pub fn estimator_expectation(
    spec: EstimatorSpec,
    env: &dyn MicroEnv,
    policy: &ToyPolicy,
) -> Result<GradTable, GradlabError> {
    Ok(estimator_moments(spec, env, policy)?.expectation)
}

pub fn estimator_variance(spec: EstimatorSpec, env: &dyn MicroEnv, policy: &ToyPolicy) -> Result<f64, GradlabError> {
    Ok(estimator_moments(spec, env, policy)?.variance)
}

/// Default table used for an env in reports: seeded, moderately peaked.
pub fn default_policy(env: &dyn MicroEnv, seed: u64) -> ToyPolicy {
    ToyPolicy::random(&env.shape(), 1.0, seed)
}

pub const UNBIASED_TOLERANCE: f64 = 1e-10;
pub const FD_TOLERANCE: f64 = 1e-5;
pub const FD_STEP: f64 = 1e-5;
pub const BIAS_THRESHOLD: f64 = 1e-3;
pub const GROUP_SIZE: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorReport {
    pub estimator: String,
    pub spec: EstimatorSpec,
    pub expectation: Vec<f64>,
    /// `|E[estimate] - ∇J|`.
    pub bias_norm: f64,
    pub variance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvReport {
    pub env: String,
    pub policy_seed: u64,
    pub trajectories: usize,
    pub probability_sum: f64,
    pub objective: f64,
    pub exact_grad: Vec<f64>,
    pub exact_grad_norm: f64,
    pub finite_diff: FiniteDiff,
    /// Largest gap between time-ordered and per-rollout log-probability sums.
    pub factorization_error: f64,
    /// `|Σ p ∇log p|`.
    pub score_identity_norm: f64,
    pub estimators: Vec<EstimatorReport>,
    /// `|E[gated GRPO] - E[ungated GRPO]|`: the shift due to gating alone.
    pub gating_shift_norm: f64,
    pub checks: Vec<Check>,
}

impl EnvReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn estimator(&self, name: &str) -> Option<&EstimatorReport> {
        self.estimators.iter().find(|e| e.estimator == name)
    }
}

fn check_le(name: &str, value: f64, tolerance: f64) -> Check {
    Check {
        name: name.to_string(),
        value,
        tolerance,
        pass: value <= tolerance,
    }
}

/// Runs every check on one env.
pub fn env_report(env: &dyn MicroEnv, policy_seed: u64) -> Result<EnvReport, GradlabError> {
    let policy = default_policy(env, policy_seed);
    let trajs = enumerate_trajectories(env, &policy)?;
    let probability_sum: f64 = trajs.iter().map(|t| t.prob).sum();
    let factorization_error = trajs
        .iter()
        .map(|t| (t.logprob - t.logprob_by_rollout).abs())
        .fold(0.0, f64::max);
    let mut identity = GradTable::zeros(&policy.shape());
    for t in &trajs {
        identity.add_scaled(&score(&policy, t), t.prob);
    }
    let objective = objective(env, &policy)?;
    let grad = exact_grad(env, &policy)?;
    let finite_diff = finite_diff_check(env, &policy, FD_STEP)?;

    let specs = [
        EstimatorSpec::PlainReinforce,
        EstimatorSpec::ConstantBaseline { baseline: objective },
        EstimatorSpec::DifferenceReward,
        EstimatorSpec::ComaCounterfactual,
        EstimatorSpec::GatedGrpo { group_size: GROUP_SIZE },
        EstimatorSpec::UngatedGrpo { group_size: GROUP_SIZE },
        EstimatorSpec::GatedReinforce,
    ];
    let mut estimators = Vec::new();
    for spec in specs {
        let m = estimator_moments(spec, env, &policy)?;
        estimators.push(EstimatorReport {
            estimator: spec.name().to_string(),
            spec,
            bias_norm: m.expectation.sub(&grad).norm(),
            expectation: m.expectation.flatten(),
            variance: m.variance,
        });
    }

    let gating_shift_norm = {
        let gated = &estimators[4].expectation;
        let ungated = &estimators[5].expectation;
        libm::sqrt(gated.iter().zip(ungated).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
    };

    let mut checks = vec![
        check_le("probability_sum", (probability_sum - 1.0).abs(), 1e-10),
        check_le("factorization", factorization_error, 1e-12),
        check_le("score_identity", identity.norm(), UNBIASED_TOLERANCE),
    ];
    if grad.max_abs() == 0.0 || env.name() == "constant_reward" {
        checks.push(check_le("zero_gradient", grad.max_abs(), UNBIASED_TOLERANCE));
    } else {
        checks.push(check_le("finite_difference", finite_diff.max_rel_error, FD_TOLERANCE));
    }
    for e in &estimators[..4] {
        checks.push(check_le(
            &alloc::format!("unbiased_{}", e.estimator),
            e.bias_norm,
            UNBIASED_TOLERANCE,
        ));
    }
    let plain = estimators[0].variance;
    let baseline = estimators[1].variance;
    checks.push(check_le("baseline_variance_minus_plain", baseline - plain, 0.0));
    if env.name() == "pathological_clone" {
        let gated = &estimators[4];
        let ungated = &estimators[5];
        checks.push(Check {
            name: "gated_bias_norm".into(),
            value: gated.bias_norm,
            tolerance: BIAS_THRESHOLD,
            pass: gated.bias_norm > BIAS_THRESHOLD,
        });
        let gated_reinforce = &estimators[6];
        checks.push(Check {
            name: "gated_reinforce_bias_norm".into(),
            value: gated_reinforce.bias_norm,
            tolerance: BIAS_THRESHOLD,
            pass: gated_reinforce.bias_norm > BIAS_THRESHOLD,
        });
        checks.push(Check {
            name: "gated_minus_ungated_variance".into(),
            value: gated.variance - ungated.variance,
            tolerance: 0.0,
            pass: gated.variance < ungated.variance,
        });
    }

    Ok(EnvReport {
        env: env.name().to_string(),
        policy_seed,
        trajectories: trajs.len(),
        probability_sum,
        objective,
        exact_grad_norm: grad.norm(),
        exact_grad: grad.flatten(),
        finite_diff,
        factorization_error,
        score_identity_norm: identity.norm(),
        estimators,
        gating_shift_norm,
        checks,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradlabReport {
    pub envs: Vec<EnvReport>,
    pub all_pass: bool,
}

pub const DEFAULT_POLICY_SEED: u64 = 11;

pub fn full_report(env_names: &[&str], policy_seed: u64) -> Result<GradlabReport, GradlabError> {
    let mut envs = Vec::new();
    for name in env_names {
        let env = env_by_name(name).ok_or_else(|| GradlabError::UnknownEnv(name.to_string()))?;
        envs.push(env_report(&env, policy_seed)?);
    }
    let all_pass = envs.iter().all(EnvReport::all_pass);
    Ok(GradlabReport { envs, all_pass })
}
