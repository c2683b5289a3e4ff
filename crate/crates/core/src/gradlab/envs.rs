//! Shipped micro delegation games.
//!
//! Rollout 0 is the root; clones are numbered in spawn order. A move with
//! `action = None` is a null clone: it generates nothing and its return is
//! unusable.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use super::{MicroEnv, Move, Step};

pub const ANSWER_0: usize = 0;
pub const ANSWER_1: usize = 1;
pub const SPAWN: usize = 2;
pub const RET_0: usize = 0;
pub const RET_1: usize = 1;
pub const BABBLE: usize = 2;

/// Per-decision cost standing in for the token penalties.
pub const DECISION_COST: f64 = 0.05;

fn observation(action: Option<usize>) -> usize {
    match action {
        Some(RET_0) => 0,
        Some(RET_1) => 1,
        _ => 2,
    }
}

fn decided(moves: &[Move]) -> f64 {
    moves.iter().filter(|m| m.action.is_some()).count() as f64
}

fn answer_reward(answer: usize, moves: &[Move]) -> f64 {
    let r0 = if answer == ANSWER_1 { 1.0 } else { 0.0 };
    r0 - DECISION_COST * decided(moves)
}

fn root(state: usize) -> Step {
    Step::Decide {
        rollout: 0,
        spawn_turn: None,
        state,
    }
}

fn clone(rollout: usize, spawn_turn: u32, state: usize) -> Step {
    Step::Decide {
        rollout,
        spawn_turn: Some(spawn_turn),
        state,
    }
}

/// One root decision between two answers; answer 0 pays 1.
#[derive(Clone, Copy, Debug, Default)]
pub struct OneStep;

impl MicroEnv for OneStep {
    fn name(&self) -> &'static str {
        "one_step"
    }

    fn shape(&self) -> Vec<usize> {
        vec![2]
    }

    fn step(&self, moves: &[Move]) -> Step {
        match moves.first() {
            None => root(0),
            Some(m) => Step::Terminal(if m.action == Some(0) { 1.0 } else { 0.0 }),
        }
    }
}

/// The root answers or spawns up to twice; each clone returns a hint the root
/// sees on its next turn. The correct answer is 1.
///
/// Rows: 0 root t0 `[A0, A1, SPAWN]`; 1 clone `[RET_0, RET_1]`;
/// 2..=4 root t1 after hint 0/1/none `[A0, A1, SPAWN]`;
/// 5..=7 root t2 after hint 0/1/none `[A0, A1]`.
#[derive(Clone, Copy, Debug, Default)]
pub struct Delegation;

impl MicroEnv for Delegation {
    fn name(&self) -> &'static str {
        "delegation"
    }

    fn shape(&self) -> Vec<usize> {
        vec![3, 2, 3, 3, 3, 2, 2, 2]
    }

    fn step(&self, moves: &[Move]) -> Step {
        let mut i = 0;
        let mut turn = 0u32;
        let mut hint: Option<usize> = None;
        let mut next_clone = 1;
        loop {
            let state = match (turn, hint) {
                (0, _) => 0,
                (1, Some(h)) => 2 + h,
                (_, Some(h)) => 5 + h,
                _ => unreachable!("hint set after turn 0"),
            };
            let Some(m) = moves.get(i) else {
                return root(state);
            };
            i += 1;
            let a = m.action.expect("root is never null");
            if a != SPAWN {
                return Step::Terminal(answer_reward(a, moves));
            }
            let Some(c) = moves.get(i) else {
                return clone(next_clone, turn, 1);
            };
            i += 1;
            hint = Some(observation(c.action));
            next_clone += 1;
            turn += 1;
        }
    }
}

/// The root spawns two clones in parallel, then answers after seeing both
/// hints. Four decisions in total, at most two per rollout.
///
/// Rows: 0 root t0 `[A0, A1, SPAWN]`; 1 clone A, 2 clone B `[RET_0, RET_1]`;
/// 3..=11 root t1 for the hint pair (a, b), each in 0/1/none, `[A0, A1]`.
#[derive(Clone, Copy, Debug, Default)]
pub struct ParallelPair;

impl MicroEnv for ParallelPair {
    fn name(&self) -> &'static str {
        "parallel_pair"
    }

    fn shape(&self) -> Vec<usize> {
        let mut s = vec![3, 2, 2];
        s.extend([2; 9]);
        s
    }

    fn step(&self, moves: &[Move]) -> Step {
        let Some(first) = moves.first() else {
            return root(0);
        };
        let a = first.action.expect("root is never null");
        if a != SPAWN {
            return Step::Terminal(answer_reward(a, moves));
        }
        let Some(ca) = moves.get(1) else {
            return clone(1, 0, 1);
        };
        let Some(cb) = moves.get(2) else {
            return clone(2, 0, 2);
        };
        let state = 3 + 3 * observation(ca.action) + observation(cb.action);
        match moves.get(3) {
            None => root(state),
            Some(m) => Step::Terminal(answer_reward(m.action.expect("root is never null"), moves)),
        }
    }
}

/// Like [`Delegation`] with one spawn, but the clone may babble instead of
/// returning. A babble costs extra (a token-overage analog) and a clone that
/// babbles twice ends without a usable return.
///
/// Rows: 0 root t0 `[A0, A1, SPAWN]`; 1 clone first move, 2 clone after a
/// babble `[RET_0, RET_1, BABBLE]`; 3..=5 root t1 after hint 0/1/none `[A0, A1]`.
#[derive(Clone, Copy, Debug, Default)]
pub struct PathologicalClone;

pub const BABBLE_COST: f64 = 0.1;

impl PathologicalClone {
    fn clone_moves(moves: &[Move]) -> impl Iterator<Item = &Move> {
        moves.iter().filter(|m| m.rollout == 1)
    }
}

impl MicroEnv for PathologicalClone {
    fn name(&self) -> &'static str {
        "pathological_clone"
    }

    fn shape(&self) -> Vec<usize> {
        vec![3, 3, 3, 2, 2, 2]
    }

    fn step(&self, moves: &[Move]) -> Step {
        let Some(first) = moves.first() else {
            return root(0);
        };
        let a = first.action.expect("root is never null");
        if a != SPAWN {
            return Step::Terminal(answer_reward(a, moves));
        }
        let mut i = 1;
        let mut last = None;
        for k in 0..2 {
            let Some(m) = moves.get(i) else {
                return clone(1, 0, 1 + k);
            };
            i += 1;
            last = m.action;
            if m.action != Some(BABBLE) {
                break;
            }
        }
        let hint = observation(last);
        match moves.get(i) {
            None => root(3 + hint),
            Some(m) => {
                let babbles = Self::clone_moves(moves).filter(|m| m.action == Some(BABBLE)).count() as f64;
                Step::Terminal(answer_reward(m.action.expect("root is never null"), moves) - BABBLE_COST * babbles)
            }
        }
    }

    fn parseable(&self, moves: &[Move], rollout: usize) -> bool {
        let last = moves.iter().rfind(|m| m.rollout == rollout);
        matches!(last.and_then(|m| m.action), Some(RET_0 | RET_1))
    }
}

/// Any env with its reward replaced by a constant.
#[derive(Clone, Debug)]
pub struct ConstantReward<E> {
    pub inner: E,
    pub value: f64,
}

impl<E: MicroEnv> MicroEnv for ConstantReward<E> {
    fn name(&self) -> &'static str {
        "constant_reward"
    }

    fn shape(&self) -> Vec<usize> {
        self.inner.shape()
    }

    fn step(&self, moves: &[Move]) -> Step {
        match self.inner.step(moves) {
            Step::Terminal(_) => Step::Terminal(self.value),
            s => s,
        }
    }

    fn parseable(&self, moves: &[Move], rollout: usize) -> bool {
        self.inner.parseable(moves, rollout)
    }
}

pub const ENV_NAMES: [&str; 5] = [
    "one_step",
    "constant_reward",
    "delegation",
    "parallel_pair",
    "pathological_clone",
];

pub fn env_by_name(name: &str) -> Option<Box<dyn MicroEnv>> {
    Some(match name {
        "one_step" => Box::new(OneStep),
        "constant_reward" => Box::new(ConstantReward {
            inner: Delegation,
            value: 0.7,
        }),
        "delegation" => Box::new(Delegation),
        "parallel_pair" => Box::new(ParallelPair),
        "pathological_clone" => Box::new(PathologicalClone),
        _ => return None,
    })
}
