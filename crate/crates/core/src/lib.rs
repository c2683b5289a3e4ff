//! Clone-delegation rollouts and their credit assignment.
//!
//! A root rollout may spawn same-weight clones through a single `clone` tool.
//! This crate holds everything that is pure computation:
//!
//! - [`arith`]: the synthetic arithmetic task family (generation, exact evaluation).
//! - [`protocol`]: the clone tool schema, tolerant tool-call parsing, return extraction.
//! - [`policy`]: the backend interface plus scripted, random and tabular-softmax policies.
//! - [`orchestrator`]: the joint episode (root turns, clone spawn/join, budgets, accounting).
//! - [`credit`]: global reward, group advantages, rollout gates, per-token weights,
//!   counterfactual difference rewards.
//! - [`gradlab`]: exhaustive-enumeration checks of policy-gradient estimators on
//!   micro delegation games.
//!
//! The crate is `no_std` and needs only `alloc`. IO, threads, HTTP and the CLI
//! live in the companion `delegate` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod arith;
pub mod credit;
pub mod gradlab;
pub mod orchestrator;
pub mod policy;
pub mod protocol;
pub mod seed;
pub mod tokens;

pub use arith::{ArithmeticProblem, Expr, GenConfig, Op};
pub use credit::{AdvantageLedger, GateKind, RewardConfig};
pub use orchestrator::{BudgetConfig, EpisodeOptions, GroupTag, Orchestrator, Rollout, RolloutStatus, Trajectory};
pub use policy::{PolicyBackend, RolloutRole};
pub use protocol::{CloneReturn, MarkerConfig, ToolCall};
pub use tokens::TokenCounter;
