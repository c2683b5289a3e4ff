//! Accuracy and token aggregates over scored trajectories.

use std::collections::BTreeMap;

use anyhow::{bail, Result};
use delegate_core::Trajectory;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetPoint {
    pub budget: u64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub episodes: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// Root plus clone generated tokens per episode.
    pub avg_generated_tokens: f64,
    /// Every token in every rollout context (prompts, documents, tool
    /// results, generations) per episode.
    pub avg_total_budget_tokens: f64,
    pub avg_clones: f64,
    pub avg_reward: f64,
    /// An episode counts at budget `b` if it is correct and generated at
    /// most `b` tokens.
    pub accuracy_at_budget: Vec<BudgetPoint>,
    /// Rollout statuses, root and clones together.
    pub status_counts: BTreeMap<String, usize>,
    pub root_status_counts: BTreeMap<String, usize>,
    /// Episodes lost to transport failures; in neither numerator nor
    /// denominator.
    pub unscored: usize,
}

impl MetricsReport {
    pub fn from_trajectories(trajs: &[Trajectory], unscored: usize) -> Result<Self> {
        if trajs.is_empty() {
            bail!("no scored trajectories to aggregate");
        }
        let n = trajs.len();
        let nf = n as f64;
        let is_correct = |t: &Trajectory| t.correct == Some(true);
        let correct = trajs.iter().filter(|t| is_correct(t)).count();
        let mut status_counts = BTreeMap::new();
        let mut root_status_counts = BTreeMap::new();
        for t in trajs {
            *root_status_counts
                .entry(t.root().status.as_str().to_string())
                .or_insert(0) += 1;
            for r in &t.rollouts {
                *status_counts.entry(r.status.as_str().to_string()).or_insert(0) += 1;
            }
        }
        let mut budgets: Vec<u64> = trajs.iter().map(Trajectory::generated_tokens).collect();
        budgets.sort_unstable();
        budgets.dedup();
        let accuracy_at_budget = budgets
            .into_iter()
            .map(|b| BudgetPoint {
                budget: b,
                accuracy: trajs
                    .iter()
                    .filter(|t| is_correct(t) && t.generated_tokens() <= b)
                    .count() as f64
                    / nf,
            })
            .collect();
        Ok(MetricsReport {
            episodes: n,
            correct,
            accuracy: correct as f64 / nf,
            avg_generated_tokens: trajs.iter().map(|t| t.generated_tokens() as f64).sum::<f64>() / nf,
            avg_total_budget_tokens: trajs.iter().map(|t| t.total_context_tokens as f64).sum::<f64>() / nf,
            avg_clones: trajs.iter().map(|t| t.clone_count() as f64).sum::<f64>() / nf,
            avg_reward: trajs.iter().map(|t| t.reward.unwrap_or(0.0)).sum::<f64>() / nf,
            accuracy_at_budget,
            status_counts,
            root_status_counts,
            unscored,
        })
    }

    /// `budget,accuracy` rows for plotting.
    pub fn budget_csv(&self) -> String {
        let mut out = String::from("budget,accuracy\n");
        for p in &self.accuracy_at_budget {
            out.push_str(&format!("{},{}\n", p.budget, p.accuracy));
        }
        out
    }
}
