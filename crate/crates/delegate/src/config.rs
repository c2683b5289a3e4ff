//! Run configuration: a TOML file whose keys mirror [`RunConfig`], with CLI
//! flags layered on top.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use delegate_core::orchestrator::ContextMode;
use delegate_core::policy::{PolicyBackend, RandomPolicy, ScriptedPolicy, ToySoftmaxBackend};
use delegate_core::{BudgetConfig, EpisodeOptions, GateKind, Orchestrator, RewardConfig};
use serde::{Deserialize, Serialize};

use crate::remote::{RemoteBackend, RemoteConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    /// `scripted`, `random`, `toy-softmax` or `remote`.
    pub backend: String,
    /// Library policy name for the scripted backend.
    pub name: String,
    pub spawn_prob: f64,
    pub correct_prob: f64,
    /// Turn horizon of the toy softmax state encoder.
    pub toy_turns: usize,
    pub remote: RemoteConfig,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            backend: "scripted".into(),
            name: "perfect-delegator".into(),
            spawn_prob: 0.5,
            correct_prob: 0.5,
            toy_turns: 4,
            remote: RemoteConfig::default(),
        }
    }
}

impl PolicyConfig {
    pub fn build(&self) -> Result<Box<dyn PolicyBackend>> {
        Ok(match self.backend.as_str() {
            "scripted" => Box::new(ScriptedPolicy::by_name(&self.name).with_context(|| {
                format!(
                    "unknown scripted policy {:?}; known: {}",
                    self.name,
                    ScriptedPolicy::NAMES.join(", ")
                )
            })?),
            "random" => Box::new(RandomPolicy::new(self.spawn_prob, self.correct_prob)),
            "toy-softmax" => Box::new(ToySoftmaxBackend::uniform(self.toy_turns.max(1))),
            "remote" => Box::new(RemoteBackend::from_env(self.remote.clone())),
            other => bail!("unknown backend {other:?}; expected scripted, random, toy-softmax or remote"),
        })
    }

    /// Short label used in reports.
    pub fn label(&self) -> String {
        match self.backend.as_str() {
            "scripted" => format!("scripted:{}", self.name),
            "remote" => format!("remote:{}", self.remote.model),
            b => b.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub context_store: Option<PathBuf>,
    pub context_mode: ContextMode,
    pub policy: PolicyConfig,
    pub budgets: BudgetConfig,
    pub episode: EpisodeOptions,
    pub reward: RewardConfig,
    pub group_size: u32,
    pub episodes_per_task: u32,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Episodes in flight at once.
    pub workers: usize,
    /// Threads per episode for the clones of one turn.
    pub clone_threads: usize,
    #[serde(with = "gate_text")]
    pub gate: GateKind,
    /// Use only the first `limit` tasks.
    pub limit: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: PathBuf::from("dataset.jsonl"),
            context_store: None,
            context_mode: ContextMode::Keyed,
            policy: PolicyConfig::default(),
            budgets: BudgetConfig::default(),
            episode: EpisodeOptions::default(),
            reward: RewardConfig::default(),
            group_size: 4,
            episodes_per_task: 4,
            seed: 0,
            output_dir: PathBuf::from("runs/latest"),
            workers: 4,
            clone_threads: 1,
            gate: GateKind::None,
            limit: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            bail!("group_size must be at least 2, got {}", self.group_size);
        }
        if self.episodes_per_task == 0 {
            bail!("episodes_per_task must be positive");
        }
        if !self.episodes_per_task.is_multiple_of(self.group_size) {
            bail!(
                "episodes_per_task ({}) must be a multiple of group_size ({})",
                self.episodes_per_task,
                self.group_size
            );
        }
        self.budgets.validate().map_err(anyhow::Error::msg)?;
        self.reward.validate()?;
        if !self.dataset.exists() {
            bail!("dataset {} does not exist", self.dataset.display());
        }
        if let Some(store) = &self.context_store {
            if !store.exists() {
                bail!("context store {} does not exist", store.display());
            }
        }
        Ok(())
    }

    pub fn orchestrator(&self) -> Orchestrator {
        Orchestrator::new(self.budgets.clone(), self.episode.clone(), self.reward.clone())
    }
}

/// `GateKind` as its short text form (`none`, `hard`, `soft:0.5`, `use`).
pub mod gate_text {
    use delegate_core::GateKind;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(g: &GateKind, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(g)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<GateKind, D::Error> {
        let text = String::deserialize(d)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let mut c = RunConfig {
            gate: GateKind::Soft { alpha: 0.5 },
            ..RunConfig::default()
        };
        c.policy.backend = "random".into();
        let text = c.to_toml().unwrap();
        assert!(text.contains("gate = \"soft:0.5\""));
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let c: RunConfig = toml::from_str("seed = 9\n[budgets]\nmax_tool_turns = 3\n").unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.budgets.max_tool_turns, 3);
        assert_eq!(c.budgets.generation_limit, 1024);
        assert_eq!(c.group_size, 4);
        assert!(toml::from_str::<RunConfig>("sede = 9\n").is_err());
    }
}
