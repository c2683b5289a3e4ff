//! The six subcommands as library functions. `main.rs` only parses flags.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use delegate_core::arith::{generate_problem, normalize_answer};
use delegate_core::credit::{gate_weight, grpo_advantages, normalize_whitespace, per_token_weights, TrainerMetadata};
use delegate_core::gradlab::{self, GradlabReport};
use delegate_core::orchestrator::{EpisodeError, StandardEnv, TaskKind, TaskSpec};
use delegate_core::policy::PolicyBackend;
use delegate_core::seed::mix_seed;
use delegate_core::{AdvantageLedger, GateKind, GenConfig, GroupTag, Orchestrator, Trajectory};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::exec::{parallel_map, Threaded};
use crate::io::{
    read_context_store, read_jsonl, read_tasks, read_trajectories, sidecar_path, write_json, write_jsonl,
    DatasetRecord, Manifest,
};
use crate::metrics::MetricsReport;

pub const EXPORT_SCHEMA_VERSION: u32 = 1;

/// Seed of member `member` of task `task_index`.
pub fn episode_seed(run_seed: u64, task_index: usize, member: u32) -> u64 {
    mix_seed(mix_seed(run_seed, task_index as u64), member as u64)
}

// ---------------------------------------------------------------- gen-dataset

pub fn gen_dataset(config: &GenConfig, n: u64, out: &Path) -> Result<Manifest> {
    config.validate().map_err(|e| anyhow::anyhow!("{e}"))?;
    let mut records = Vec::with_capacity(n as usize);
    for i in 0..n {
        let p = generate_problem(config, i).map_err(|e| anyhow::anyhow!("problem {i}: {e}"))?;
        records.push(DatasetRecord::from(&p));
    }
    write_jsonl(out, &records)?;
    let mut manifest = Manifest::new("gen-dataset", config.seed, json!({ "n": n, "gen": config }));
    let base = out.parent().unwrap_or(Path::new(""));
    manifest.add_file(base, out)?;
    manifest.write(&sidecar_path(out))?;
    Ok(manifest)
}

// ---------------------------------------------------------------- episodes

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnscoredEpisode {
    pub task_id: String,
    pub task_index: usize,
    pub member: u32,
    pub seed: u64,
    pub error: String,
}

struct Batch {
    scored: Vec<Trajectory>,
    unscored: Vec<UnscoredEpisode>,
}

fn load_env(cfg: &RunConfig) -> Result<StandardEnv> {
    Ok(match &cfg.context_store {
        Some(p) => StandardEnv::with_store(read_context_store(p)?, cfg.context_mode),
        None => StandardEnv::new(),
    })
}

fn load_tasks(cfg: &RunConfig) -> Result<Vec<TaskSpec>> {
    let mut tasks = read_tasks(&cfg.dataset)?;
    if let Some(n) = cfg.limit {
        tasks.truncate(n);
    }
    if tasks.is_empty() {
        bail!("dataset {} has no tasks", cfg.dataset.display());
    }
    Ok(tasks)
}

/// Runs `per_task` episodes of every task. Transport failures become
/// unscored entries; any other episode error aborts.
#[allow(clippy::too_many_arguments)]
fn run_batch(
    orch: &Orchestrator,
    policy: &dyn PolicyBackend,
    env: &StandardEnv,
    tasks: &[TaskSpec],
    per_task: u32,
    group_size: Option<u32>,
    seed: u64,
    workers: usize,
    clone_threads: usize,
) -> Result<Batch> {
    let jobs: Vec<(usize, u32)> = (0..tasks.len())
        .flat_map(|t| (0..per_task).map(move |m| (t, m)))
        .collect();
    let executor = Threaded {
        max_threads: clone_threads.max(1),
    };
    let outcomes = parallel_map(jobs, workers, |(t, m)| {
        let s = episode_seed(seed, t, m);
        (t, m, s, orch.run_episode_with(&tasks[t], policy, env, s, &executor))
    });
    let mut batch = Batch {
        scored: Vec::new(),
        unscored: Vec::new(),
    };
    for (t, m, s, outcome) in outcomes {
        match outcome {
            Ok(mut traj) => {
                if let Some(g) = group_size {
                    traj.group = Some(GroupTag {
                        group_id: format!("{}#{}", tasks[t].id, m / g),
                        member: m % g,
                        size: g,
                    });
                }
                batch.scored.push(traj);
            }
            Err(EpisodeError::Transport(e)) => batch.unscored.push(UnscoredEpisode {
                task_id: tasks[t].id.clone(),
                task_index: t,
                member: m,
                seed: s,
                error: e.to_string(),
            }),
            Err(e) => bail!("task {} member {m}: {e}", tasks[t].id),
        }
    }
    Ok(batch)
}

fn check_failure_rate(unscored: usize, total: usize) -> Result<()> {
    if unscored * 2 > total {
        bail!("{unscored} of {total} episodes failed in transport; more than half, giving up");
    }
    Ok(())
}

// ---------------------------------------------------------------- run-eval

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvantageRow {
    pub trajectory_id: String,
    pub group_id: String,
    pub member: u32,
    pub reward: f64,
    pub advantage: f64,
    /// Gate weight per rollout, root first.
    pub gates: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub policy: String,
    pub gate: String,
    pub tasks: usize,
    pub complete_groups: usize,
    pub metrics: MetricsReport,
}

pub struct EvalOutcome {
    pub report: EvalReport,
    pub trajectories: Vec<Trajectory>,
    pub unscored: Vec<UnscoredEpisode>,
}

/// Groups tagged trajectories, keeping only complete groups, members in
/// order. Also returns how many groups and trajectories were dropped.
fn complete_groups(
    trajs: &[Trajectory],
    expected_size: Option<u32>,
) -> (Vec<(String, Vec<&Trajectory>)>, usize, usize) {
    let mut by_group: BTreeMap<&str, Vec<&Trajectory>> = BTreeMap::new();
    let mut order: Vec<&str> = Vec::new();
    let mut untagged = 0;
    for t in trajs {
        match &t.group {
            Some(g) => {
                let e = by_group.entry(g.group_id.as_str()).or_default();
                if e.is_empty() {
                    order.push(g.group_id.as_str());
                }
                e.push(t);
            }
            None => untagged += 1,
        }
    }
    let mut groups = Vec::new();
    let mut skipped = 0;
    let mut skipped_trajs = untagged;
    for id in order {
        let mut members = by_group.remove(id).unwrap_or_default();
        members.sort_by_key(|t| t.group.as_ref().map(|g| g.member));
        let size = members[0].group.as_ref().map(|g| g.size).unwrap_or(0);
        let full = size >= 2
            && expected_size.is_none_or(|e| e == size)
            && members.len() == size as usize
            && members.iter().enumerate().all(|(i, t)| {
                t.group.as_ref().is_some_and(|g| g.member == i as u32 && g.size == size) && t.reward.is_some()
            });
        if full {
            groups.push((id.to_string(), members));
        } else {
            skipped += 1;
            skipped_trajs += members.len();
        }
    }
    (groups, skipped, skipped_trajs)
}

pub fn run_eval(cfg: &RunConfig) -> Result<EvalOutcome> {
    cfg.validate()?;
    let tasks = load_tasks(cfg)?;
    let env = load_env(cfg)?;
    let policy = cfg.policy.build()?;
    let orch = cfg.orchestrator();
    let batch = run_batch(
        &orch,
        policy.as_ref(),
        &env,
        &tasks,
        cfg.episodes_per_task,
        Some(cfg.group_size),
        cfg.seed,
        cfg.workers,
        cfg.clone_threads,
    )?;
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let unscored_path = dir.join("unscored.jsonl");
    write_jsonl(&unscored_path, &batch.unscored)?;
    let total = tasks.len() * cfg.episodes_per_task as usize;
    check_failure_rate(batch.unscored.len(), total)?;

    let (groups, _, _) = complete_groups(&batch.scored, Some(cfg.group_size));
    let mut advantages = Vec::new();
    for (id, members) in &groups {
        let rewards: Vec<f64> = members.iter().map(|t| t.reward.unwrap_or(0.0)).collect();
        let adv = grpo_advantages(&rewards)?;
        for (t, a) in members.iter().zip(adv) {
            let gates = t
                .rollouts
                .iter()
                .map(|r| gate_weight(cfg.gate, t, r))
                .collect::<Result<Vec<_>, _>>()?;
            advantages.push(AdvantageRow {
                trajectory_id: t.trajectory_id.clone(),
                group_id: id.clone(),
                member: t.group.as_ref().map_or(0, |g| g.member),
                reward: t.reward.unwrap_or(0.0),
                advantage: a,
                gates,
            });
        }
    }

    let metrics = MetricsReport::from_trajectories(&batch.scored, batch.unscored.len())?;
    let report = EvalReport {
        policy: cfg.policy.label(),
        gate: cfg.gate.to_string(),
        tasks: tasks.len(),
        complete_groups: groups.len(),
        metrics,
    };
    let traj_path = dir.join("trajectories.jsonl");
    let adv_path = dir.join("advantages.jsonl");
    let report_path = dir.join("report.json");
    let curve_path = dir.join("budget_curve.csv");
    write_jsonl(&traj_path, &batch.scored)?;
    write_jsonl(&adv_path, &advantages)?;
    write_json(&report_path, &report)?;
    fs::write(&curve_path, report.metrics.budget_csv())?;

    let mut manifest = Manifest::new("run-eval", cfg.seed, serde_json::to_value(cfg)?);
    for p in [&traj_path, &unscored_path, &adv_path, &report_path, &curve_path] {
        manifest.add_file(dir, p)?;
    }
    manifest.summary = json!({
        "episodes": total,
        "scored": batch.scored.len(),
        "unscored": batch.unscored.len(),
        "accuracy": report.metrics.accuracy,
    });
    manifest.write(&dir.join("manifest.json"))?;
    Ok(EvalOutcome {
        report,
        trajectories: batch.scored,
        unscored: batch.unscored,
    })
}

// ---------------------------------------------------------------- self-consistency

/// Comparison key of an answer: the integer for arithmetic, lowercased
/// whitespace-collapsed text otherwise.
pub fn vote_key(kind: TaskKind, answer: &str) -> Option<String> {
    match kind {
        TaskKind::Arithmetic => normalize_answer(answer).map(|v| v.to_string()),
        TaskKind::Qa => {
            let t = normalize_whitespace(answer).to_lowercase();
            let t = t.trim_end_matches('.').trim().to_string();
            (!t.is_empty()).then_some(t)
        }
    }
}

/// Index of the winning sample: most frequent key, ties to the key sampled
/// first. `None` when no sample produced a key.
pub fn majority_vote(keys: &[Option<String>]) -> Option<usize> {
    let mut counts: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for (i, k) in keys.iter().enumerate() {
        if let Some(k) = k {
            counts.entry(k.as_str()).or_insert((0, i)).0 += 1;
        }
    }
    counts
        .values()
        .max_by(|a, b| a.0.cmp(&b.0).then(b.1.cmp(&a.1)))
        .map(|&(_, first)| first)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoteRecord {
    pub task_id: String,
    pub answers: Vec<Option<String>>,
    pub voted: Option<String>,
    pub correct: bool,
    pub generated_tokens: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfConsistencyReport {
    pub policy: String,
    pub k: u32,
    pub tasks: usize,
    pub scored_tasks: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// All k samples together, per task.
    pub avg_generated_tokens: f64,
    /// `avg_generated_tokens / k`: the samples run side by side.
    pub latency_proxy_tokens: f64,
    pub avg_total_budget_tokens: f64,
    pub unscored_samples: usize,
}

pub fn self_consistency(cfg: &RunConfig, k: u32) -> Result<SelfConsistencyReport> {
    if k == 0 {
        bail!("k must be positive");
    }
    cfg.validate()?;
    let tasks = load_tasks(cfg)?;
    let env = load_env(cfg)?;
    let policy = cfg.policy.build()?;
    let mut orch = cfg.orchestrator();
    orch.options.tools_enabled = false;
    let batch = run_batch(&orch, policy.as_ref(), &env, &tasks, k, None, cfg.seed, cfg.workers, 1)?;
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir)?;
    let unscored_path = dir.join("sc_unscored.jsonl");
    write_jsonl(&unscored_path, &batch.unscored)?;
    check_failure_rate(batch.unscored.len(), tasks.len() * k as usize)?;

    let mut by_task: BTreeMap<&str, Vec<&Trajectory>> = BTreeMap::new();
    for t in &batch.scored {
        by_task.entry(t.task_id.as_str()).or_default().push(t);
    }
    let mut votes = Vec::new();
    for task in &tasks {
        let Some(samples) = by_task.get(task.id.as_str()) else {
            continue;
        };
        let answers: Vec<Option<String>> = samples.iter().map(|t| t.final_answer.clone()).collect();
        let keys: Vec<Option<String>> = answers
            .iter()
            .map(|a| a.as_deref().and_then(|a| vote_key(task.kind, a)))
            .collect();
        let voted = majority_vote(&keys).and_then(|i| answers[i].clone());
        let correct = voted
            .as_deref()
            .is_some_and(|v| delegate_core::orchestrator::EnvAdapter::check(&env, task, v));
        votes.push(VoteRecord {
            task_id: task.id.clone(),
            answers,
            voted,
            correct,
            generated_tokens: samples.iter().map(|t| t.generated_tokens()).sum(),
        });
    }
    if votes.is_empty() {
        bail!("no task produced a scored sample");
    }
    let n = votes.len() as f64;
    let correct = votes.iter().filter(|v| v.correct).count();
    let avg_generated = votes.iter().map(|v| v.generated_tokens as f64).sum::<f64>() / n;
    let report = SelfConsistencyReport {
        policy: cfg.policy.label(),
        k,
        tasks: tasks.len(),
        scored_tasks: votes.len(),
        correct,
        accuracy: correct as f64 / n,
        avg_generated_tokens: avg_generated,
        latency_proxy_tokens: avg_generated / k as f64,
        avg_total_budget_tokens: batch.scored.iter().map(|t| t.total_context_tokens as f64).sum::<f64>() / n,
        unscored_samples: batch.unscored.len(),
    };
    let samples_path = dir.join("sc_samples.jsonl");
    let votes_path = dir.join("sc_votes.jsonl");
    let report_path = dir.join("sc_report.json");
    write_jsonl(&samples_path, &batch.scored)?;
    write_jsonl(&votes_path, &votes)?;
    write_json(&report_path, &report)?;
    let mut manifest = Manifest::new("self-consistency", cfg.seed, json!({ "k": k, "run": cfg }));
    for p in [&samples_path, &unscored_path, &votes_path, &report_path] {
        manifest.add_file(dir, p)?;
    }
    manifest.write(&dir.join("sc_manifest.json"))?;
    Ok(report)
}

// ---------------------------------------------------------------- export-batch

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportHeader {
    pub kind: String,
    pub schema_version: u32,
    pub gate: GateKind,
    pub trainer: TrainerMetadata,
    pub groups: usize,
    pub records: usize,
    pub skipped_groups: usize,
    pub skipped_trajectories: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportRecord {
    pub kind: String,
    pub group_id: String,
    pub member: u32,
    pub reward: f64,
    pub advantage: f64,
    pub ledger: AdvantageLedger,
    pub trajectory: Trajectory,
}

pub fn export_batch(inputs: &[PathBuf], gate: GateKind, trainer: &TrainerMetadata, out: &Path) -> Result<ExportHeader> {
    let mut trajs = Vec::new();
    for p in inputs {
        trajs.extend(read_trajectories(p)?);
    }
    let (groups, skipped_groups, skipped_trajectories) = complete_groups(&trajs, Some(trainer.group_size));
    let mut records = Vec::new();
    for (id, members) in &groups {
        let rewards: Vec<f64> = members.iter().map(|t| t.reward.unwrap_or(0.0)).collect();
        let adv = grpo_advantages(&rewards)?;
        for (t, a) in members.iter().zip(adv) {
            let ledger = per_token_weights(t, a, gate)?;
            records.push(ExportRecord {
                kind: "record".into(),
                group_id: id.clone(),
                member: t.group.as_ref().map_or(0, |g| g.member),
                reward: t.reward.unwrap_or(0.0),
                advantage: a,
                ledger,
                trajectory: (*t).clone(),
            });
        }
    }
    if skipped_groups > 0 || skipped_trajectories > 0 {
        eprintln!("warning: skipped {skipped_groups} incomplete group(s), {skipped_trajectories} trajectorie(s)");
    }
    let header = ExportHeader {
        kind: "header".into(),
        schema_version: EXPORT_SCHEMA_VERSION,
        gate,
        trainer: trainer.clone(),
        groups: groups.len(),
        records: records.len(),
        skipped_groups,
        skipped_trajectories,
    };
    let mut lines: Vec<Value> = Vec::with_capacity(records.len() + 1);
    lines.push(serde_json::to_value(&header)?);
    for r in &records {
        lines.push(serde_json::to_value(r)?);
    }
    write_jsonl(out, &lines)?;
    Ok(header)
}

/// Header and records of an export file.
pub fn read_export(path: &Path) -> Result<(ExportHeader, Vec<ExportRecord>)> {
    let lines: Vec<Value> = read_jsonl(path)?;
    let mut it = lines.into_iter();
    let header: ExportHeader = serde_json::from_value(it.next().context("export file is empty")?)
        .with_context(|| format!("{}: bad export header", path.display()))?;
    if header.schema_version != EXPORT_SCHEMA_VERSION {
        bail!(
            "{}: export schema version {}, expected {}",
            path.display(),
            header.schema_version,
            EXPORT_SCHEMA_VERSION
        );
    }
    let records = it
        .map(|v| serde_json::from_value(v).map_err(anyhow::Error::from))
        .collect::<Result<Vec<ExportRecord>>>()?;
    Ok((header, records))
}

// ---------------------------------------------------------------- gradlab

pub fn gradlab_report(envs: &[String], seed: u64) -> Result<GradlabReport> {
    let names: Vec<&str> = if envs.is_empty() {
        gradlab::ENV_NAMES.to_vec()
    } else {
        envs.iter().map(String::as_str).collect()
    };
    gradlab::full_report(&names, seed).map_err(|e| anyhow::anyhow!("{e}"))
}

// ---------------------------------------------------------------- metrics

fn is_export(path: &Path) -> Result<bool> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let Some(first) = text.lines().find(|l| !l.trim().is_empty()) else {
        return Ok(false);
    };
    let v: Value = serde_json::from_str(first).with_context(|| format!("{}:1", path.display()))?;
    Ok(v.get("kind").and_then(Value::as_str) == Some("header"))
}

/// Aggregates trajectory files and export files. Plain trajectory files
/// count as ungated; all inputs must agree on the gate.
pub fn metrics(inputs: &[PathBuf]) -> Result<MetricsReport> {
    let mut trajs = Vec::new();
    let mut gate: Option<(GateKind, &Path)> = None;
    for p in inputs {
        let (g, mut ts) = if is_export(p)? {
            let (h, recs) = read_export(p)?;
            (h.gate, recs.into_iter().map(|r| r.trajectory).collect())
        } else {
            (GateKind::None, read_trajectories(p)?)
        };
        match gate {
            Some((prev, from)) if prev != g => {
                bail!("gate mismatch: {} is {prev}, {} is {g}", from.display(), p.display())
            }
            None => gate = Some((g, p)),
            _ => {}
        }
        trajs.append(&mut ts);
    }
    MetricsReport::from_trajectories(&trajs, 0)
}
