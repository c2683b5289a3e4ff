use std::fs;
use std::path::{Path, PathBuf};

use delegate::commands::{self, export_batch, gen_dataset, metrics, read_export, run_eval, self_consistency};
use delegate::io::{read_trajectories, write_jsonl, DatasetRecord};
use delegate::RunConfig;
use delegate_core::arith::parse_expr;
use delegate_core::credit::{compute_reward, per_token_weights, TrainerMetadata};
use delegate_core::orchestrator::RolloutStatus;
use delegate_core::{ArithmeticProblem, GateKind, GenConfig, Trajectory};
use tempfile::TempDir;

fn dataset(dir: &Path, n: u64, seed: u64) -> PathBuf {
    let path = dir.join(format!("ds-{seed}-{n}.jsonl"));
    gen_dataset(&GenConfig::with_seed(seed), n, &path).unwrap();
    path
}

fn run_cfg(dir: &Path, dataset: PathBuf, policy: &str, out: &str) -> RunConfig {
    let mut c = RunConfig {
        dataset,
        output_dir: dir.join(out),
        ..RunConfig::default()
    };
    c.policy.name = policy.into();
    c
}

#[test]
fn gen_dataset_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b/b.jsonl");
    let cfg = GenConfig::with_seed(7);
    let ma = gen_dataset(&cfg, 1000, &a).unwrap();
    let mb = gen_dataset(&cfg, 1000, &b).unwrap();
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(ma.files[0].sha256, mb.files[0].sha256);
    assert_eq!(fs::read_to_string(&a).unwrap().lines().count(), 1000);
    let again = gen_dataset(&cfg, 1000, &a).unwrap();
    assert_eq!(
        fs::read(dir.path().join("a.manifest.json")).unwrap(),
        serde_json::to_vec_pretty(&again)
            .unwrap()
            .into_iter()
            .chain(*b"\n")
            .collect::<Vec<u8>>()
    );
    let recs: Vec<DatasetRecord> = delegate::io::read_jsonl(&a).unwrap();
    assert!(recs.iter().all(|r| r.to_problem().is_ok()));
}

#[test]
fn empty_dataset_has_a_manifest() {
    let dir = TempDir::new().unwrap();
    let p = dir.path().join("empty.jsonl");
    let m = gen_dataset(&GenConfig::with_seed(1), 0, &p).unwrap();
    assert_eq!(fs::read(&p).unwrap().len(), 0);
    assert_eq!(m.files[0].bytes, 0);
    assert!(dir.path().join("empty.manifest.json").exists());
}

#[test]
fn bad_gen_config_is_rejected() {
    let dir = TempDir::new().unwrap();
    let cfg = GenConfig {
        max_ops: 0,
        ..GenConfig::default()
    };
    assert!(gen_dataset(&cfg, 3, &dir.path().join("x.jsonl")).is_err());
}

#[test]
fn perfect_delegator_scores_everything() {
    let dir = TempDir::new().unwrap();
    let cfg = run_cfg(dir.path(), dataset(dir.path(), 30, 3), "perfect-delegator", "run");
    let out = run_eval(&cfg).unwrap();
    let m = &out.report.metrics;
    assert_eq!(m.episodes, 120);
    assert_eq!(m.accuracy, 1.0);
    assert_eq!(out.report.complete_groups, 30);
    // At the largest budget the curve equals the headline accuracy.
    assert_eq!(m.accuracy_at_budget.last().unwrap().accuracy, m.accuracy);
    assert!(m
        .accuracy_at_budget
        .windows(2)
        .all(|w| w[0].budget < w[1].budget && w[0].accuracy <= w[1].accuracy));
    for f in [
        "trajectories.jsonl",
        "unscored.jsonl",
        "advantages.jsonl",
        "report.json",
        "budget_curve.csv",
        "manifest.json",
    ] {
        assert!(cfg.output_dir.join(f).exists(), "{f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(cfg.output_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["files"].as_array().unwrap().len(), 5);
    let csv = fs::read_to_string(cfg.output_dir.join("budget_curve.csv")).unwrap();
    assert!(csv.starts_with("budget,accuracy\n"));
    let written = read_trajectories(&cfg.output_dir.join("trajectories.jsonl")).unwrap();
    assert_eq!(written, out.trajectories);
    assert!(written.iter().all(|t| t.group.as_ref().is_some_and(|g| g.size == 4)));
}

#[test]
fn wrong_direct_answers_score_zero() {
    let dir = TempDir::new().unwrap();
    let cfg = run_cfg(dir.path(), dataset(dir.path(), 10, 4), "wrong-answerer", "run");
    let m = run_eval(&cfg).unwrap().report.metrics;
    assert_eq!(m.accuracy, 0.0);
    assert_eq!(m.avg_clones, 0.0);
    assert!(m.accuracy_at_budget.iter().all(|p| p.accuracy == 0.0));
}

#[test]
fn run_config_is_validated() {
    let dir = TempDir::new().unwrap();
    let ds = dataset(dir.path(), 2, 1);
    let mut c = run_cfg(dir.path(), ds.clone(), "perfect-delegator", "r");
    c.group_size = 1;
    assert!(run_eval(&c).is_err());
    let mut c = run_cfg(dir.path(), ds.clone(), "perfect-delegator", "r");
    c.episodes_per_task = 6;
    assert!(run_eval(&c).is_err());
    let c = run_cfg(dir.path(), dir.path().join("missing.jsonl"), "perfect-delegator", "r");
    assert!(run_eval(&c).is_err());
    let c = run_cfg(dir.path(), ds, "no-such-policy", "r");
    assert!(run_eval(&c).is_err());
}

#[test]
fn runs_are_identical_across_pool_sizes() {
    let dir = TempDir::new().unwrap();
    let ds = dataset(dir.path(), 12, 9);
    let mut files = Vec::new();
    for (i, (workers, clone_threads)) in [(1, 1), (8, 1), (3, 4)].into_iter().enumerate() {
        let mut c = run_cfg(dir.path(), ds.clone(), "perfect-delegator", &format!("r{i}"));
        c.workers = workers;
        c.clone_threads = clone_threads;
        c.policy.backend = "random".into();
        run_eval(&c).unwrap();
        files.push(fs::read(c.output_dir.join("trajectories.jsonl")).unwrap());
    }
    assert_eq!(files[0], files[1]);
    assert_eq!(files[0], files[2]);
}

#[test]
fn self_consistency_with_a_reliable_sampler() {
    let dir = TempDir::new().unwrap();
    let mut c = run_cfg(dir.path(), dataset(dir.path(), 6, 2), "direct-answerer", "sc");
    c.group_size = 2;
    c.episodes_per_task = 2;
    let r = self_consistency(&c, 8).unwrap();
    assert_eq!(r.accuracy, 1.0);
    assert_eq!(r.scored_tasks, 6);
    let samples = read_trajectories(&c.output_dir.join("sc_samples.jsonl")).unwrap();
    assert_eq!(samples.len(), 48);
    assert!(samples.iter().all(|t| t.clone_count() == 0));
    let per_sample = samples.iter().map(|t| t.generated_tokens() as f64).sum::<f64>() / 48.0;
    assert!((r.latency_proxy_tokens - per_sample).abs() < 1e-9);
    assert!(self_consistency(&c, 0).is_err());
}

#[test]
fn self_consistency_on_wrong_sampler() {
    let dir = TempDir::new().unwrap();
    let c = run_cfg(dir.path(), dataset(dir.path(), 3, 2), "wrong-answerer", "sc");
    assert_eq!(self_consistency(&c, 3).unwrap().accuracy, 0.0);
}

fn five_prefix_dataset(dir: &Path) -> PathBuf {
    let p = ArithmeticProblem::from_expr(
        "five".into(),
        0,
        parse_expr("(3483838+239)×5709526+8803−5446472+5530030").unwrap(),
    )
    .unwrap();
    let path = dir.join("five.jsonl");
    write_jsonl(&path, [DatasetRecord::from(&p)]).unwrap();
    path
}

fn set_rewards(path: &Path, rewards: &[f64]) -> Vec<Trajectory> {
    let mut trajs = read_trajectories(path).unwrap();
    for (t, r) in trajs.iter_mut().zip(rewards.iter().cycle()) {
        t.reward = Some(*r);
    }
    write_jsonl(path, &trajs).unwrap();
    trajs
}

#[test]
fn export_carries_group_advantages_and_gates() {
    let dir = TempDir::new().unwrap();
    let cfg = run_cfg(dir.path(), five_prefix_dataset(dir.path()), "five-prefix", "run");
    run_eval(&cfg).unwrap();
    let traj_path = cfg.output_dir.join("trajectories.jsonl");
    set_rewards(&traj_path, &[1.0, 0.0, 1.0, 0.0]);
    let out = dir.path().join("batch.jsonl");
    let h = export_batch(
        std::slice::from_ref(&traj_path),
        GateKind::Hard,
        &TrainerMetadata::default(),
        &out,
    )
    .unwrap();
    assert_eq!((h.groups, h.records, h.skipped_groups), (1, 4, 0));
    let (header, records) = read_export(&out).unwrap();
    assert_eq!(header, h);
    assert_eq!(header.trainer.group_size, 4);
    assert_eq!(header.trainer.clip_ratio, 0.1);
    let adv: Vec<f64> = records.iter().map(|r| r.advantage).collect();
    for (a, e) in adv.iter().zip([1.0, -1.0, 1.0, -1.0]) {
        assert!((a - e).abs() < 1e-9, "{adv:?}");
    }
    for r in &records {
        assert!((r.ledger.group_advantage - r.advantage).abs() == 0.0);
        let t = &r.trajectory;
        let truncated: Vec<_> = t
            .rollouts
            .iter()
            .filter(|x| x.status == RolloutStatus::TruncatedByTokenLimit)
            .collect();
        assert_eq!(truncated.len(), 2);
        for (w, roll) in r.ledger.per_rollout.iter().zip(&t.rollouts) {
            if roll.status == RolloutStatus::TruncatedByTokenLimit {
                assert_eq!(w.gate_weight, 0.0);
                assert!(w.token_weights.iter().all(|x| x.to_bits() == 0));
            } else {
                assert!(w.token_weights.iter().all(|&x| x == r.advantage));
            }
        }
        // The exported ledger is exactly what the credit module computes.
        let again = per_token_weights(t, r.advantage, GateKind::Hard).unwrap();
        assert_eq!(again, r.ledger);
        assert_eq!(again.total_weight().to_bits(), r.ledger.total_weight().to_bits());
    }
}

#[test]
fn soft_gate_on_clean_clones() {
    let dir = TempDir::new().unwrap();
    let cfg = run_cfg(dir.path(), dataset(dir.path(), 2, 8), "perfect-delegator", "run");
    run_eval(&cfg).unwrap();
    let out = dir.path().join("soft.jsonl");
    export_batch(
        &[cfg.output_dir.join("trajectories.jsonl")],
        GateKind::Soft { alpha: 1.0 },
        &TrainerMetadata::default(),
        &out,
    )
    .unwrap();
    let (_, records) = read_export(&out).unwrap();
    let expected = 1.0 / (1.0 + (-5.0f64).exp());
    for r in &records {
        for w in r.ledger.per_rollout.iter().skip(1) {
            assert!((w.gate_weight - expected).abs() < 1e-12);
            assert!((w.gate_weight - 0.9933).abs() < 1e-4);
        }
        assert_eq!(r.ledger.per_rollout[0].gate_weight, 1.0);
    }
}

#[test]
fn incomplete_groups_are_skipped() {
    let dir = TempDir::new().unwrap();
    let cfg = run_cfg(dir.path(), dataset(dir.path(), 3, 8), "perfect-delegator", "run");
    run_eval(&cfg).unwrap();
    let path = cfg.output_dir.join("trajectories.jsonl");
    let mut trajs = read_trajectories(&path).unwrap();
    trajs.remove(5);
    trajs[0].group = None;
    let cut = dir.path().join("cut.jsonl");
    write_jsonl(&cut, &trajs).unwrap();
    let h = export_batch(
        &[cut],
        GateKind::None,
        &TrainerMetadata::default(),
        &dir.path().join("b.jsonl"),
    )
    .unwrap();
    assert_eq!(h.groups, 1);
    assert_eq!(h.skipped_groups, 2);
    assert_eq!(h.skipped_trajectories, 7);
    let other = TrainerMetadata {
        group_size: 8,
        ..TrainerMetadata::default()
    };
    let h = export_batch(&[path], GateKind::None, &other, &dir.path().join("c.jsonl")).unwrap();
    assert_eq!((h.groups, h.skipped_groups), (0, 3));
}

#[test]
fn metrics_format_example() {
    let dir = TempDir::new().unwrap();
    let cfg = run_cfg(dir.path(), dataset(dir.path(), 1, 8), "perfect-delegator", "run");
    let mut t = run_eval(&cfg).unwrap().trajectories.remove(0);
    let clones: u32 = t.clones().map(|c| c.generated_tokens).sum();
    t.rollouts[0].generated_tokens = 930 - clones;
    let p = dir.path().join("one.jsonl");
    write_jsonl(&p, [&t]).unwrap();
    let m = metrics(&[p]).unwrap();
    assert_eq!(m.episodes, 1);
    assert_eq!(m.avg_generated_tokens, 930.0);
    assert_eq!(m.accuracy, 1.0);
    assert_eq!(m.accuracy_at_budget.len(), 1);
    assert_eq!(m.accuracy_at_budget[0].budget, 930);
}

#[test]
fn metrics_rejects_bad_inputs() {
    let dir = TempDir::new().unwrap();
    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    assert!(metrics(&[empty]).is_err());

    let cfg = run_cfg(dir.path(), dataset(dir.path(), 2, 8), "perfect-delegator", "run");
    run_eval(&cfg).unwrap();
    let traj = cfg.output_dir.join("trajectories.jsonl");
    let hard = dir.path().join("hard.jsonl");
    let none = dir.path().join("none.jsonl");
    export_batch(
        std::slice::from_ref(&traj),
        GateKind::Hard,
        &TrainerMetadata::default(),
        &hard,
    )
    .unwrap();
    export_batch(
        std::slice::from_ref(&traj),
        GateKind::None,
        &TrainerMetadata::default(),
        &none,
    )
    .unwrap();
    let err = metrics(&[hard.clone(), none.clone()]).unwrap_err();
    assert!(err.to_string().contains("gate mismatch"), "{err}");
    assert!(metrics(&[traj.clone(), hard.clone()]).is_err());
    assert_eq!(metrics(&[traj.clone(), none]).unwrap().episodes, 16);
    assert_eq!(metrics(&[hard.clone(), hard]).unwrap().episodes, 16);

    let mut trajs = read_trajectories(&traj).unwrap();
    trajs[0].schema_version += 1;
    let stale = dir.path().join("stale.jsonl");
    write_jsonl(&stale, &trajs).unwrap();
    let err = metrics(&[stale]).unwrap_err();
    assert!(format!("{err:#}").contains("schema version"), "{err:#}");
}

#[test]
fn metrics_accuracy_matches_an_independent_check() {
    let dir = TempDir::new().unwrap();
    let ds = dataset(dir.path(), 15, 21);
    let mut cfg = run_cfg(dir.path(), ds.clone(), "perfect-delegator", "run");
    cfg.policy.backend = "random".into();
    let out = run_eval(&cfg).unwrap();
    let answers: std::collections::BTreeMap<String, i128> = delegate::io::read_jsonl::<DatasetRecord>(&ds)
        .unwrap()
        .into_iter()
        .map(|r| (r.id, r.answer.parse().unwrap()))
        .collect();
    let oracle_correct = out
        .trajectories
        .iter()
        .filter(|t| {
            t.final_answer
                .as_deref()
                .and_then(|a| a.trim().replace(',', "").parse::<i128>().ok())
                == Some(answers[&t.task_id])
        })
        .count();
    let m = metrics(&[cfg.output_dir.join("trajectories.jsonl")]).unwrap();
    assert_eq!(m.correct, oracle_correct);
    assert!(m.correct > 0 && m.correct < m.episodes);
    for t in &out.trajectories {
        assert_eq!(
            t.reward.unwrap().to_bits(),
            compute_reward(t, &cfg.reward).unwrap().to_bits()
        );
    }
}

#[test]
fn gradlab_selection() {
    let r = commands::gradlab_report(&["constant_reward".into()], 11).unwrap();
    assert_eq!(r.envs.len(), 1);
    assert!(r.all_pass);
    assert!(commands::gradlab_report(&["nope".into()], 11).is_err());
    let all = commands::gradlab_report(&[], 11).unwrap();
    assert_eq!(all.envs.len(), 5);
    assert_eq!(
        serde_json::to_string(&all).unwrap(),
        serde_json::to_string(&commands::gradlab_report(&[], 11).unwrap()).unwrap()
    );
}
