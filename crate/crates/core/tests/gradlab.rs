use delegate_core::gradlab::envs::{BABBLE, RET_1, SPAWN};
use delegate_core::gradlab::{
    enumerate_trajectories, env_by_name, estimator_expectation, estimator_variance, exact_grad, finite_diff_check,
    full_report, objective, ConstantReward, Delegation, EstimatorSpec, GradlabError, MicroEnv, OneStep,
    PathologicalClone, DEFAULT_POLICY_SEED, ENV_NAMES,
};
use delegate_core::policy::ToyPolicy;

/// Independent objective: walk the env tree directly, no trajectory list.
fn brute_objective(env: &dyn MicroEnv, p: &ToyPolicy) -> f64 {
    use delegate_core::gradlab::{Move, Step};
    fn walk(env: &dyn MicroEnv, p: &ToyPolicy, moves: &mut Vec<Move>, prob: f64) -> f64 {
        match env.step(moves) {
            Step::Terminal(r) => prob * r,
            Step::Decide {
                rollout,
                spawn_turn,
                state,
            } => {
                let probs = p.probs(state);
                let mut total = 0.0;
                for (a, pa) in probs.iter().enumerate() {
                    moves.push(Move {
                        rollout,
                        spawn_turn,
                        state,
                        action: Some(a),
                    });
                    total += walk(env, p, moves, prob * pa);
                    moves.pop();
                }
                total
            }
        }
    }
    walk(env, p, &mut Vec::new(), 1.0)
}

/// Central differences of the independent objective.
fn brute_grad(env: &dyn MicroEnv, p: &ToyPolicy, h: f64) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for s in 0..p.num_states() {
        let mut row = Vec::new();
        for a in 0..p.logits(s).len() {
            let mut plus = p.clone();
            let mut minus = p.clone();
            plus.set_logit(s, a, p.logits(s)[a] + h);
            minus.set_logit(s, a, p.logits(s)[a] - h);
            row.push((brute_objective(env, &plus) - brute_objective(env, &minus)) / (2.0 * h));
        }
        out.push(row);
    }
    out
}

#[test]
fn one_step_uniform() {
    let p = ToyPolicy::uniform(&[2]);
    let g = exact_grad(&OneStep, &p).unwrap();
    assert!((g.rows[0][0] - 0.25).abs() < 1e-9);
    assert!((g.rows[0][1] + 0.25).abs() < 1e-9);
    assert!((objective(&OneStep, &p).unwrap() - 0.5).abs() < 1e-15);
}

#[test]
fn exact_gradient_matches_finite_differences_on_random_thetas() {
    for name in ENV_NAMES {
        let env = env_by_name(name).unwrap();
        for seed in 0..10 {
            let p = ToyPolicy::random(&env.shape(), 1.5, 100 + seed);
            let exact = exact_grad(&env, &p).unwrap();
            let brute = brute_grad(&env, &p, 1e-5);
            assert!((objective(&env, &p).unwrap() - brute_objective(&env, &p)).abs() < 1e-12);
            for (er, br) in exact.rows.iter().zip(&brute) {
                for (e, b) in er.iter().zip(br) {
                    let rel = (e - b).abs() / e.abs().max(b.abs()).max(1e-3);
                    assert!(rel < 1e-5, "{name} seed {seed}: {e} vs {b}");
                }
            }
            if name != "constant_reward" {
                let fd = finite_diff_check(&env, &p, 1e-5).unwrap();
                assert!(fd.max_rel_error < 1e-5, "{name} seed {seed}: {fd:?}");
            }
        }
    }
}

#[test]
fn enumeration_sizes_and_probabilities() {
    for (name, n) in [
        ("one_step", 2),
        ("delegation", 14),
        ("parallel_pair", 10),
        ("pathological_clone", 12),
        ("constant_reward", 14),
    ] {
        let env = env_by_name(name).unwrap();
        let p = ToyPolicy::random(&env.shape(), 1.0, 3);
        let trajs = enumerate_trajectories(&env, &p).unwrap();
        assert_eq!(trajs.len(), n, "{name}");
        assert!((trajs.iter().map(|t| t.prob).sum::<f64>() - 1.0).abs() < 1e-12);
        for t in &trajs {
            assert!((t.logprob_by_rollout - t.logprob).abs() < 1e-12);
            let independent: f64 = t
                .moves
                .iter()
                .map(|m| p.act_logprob(m.state, m.action.unwrap()).unwrap())
                .sum();
            assert!((independent - t.logprob).abs() < 1e-12);
            assert!((t.logprob.exp() - t.prob).abs() < 1e-12);
        }
    }
}

#[test]
fn constant_reward_has_zero_gradient() {
    let env = ConstantReward {
        inner: Delegation,
        value: 0.7,
    };
    let p = ToyPolicy::random(&env.shape(), 1.0, 8);
    // Zero up to rounding in the score sum.
    assert!(exact_grad(&env, &p).unwrap().max_abs() < 1e-15);
    assert!((objective(&env, &p).unwrap() - 0.7).abs() < 1e-12);
}

#[test]
fn unbiased_estimators_on_every_env() {
    for name in ENV_NAMES {
        let env = env_by_name(name).unwrap();
        for seed in [1, 2, DEFAULT_POLICY_SEED] {
            let p = ToyPolicy::random(&env.shape(), 1.0, seed);
            let g = exact_grad(&env, &p).unwrap();
            for spec in [
                EstimatorSpec::PlainReinforce,
                EstimatorSpec::ConstantBaseline { baseline: 0.37 },
                EstimatorSpec::DifferenceReward,
                EstimatorSpec::ComaCounterfactual,
            ] {
                let e = estimator_expectation(spec, &env, &p).unwrap();
                let gap = e.sub(&g).max_abs();
                assert!(gap < 1e-10, "{name} seed {seed} {}: {gap:e}", spec.name());
            }
        }
    }
}

#[test]
fn gated_estimator_bias_and_variance() {
    let env = PathologicalClone;
    let p = ToyPolicy::random(&env.shape(), 1.0, DEFAULT_POLICY_SEED);
    let g = exact_grad(&env, &p).unwrap();
    let gated = EstimatorSpec::GatedGrpo { group_size: 4 };
    let ungated = EstimatorSpec::UngatedGrpo { group_size: 4 };
    let bias = estimator_expectation(gated, &env, &p).unwrap().sub(&g).norm();
    assert!(bias > 1e-3, "{bias}");
    let vg = estimator_variance(gated, &env, &p).unwrap();
    let vu = estimator_variance(ungated, &env, &p).unwrap();
    assert!(vg < vu, "{vg} vs {vu}");
    let gr = estimator_expectation(EstimatorSpec::GatedReinforce, &env, &p)
        .unwrap()
        .sub(&g)
        .norm();
    assert!(gr > 1e-3);
    assert!(matches!(
        estimator_variance(EstimatorSpec::GatedGrpo { group_size: 1 }, &env, &p),
        Err(GradlabError::GroupTooSmall)
    ));
}

#[test]
fn pathological_clone_shape() {
    let env = PathologicalClone;
    let p = ToyPolicy::uniform(&env.shape());
    let trajs = enumerate_trajectories(&env, &p).unwrap();
    let best = trajs.iter().map(|t| t.reward).fold(f64::MIN, f64::max);
    // Answer directly: 1 - one decision.
    assert!((best - 0.95).abs() < 1e-12);
    let double_babble = trajs
        .iter()
        .filter(|t| {
            t.moves
                .iter()
                .filter(|m| m.rollout == 1 && m.action == Some(BABBLE))
                .count()
                == 2
        })
        .collect::<Vec<_>>();
    assert_eq!(double_babble.len(), 2);
    for t in double_babble {
        assert!(!env.parseable(&t.moves, 1));
    }
    let returned = trajs
        .iter()
        .find(|t| t.moves[0].action == Some(SPAWN) && t.moves[1].action == Some(RET_1))
        .unwrap();
    assert!(env.parseable(&returned.moves, 1));
}

#[test]
fn report_is_deterministic_and_green() {
    let a = full_report(&ENV_NAMES, DEFAULT_POLICY_SEED).unwrap();
    let b = full_report(&ENV_NAMES, DEFAULT_POLICY_SEED).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    for env in &a.envs {
        for c in &env.checks {
            assert!(c.pass, "{}: {} = {:e} vs {:e}", env.env, c.name, c.value, c.tolerance);
        }
    }
    assert!(a.all_pass);
    let cr = a.envs.iter().find(|e| e.env == "constant_reward").unwrap();
    assert!(cr.checks.iter().any(|c| c.name == "zero_gradient" && c.pass));
    assert!(matches!(full_report(&["nope"], 1), Err(GradlabError::UnknownEnv(_))));
}

#[test]
fn shape_mismatch_rejected() {
    let p = ToyPolicy::uniform(&[2, 2]);
    assert!(matches!(
        exact_grad(&Delegation, &p),
        Err(GradlabError::ShapeMismatch { .. })
    ));
}
