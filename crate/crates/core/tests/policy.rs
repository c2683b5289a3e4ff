use delegate_core::policy::{
    ChatMessage, PolicyBackend, PolicyError, PolicyRequest, RandomPolicy, RolloutRole, ScriptedPolicy, ToyPolicy,
};
use delegate_core::tokens::{count_tokens, tail_to_tokens, truncate_to_tokens};
use delegate_core::TokenCounter;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn fd_logprob(p: &ToyPolicy, state: usize, action: usize, s: usize, a: usize, h: f64) -> f64 {
    let mut plus = p.clone();
    let mut minus = p.clone();
    plus.set_logit(s, a, p.logits(s)[a] + h);
    minus.set_logit(s, a, p.logits(s)[a] - h);
    (plus.act_logprob(state, action).unwrap() - minus.act_logprob(state, action).unwrap()) / (2.0 * h)
}

#[test]
fn logprob_gradient_matches_finite_differences() {
    for seed in 0..10 {
        let p = ToyPolicy::random(&[3, 2, 4], 2.0, seed);
        for state in 0..3 {
            for action in 0..p.logits(state).len() {
                let g = p.grad_act_logprob(state, action).unwrap();
                for (s, row) in g.rows.iter().enumerate() {
                    for (a, &v) in row.iter().enumerate() {
                        let fd = fd_logprob(&p, state, action, s, a, 1e-5);
                        assert!(
                            (fd - v).abs() < 1e-5,
                            "seed {seed} ({state},{action}) d/d({s},{a}): {v} vs {fd}"
                        );
                    }
                }
            }
        }
    }
}

#[test]
fn rows_are_distributions() {
    let p = ToyPolicy::random(&[2, 3, 5, 1], 4.0, 3);
    for s in 0..p.num_states() {
        let probs = p.probs(s);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(probs.iter().all(|&x| x > 0.0));
        for a in 0..probs.len() {
            let g = p.grad_row(s, a);
            assert!(g.iter().sum::<f64>().abs() < 1e-12);
        }
    }
}

#[test]
fn uniform_sampling_frequency() {
    let p = ToyPolicy::uniform(&[2]);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let n = 100_000;
    let zeros = (0..n).filter(|_| p.sample_action(0, &mut rng).unwrap() == 0).count();
    let freq = zeros as f64 / n as f64;
    assert!((0.494..=0.506).contains(&freq), "{freq}");
}

#[test]
fn saturated_logits_stay_finite() {
    let p = ToyPolicy::new(vec![vec![800.0, -800.0, 0.0]]).unwrap();
    let probs = p.probs(0);
    assert!((probs[0] - 1.0).abs() < 1e-15);
    assert_eq!(probs[1], 0.0);
    let lp = p.act_logprob(0, 1).unwrap();
    assert!(lp.is_finite());
    assert!((lp + 1600.0).abs() < 1e-9);
    assert!(p.grad_row(0, 1).iter().all(|x| x.is_finite()));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!((0..1000).all(|_| p.sample_action(0, &mut rng).unwrap() == 0));
}

#[test]
fn invalid_tables_rejected() {
    assert!(matches!(ToyPolicy::new(vec![]), Err(PolicyError::InvalidTable(_))));
    assert!(matches!(
        ToyPolicy::new(vec![vec![]]),
        Err(PolicyError::InvalidTable(_))
    ));
    assert!(matches!(
        ToyPolicy::new(vec![vec![f64::NAN]]),
        Err(PolicyError::InvalidTable(_))
    ));
    let p = ToyPolicy::uniform(&[2]);
    assert!(matches!(p.act_logprob(0, 2), Err(PolicyError::OutOfRange { .. })));
    assert!(matches!(p.act_logprob(1, 0), Err(PolicyError::OutOfRange { .. })));
}

#[test]
fn library_names_resolve() {
    for name in ScriptedPolicy::NAMES {
        assert_eq!(ScriptedPolicy::by_name(name).unwrap().name, name);
    }
    assert!(ScriptedPolicy::by_name("oracle").is_none());
}

#[test]
fn random_policy_is_seeded() {
    let history = vec![ChatMessage::system("s"), ChatMessage::user("Expression: (7×8)")];
    let p = RandomPolicy::new(0.0, 0.5);
    let req = |seed| PolicyRequest {
        role: RolloutRole::Root,
        depth: 0,
        turn: 0,
        history: &history,
        tools: None,
        max_tokens: 64,
        seed,
    };
    let answers: Vec<String> = (0..200)
        .map(|s| p.next_message(&req(s)).unwrap().message.content)
        .collect();
    let right = answers.iter().filter(|a| *a == "<answer>56</answer>").count();
    assert!((60..140).contains(&right), "{right}");
    let again: Vec<String> = (0..200)
        .map(|s| p.next_message(&req(s)).unwrap().message.content)
        .collect();
    assert_eq!(answers, again);
}

proptest! {
    #[test]
    fn byte_tokens_are_subadditive(a in "\\PC{0,80}", b in "\\PC{0,80}") {
        let c = TokenCounter::ByteHeuristic;
        let joined = format!("{a}{b}");
        prop_assert!(count_tokens(&joined, c) <= count_tokens(&a, c) + count_tokens(&b, c));
        prop_assert!(count_tokens(&joined, c) >= count_tokens(&a, c).max(count_tokens(&b, c)));
    }

    #[test]
    fn word_tokens_add_across_whitespace(a in "[a-z ]{0,40}", b in "[a-z ]{0,40}") {
        let c = TokenCounter::Whitespace;
        prop_assert_eq!(count_tokens(&format!("{a} {b}"), c), count_tokens(&a, c) + count_tokens(&b, c));
    }

    #[test]
    fn truncation_respects_budget(text in "\\PC{0,200}", budget in 0u32..60, words in any::<bool>()) {
        let c = if words { TokenCounter::Whitespace } else { TokenCounter::ByteHeuristic };
        let head = truncate_to_tokens(&text, c, budget);
        let tail = tail_to_tokens(&text, c, budget);
        prop_assert!(text.starts_with(head));
        prop_assert!(text.ends_with(tail));
        prop_assert!(count_tokens(head, c) <= budget);
        prop_assert!(count_tokens(tail, c) <= budget);
        if count_tokens(&text, c) <= budget {
            prop_assert_eq!(head, text.as_str());
            prop_assert_eq!(tail, text.as_str());
        } else {
            // Maximal: one more char would exceed the budget.
            let next = text[head.len()..].chars().next().unwrap();
            let longer = &text[..head.len() + next.len_utf8()];
            prop_assert!(count_tokens(longer, c) > budget || (words && next.is_whitespace()));
        }
    }
}

#[test]
fn log_softmax_examples() {
    let p = ToyPolicy::new(vec![vec![0.0, 0.0], vec![10.0, 0.0], vec![30.0, 0.0]]).unwrap();
    assert!((p.act_logprob(0, 0).unwrap() + std::f64::consts::LN_2).abs() < 1e-12);
    assert!((p.act_logprob(1, 0).unwrap() + 4.539_889_921_686_465e-5).abs() < 1e-12);
    assert_eq!(p.grad_row(0, 0), vec![0.5, -0.5]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert!((0..10_000).all(|_| p.sample_action(2, &mut rng).unwrap() == 0));
    let mut a = ChaCha8Rng::seed_from_u64(99);
    let mut b = ChaCha8Rng::seed_from_u64(99);
    let q = ToyPolicy::random(&[4], 1.0, 0);
    let xs: Vec<usize> = (0..50).map(|_| q.sample_action(0, &mut a).unwrap()).collect();
    let ys: Vec<usize> = (0..50).map(|_| q.sample_action(0, &mut b).unwrap()).collect();
    assert_eq!(xs, ys);
    for seed in 0..100 {
        let r = ToyPolicy::random(&[5], 6.0, seed);
        let total: f64 = (0..5).map(|a| r.act_logprob(0, a).unwrap().exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}

#[test]
fn scripted_first_moves() {
    use delegate_core::protocol::{parse_tool_calls, MarkerConfig};
    let history = vec![
        ChatMessage::system("s"),
        ChatMessage::user("Compute the exact value of the expression below.\nExpression: (17+25)×3\n"),
    ];
    let tools = [serde_json::json!({})];
    let req = PolicyRequest {
        role: RolloutRole::Root,
        depth: 0,
        turn: 0,
        history: &history,
        tools: Some(&tools),
        max_tokens: 1024,
        seed: 0,
    };
    let msg = ScriptedPolicy::perfect_delegator().next_message(&req).unwrap().message;
    let calls = parse_tool_calls(&msg, 1024);
    assert_eq!(calls.len(), 1);
    assert_eq!(calls[0].as_ref().unwrap().task, "compute 17+25");

    let history = vec![
        ChatMessage::system("s"),
        ChatMessage::user("Task: compute 3483838+239\n"),
    ];
    let req = PolicyRequest {
        role: RolloutRole::Clone,
        depth: 1,
        history: &history,
        ..req
    };
    let out = ScriptedPolicy::perfect_delegator()
        .next_message(&req)
        .unwrap()
        .message
        .content;
    assert!(out.ends_with(&MarkerConfig::default().wrap("3484077")), "{out}");
}
