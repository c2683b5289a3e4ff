use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::read;
use super::{BackendKind, Completion, Determinism, PolicyBackend, PolicyError, PolicyRequest, RolloutRole};
use crate::arith::{evaluate_expr, parse_expr};
use crate::protocol::{AssistantMessage, MarkerConfig, RawToolCall, CLONE_TOOL_NAME};

/// Coin-flip policy seeded per request.
///
/// The root spawns one clone on the whole expression with `spawn_prob` (only
/// before its first tool turn), otherwise answers. Answers and clone returns
/// are correct with `correct_prob`; wrong answers are off by a small offset
/// drawn from the same stream.
#[derive(Clone, Debug)]
pub struct RandomPolicy {
    pub spawn_prob: f64,
    pub correct_prob: f64,
    pub marker: MarkerConfig,
}

impl RandomPolicy {
    pub fn new(spawn_prob: f64, correct_prob: f64) -> Self {
        RandomPolicy {
            spawn_prob: spawn_prob.clamp(0.0, 1.0),
            correct_prob: correct_prob.clamp(0.0, 1.0),
            marker: MarkerConfig::default(),
        }
    }

    fn guess(&self, rng: &mut ChaCha8Rng, truth: Option<i128>) -> String {
        match truth {
            Some(v) if rng.random_bool(self.correct_prob) => format!("{v}"),
            Some(v) => format!("{}", v + rng.random_range(1..=3i128)),
            None => String::from("0"),
        }
    }
}

impl Default for RandomPolicy {
    fn default() -> Self {
        RandomPolicy::new(0.5, 0.5)
    }
}

impl PolicyBackend for RandomPolicy {
    fn kind(&self) -> BackendKind {
        BackendKind::Random
    }

    fn determinism(&self) -> Determinism {
        Determinism::SeededStochastic
    }

    fn next_message(&self, request: &PolicyRequest<'_>) -> Result<Completion, PolicyError> {
        let mut rng = ChaCha8Rng::seed_from_u64(request.seed);
        let prompt = request.prompt();
        let message = match request.role {
            RolloutRole::Root => {
                let expr = read::labeled(prompt, "Expression:").unwrap_or("");
                let log = read::delegation_log(request.history);
                let spawn = request.tools.is_some() && log.is_empty() && rng.random_bool(self.spawn_prob);
                if spawn {
                    AssistantMessage {
                        content: String::new(),
                        tool_calls: vec![RawToolCall {
                            id: format!("call_{}_0", request.turn),
                            name: CLONE_TOOL_NAME.into(),
                            arguments: json!({ "task": format!("compute {expr}") }).to_string(),
                        }],
                    }
                } else {
                    let delegated = log
                        .values()
                        .find_map(|(_, v)| v.as_deref())
                        .and_then(crate::arith::normalize_answer);
                    let answer = match delegated {
                        Some(v) => format!("{v}"),
                        None => {
                            let truth = parse_expr(expr).ok().and_then(|e| evaluate_expr(&e).ok());
                            self.guess(&mut rng, truth)
                        }
                    };
                    AssistantMessage::text(format!("<answer>{answer}</answer>"))
                }
            }
            RolloutRole::Clone => {
                let truth = read::labeled(prompt, "Task:")
                    .and_then(|t| t.strip_prefix("compute "))
                    .and_then(|e| parse_expr(e).ok())
                    .and_then(|e| evaluate_expr(&e).ok());
                let value = self.guess(&mut rng, truth);
                AssistantMessage::text(self.marker.wrap(&value))
            }
        };
        Ok(Completion::new(message))
    }
}
