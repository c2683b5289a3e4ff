use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::read;
use super::{BackendKind, Completion, Determinism, PolicyBackend, PolicyError, PolicyRequest, RolloutRole};
use crate::arith::{evaluate_expr, parse_expr};
use crate::protocol::{AssistantMessage, MarkerConfig, RawToolCall, CLONE_TOOL_NAME};

/// Tabular softmax policy. Rows may have different widths so that root and
/// clone decisions (different alphabets) share one parameter table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicy {
    rows: Vec<Vec<f64>>,
}

/// Same shape as a [`ToyPolicy`] table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradTable {
    pub rows: Vec<Vec<f64>>,
}

impl GradTable {
    pub fn zeros(shape: &[usize]) -> Self {
        GradTable {
            rows: shape.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.rows.iter().map(Vec::len).collect()
    }

    pub fn add_scaled(&mut self, other: &GradTable, scale: f64) {
        for (r, o) in self.rows.iter_mut().zip(&other.rows) {
            for (x, y) in r.iter_mut().zip(o) {
                *x += scale * y;
            }
        }
    }

    pub fn add_row_scaled(&mut self, row: usize, values: &[f64], scale: f64) {
        for (x, y) in self.rows[row].iter_mut().zip(values) {
            *x += scale * y;
        }
    }

    pub fn scaled(&self, scale: f64) -> GradTable {
        GradTable {
            rows: self
                .rows
                .iter()
                .map(|r| r.iter().map(|x| x * scale).collect())
                .collect(),
        }
    }

    pub fn sub(&self, other: &GradTable) -> GradTable {
        let mut out = self.clone();
        out.add_scaled(other, -1.0);
        out
    }

    pub fn dot(&self, other: &GradTable) -> f64 {
        self.rows
            .iter()
            .zip(&other.rows)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y))
            .sum()
    }

    pub fn norm(&self) -> f64 {
        libm::sqrt(self.dot(self))
    }

    pub fn max_abs(&self) -> f64 {
        self.rows.iter().flatten().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.rows.iter().flatten().copied().collect()
    }
}

impl ToyPolicy {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self, PolicyError> {
        if rows.is_empty() || rows.iter().any(Vec::is_empty) {
            return Err(PolicyError::InvalidTable("every state needs at least one action"));
        }
        if rows.iter().flatten().any(|x| !x.is_finite()) {
            return Err(PolicyError::InvalidTable("logits must be finite"));
        }
        Ok(ToyPolicy { rows })
    }

    /// All-zero logits (uniform policy) with the given row widths.
    pub fn uniform(shape: &[usize]) -> Self {
        ToyPolicy {
            rows: shape.iter().map(|&n| vec![0.0; n.max(1)]).collect(),
        }
    }

    /// Logits drawn uniformly from `[-scale, scale]`.
    pub fn random(shape: &[usize], scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ToyPolicy {
            rows: shape
                .iter()
                .map(|&n| (0..n.max(1)).map(|_| rng.random_range(-scale..=scale)).collect())
                .collect(),
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.rows.iter().map(Vec::len).collect()
    }

    pub fn num_states(&self) -> usize {
        self.rows.len()
    }

    pub fn logits(&self, state: usize) -> &[f64] {
        &self.rows[state]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn set_logit(&mut self, state: usize, action: usize, value: f64) {
        self.rows[state][action] = value;
    }

    fn check(&self, state: usize, action: usize) -> Result<(), PolicyError> {
        match self.rows.get(state) {
            Some(row) if action < row.len() => Ok(()),
            _ => Err(PolicyError::OutOfRange { state, action }),
        }
    }

    fn log_normalizer(row: &[f64]) -> f64 {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        m + libm::log(row.iter().map(|x| libm::exp(x - m)).sum::<f64>())
    }

    pub fn probs(&self, state: usize) -> Vec<f64> {
        let row = &self.rows[state];
        let z = Self::log_normalizer(row);
        row.iter().map(|x| libm::exp(x - z)).collect()
    }

    pub fn act_logprob(&self, state: usize, action: usize) -> Result<f64, PolicyError> {
        self.check(state, action)?;
        let row = &self.rows[state];
        Ok(row[action] - Self::log_normalizer(row))
    }

    /// `e_action - softmax(row)` on the state's row, zero elsewhere.
    pub fn grad_act_logprob(&self, state: usize, action: usize) -> Result<GradTable, PolicyError> {
        self.check(state, action)?;
        let mut g = GradTable::zeros(&self.shape());
        g.rows[state] = self.grad_row(state, action);
        Ok(g)
    }

    /// Non-zero row of [`grad_act_logprob`](Self::grad_act_logprob).
    pub fn grad_row(&self, state: usize, action: usize) -> Vec<f64> {
        let mut row: Vec<f64> = self.probs(state).into_iter().map(|p| -p).collect();
        row[action] += 1.0;
        row
    }

    pub fn sample_action<R: Rng + ?Sized>(&self, state: usize, rng: &mut R) -> Result<usize, PolicyError> {
        self.check(state, 0)?;
        let probs = self.probs(state);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (a, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return Ok(a);
            }
        }
        Ok(probs.len() - 1)
    }
}

/// Tabular state encoding over (role, turn, last observation symbol).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateEncoder {
    pub turns: usize,
    pub symbols: usize,
}

impl StateEncoder {
    pub fn num_states(&self) -> usize {
        2 * self.turns * self.symbols
    }

    pub fn encode(&self, role: RolloutRole, turn: usize, symbol: usize) -> usize {
        let r = match role {
            RolloutRole::Root => 0,
            RolloutRole::Clone => 1,
        };
        r * self.turns * self.symbols + turn.min(self.turns - 1) * self.symbols + symbol.min(self.symbols - 1)
    }
}

/// Orchestrator-facing wrapper around a [`ToyPolicy`].
///
/// Root actions: `0 = answer`, `1 = spawn`. Clone actions: `0 = return with
/// marker`, `1 = babble without marker`. The observation symbol is `0` before
/// any tool result, `1` after a usable return, `2` after an unusable one.
#[derive(Clone, Debug)]
pub struct ToySoftmaxBackend {
    pub policy: ToyPolicy,
    pub encoder: StateEncoder,
    pub marker: MarkerConfig,
}

impl ToySoftmaxBackend {
    pub const ROOT_ANSWER: usize = 0;
    pub const ROOT_SPAWN: usize = 1;
    pub const CLONE_RETURN: usize = 0;
    pub const CLONE_BABBLE: usize = 1;

    /// Uniform table sized for the encoder, two actions per state.
    pub fn uniform(turns: usize) -> Self {
        let encoder = StateEncoder { turns, symbols: 3 };
        ToySoftmaxBackend {
            policy: ToyPolicy::uniform(&vec![2; encoder.num_states()]),
            encoder,
            marker: MarkerConfig::default(),
        }
    }
}

impl PolicyBackend for ToySoftmaxBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::ToySoftmax
    }

    fn determinism(&self) -> Determinism {
        Determinism::SeededStochastic
    }

    fn next_message(&self, request: &PolicyRequest<'_>) -> Result<Completion, PolicyError> {
        let mut rng = ChaCha8Rng::seed_from_u64(request.seed);
        let prompt = request.prompt();
        match request.role {
            RolloutRole::Root => {
                let log = read::delegation_log(request.history);
                let usable = log.values().find_map(|(_, v)| v.clone());
                let symbol = match (log.is_empty(), &usable) {
                    (true, _) => 0,
                    (false, Some(_)) => 1,
                    (false, None) => 2,
                };
                let state = self
                    .encoder
                    .encode(RolloutRole::Root, read::tool_turns(request.history), symbol);
                let action = self.policy.sample_action(state, &mut rng)?;
                if action == Self::ROOT_SPAWN && request.tools.is_some() {
                    let expr = read::labeled(prompt, "Expression:").unwrap_or(prompt);
                    let id = format!("toy_{}", request.turn);
                    return Ok(Completion::new(AssistantMessage {
                        content: String::new(),
                        tool_calls: vec![RawToolCall {
                            id,
                            name: CLONE_TOOL_NAME.into(),
                            arguments: json!({ "task": format!("compute {expr}") }).to_string(),
                        }],
                    }));
                }
                let answer = usable.unwrap_or_else(|| "0".into());
                Ok(Completion::new(AssistantMessage::text(format!(
                    "<answer>{answer}</answer>"
                ))))
            }
            RolloutRole::Clone => {
                let state = self.encoder.encode(RolloutRole::Clone, 0, 0);
                let action = self.policy.sample_action(state, &mut rng)?;
                let task = read::labeled(prompt, "Task:").unwrap_or("");
                let value = task
                    .strip_prefix("compute ")
                    .and_then(|e| parse_expr(e).ok())
                    .and_then(|e| evaluate_expr(&e).ok());
                let text = match (action, value) {
                    (Self::CLONE_RETURN, Some(v)) => self.marker.wrap(&format!("{v}")),
                    _ => String::from("hmm, let me think about this some more"),
                };
                Ok(Completion::new(AssistantMessage::text(text)))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logprob() {
        let p = ToyPolicy::new(vec![vec![0.0, 0.0]]).unwrap();
        assert!((p.act_logprob(0, 0).unwrap() - (-core::f64::consts::LN_2)).abs() < 1e-15);
        let g = p.grad_act_logprob(0, 0).unwrap();
        assert_eq!(g.rows[0], vec![0.5, -0.5]);
        assert_eq!(g.rows[0].iter().sum::<f64>(), 0.0);
    }

    #[test]
    fn saturated_row() {
        let p = ToyPolicy::new(vec![vec![10.0, 0.0]]).unwrap();
        let lp = p.act_logprob(0, 0).unwrap();
        // -ln(1 + e^-10)
        assert!((lp - (-4.539889921686465e-5)).abs() < 1e-15);
    }

    #[test]
    fn out_of_range() {
        let p = ToyPolicy::uniform(&[2, 3]);
        assert_eq!(
            p.act_logprob(2, 0),
            Err(PolicyError::OutOfRange { state: 2, action: 0 })
        );
        assert_eq!(
            p.act_logprob(0, 2),
            Err(PolicyError::OutOfRange { state: 0, action: 2 })
        );
        assert!(p.grad_act_logprob(1, 3).is_err());
    }

    #[test]
    fn rejects_bad_tables() {
        assert!(ToyPolicy::new(vec![]).is_err());
        assert!(ToyPolicy::new(vec![vec![]]).is_err());
        assert!(ToyPolicy::new(vec![vec![f64::NAN]]).is_err());
    }

    #[test]
    fn encoder_layout() {
        let e = StateEncoder { turns: 3, symbols: 3 };
        assert_eq!(e.num_states(), 18);
        assert_eq!(e.encode(RolloutRole::Root, 0, 0), 0);
        assert_eq!(e.encode(RolloutRole::Clone, 0, 0), 9);
        assert_eq!(e.encode(RolloutRole::Root, 7, 2), 8);
    }
}
