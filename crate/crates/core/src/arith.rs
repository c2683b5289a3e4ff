//! Synthetic hard-arithmetic problems.
//!
//! Expressions are binary trees over `+ - × ÷` with non-negative integer
//! leaves. Generation is seeded per `(seed, index)` and guarantees that every
//! division is exact and every intermediate value stays within the configured
//! magnitude ceiling. Evaluation is exact 128-bit integer arithmetic with
//! overflow checks at every node.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::seed::mix_seed;

pub const DEFAULT_MAX_OPS: u32 = 10;
pub const DEFAULT_OPERAND_MAX: u64 = 10_000_000;
pub const DEFAULT_INTERMEDIATE_MAX: u64 = 10_000_000_000_000_000;
pub const MAX_NODE_ATTEMPTS: u32 = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Op {
    Add,
    Sub,
    Mul,
    Div,
}

impl Op {
    pub const ALL: [Op; 4] = [Op::Add, Op::Sub, Op::Mul, Op::Div];

    pub fn symbol(self) -> char {
        match self {
            Op::Add => '+',
            Op::Sub => '-',
            Op::Mul => '×',
            Op::Div => '÷',
        }
    }

    fn from_char(c: char) -> Option<Op> {
        match c {
            '+' => Some(Op::Add),
            '-' | '−' => Some(Op::Sub),
            '×' | '*' | 'x' => Some(Op::Mul),
            '÷' | '/' => Some(Op::Div),
            _ => None,
        }
    }

    fn apply(self, lhs: i128, rhs: i128) -> Result<i128, EvalError> {
        let overflow = || EvalError::BoundViolation { value: None };
        match self {
            Op::Add => lhs.checked_add(rhs).ok_or_else(overflow),
            Op::Sub => lhs.checked_sub(rhs).ok_or_else(overflow),
            Op::Mul => lhs.checked_mul(rhs).ok_or_else(overflow),
            Op::Div => {
                if rhs == 0 {
                    return Err(EvalError::DivisionByZero);
                }
                if lhs % rhs != 0 {
                    return Err(EvalError::InexactDivision {
                        dividend: lhs,
                        divisor: rhs,
                    });
                }
                Ok(lhs / rhs)
            }
        }
    }
}

/// Expression tree. Leaves may be negative only when built by hand (e.g. a
/// clone task that substitutes a negative intermediate); the generator never
/// emits negative leaves.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Expr {
    Leaf(i128),
    Binary { op: Op, lhs: Box<Expr>, rhs: Box<Expr> },
}

impl Expr {
    pub fn leaf(v: i128) -> Expr {
        Expr::Leaf(v)
    }

    pub fn binary(op: Op, lhs: Expr, rhs: Expr) -> Expr {
        Expr::Binary {
            op,
            lhs: Box::new(lhs),
            rhs: Box::new(rhs),
        }
    }

    pub fn op_count(&self) -> u32 {
        match self {
            Expr::Leaf(_) => 0,
            Expr::Binary { lhs, rhs, .. } => 1 + lhs.op_count() + rhs.op_count(),
        }
    }

    pub fn depth(&self) -> u32 {
        match self {
            Expr::Leaf(_) => 0,
            Expr::Binary { lhs, rhs, .. } => 1 + lhs.depth().max(rhs.depth()),
        }
    }

    /// Largest absolute leaf value.
    pub fn max_leaf_magnitude(&self) -> u128 {
        match self {
            Expr::Leaf(v) => v.unsigned_abs(),
            Expr::Binary { lhs, rhs, .. } => lhs.max_leaf_magnitude().max(rhs.max_leaf_magnitude()),
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Leaf(v) => write!(f, "{v}"),
            Expr::Binary { op, lhs, rhs } => write!(f, "({lhs}{}{rhs})", op.symbol()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum EvalError {
    #[error("inexact division {dividend} ÷ {divisor}")]
    InexactDivision { dividend: i128, divisor: i128 },
    #[error("division by zero")]
    DivisionByZero,
    #[error("magnitude bound violated{}", .value.map(|v| format!(" by {v}")).unwrap_or_default())]
    BoundViolation { value: Option<i128> },
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("unexpected character {found:?} at byte {at}")]
    UnexpectedChar { found: char, at: usize },
    #[error("unexpected end of expression")]
    UnexpectedEnd,
    #[error("integer literal out of range at byte {at}")]
    LiteralOverflow { at: usize },
    #[error("trailing input at byte {at}")]
    Trailing { at: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum GenError {
    #[error("infeasible generator config: {0}")]
    InvalidConfig(&'static str),
    #[error("infeasible generator config: node rejected {MAX_NODE_ATTEMPTS} times")]
    Exhausted,
}

/// Evaluates with the default magnitude ceiling of 10^16.
pub fn evaluate_expr(expr: &Expr) -> Result<i128, EvalError> {
    evaluate_with_limit(expr, DEFAULT_INTERMEDIATE_MAX as u128)
}

/// Exact evaluation. Every intermediate value (leaves included) must satisfy
/// `|v| <= limit`.
pub fn evaluate_with_limit(expr: &Expr, limit: u128) -> Result<i128, EvalError> {
    let value = match expr {
        Expr::Leaf(v) => *v,
        Expr::Binary { op, lhs, rhs } => {
            let l = evaluate_with_limit(lhs, limit)?;
            let r = evaluate_with_limit(rhs, limit)?;
            op.apply(l, r)?
        }
    };
    if value.unsigned_abs() > limit {
        return Err(EvalError::BoundViolation { value: Some(value) });
    }
    Ok(value)
}

/// Largest absolute value over every node of the tree, or `None` if the tree
/// does not evaluate.
pub fn max_intermediate_magnitude(expr: &Expr) -> Option<u128> {
    fn walk(e: &Expr, max: &mut u128) -> Option<i128> {
        let v = match e {
            Expr::Leaf(v) => *v,
            Expr::Binary { op, lhs, rhs } => {
                let l = walk(lhs, max)?;
                let r = walk(rhs, max)?;
                op.apply(l, r).ok()?
            }
        };
        *max = (*max).max(v.unsigned_abs());
        Some(v)
    }
    let mut max = 0;
    walk(expr, &mut max)?;
    Some(max)
}

/// Fully parenthesized infix rendering.
pub fn render_expr(expr: &Expr) -> String {
    expr.to_string()
}

/// Parses infix arithmetic with the usual precedence (`× ÷` over `+ -`, left
/// associative). Accepts `* x /` and the unicode minus as operator aliases and
/// a leading `-` on a literal.
pub fn parse_expr(text: &str) -> Result<Expr, ParseError> {
    let mut p = Parser { src: text, pos: 0 };
    let e = p.expr()?;
    p.skip_ws();
    if p.pos < p.src.len() {
        return Err(ParseError::Trailing { at: p.pos });
    }
    Ok(e)
}

struct Parser<'a> {
    src: &'a str,
    pos: usize,
}

impl Parser<'_> {
    fn skip_ws(&mut self) {
        while let Some(c) = self.peek() {
            if c.is_whitespace() {
                self.pos += c.len_utf8();
            } else {
                break;
            }
        }
    }

    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += c.len_utf8();
        Some(c)
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            self.skip_ws();
            match self.peek().and_then(Op::from_char) {
                Some(op @ (Op::Add | Op::Sub)) => {
                    self.bump();
                    let rhs = self.term()?;
                    lhs = Expr::binary(op, lhs, rhs);
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.factor()?;
        loop {
            self.skip_ws();
            match self.peek().and_then(Op::from_char) {
                Some(op @ (Op::Mul | Op::Div)) => {
                    self.bump();
                    let rhs = self.factor()?;
                    lhs = Expr::binary(op, lhs, rhs);
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn factor(&mut self) -> Result<Expr, ParseError> {
        self.skip_ws();
        let at = self.pos;
        match self.peek() {
            None => Err(ParseError::UnexpectedEnd),
            Some('(') => {
                self.bump();
                let e = self.expr()?;
                self.skip_ws();
                match self.bump() {
                    Some(')') => Ok(e),
                    Some(found) => Err(ParseError::UnexpectedChar {
                        found,
                        at: self.pos - found.len_utf8(),
                    }),
                    None => Err(ParseError::UnexpectedEnd),
                }
            }
            Some('-' | '−') => {
                self.bump();
                match self.peek() {
                    Some(c) if c.is_ascii_digit() => Ok(Expr::Leaf(-self.number()?)),
                    Some(found) => Err(ParseError::UnexpectedChar { found, at: self.pos }),
                    None => Err(ParseError::UnexpectedEnd),
                }
            }
            Some(c) if c.is_ascii_digit() => Ok(Expr::Leaf(self.number()?)),
            Some(found) => Err(ParseError::UnexpectedChar { found, at }),
        }
    }

    fn number(&mut self) -> Result<i128, ParseError> {
        let at = self.pos;
        let mut v: i128 = 0;
        while let Some(c) = self.peek() {
            let Some(d) = c.to_digit(10) else { break };
            v = v
                .checked_mul(10)
                .and_then(|v| v.checked_add(d as i128))
                .ok_or(ParseError::LiteralOverflow { at })?;
            self.pos += 1;
        }
        Ok(v)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenConfig {
    pub max_ops: u32,
    pub operand_max: u64,
    pub intermediate_max: u64,
    pub allowed_ops: Vec<Op>,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            max_ops: DEFAULT_MAX_OPS,
            operand_max: DEFAULT_OPERAND_MAX,
            intermediate_max: DEFAULT_INTERMEDIATE_MAX,
            allowed_ops: Op::ALL.to_vec(),
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn with_seed(seed: u64) -> Self {
        GenConfig {
            seed,
            ..GenConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), GenError> {
        if self.max_ops == 0 {
            return Err(GenError::InvalidConfig("max_ops must be at least 1"));
        }
        if self.operand_max == 0 {
            return Err(GenError::InvalidConfig("operand_max must be at least 1"));
        }
        if self.operand_max > self.intermediate_max {
            return Err(GenError::InvalidConfig("intermediate_max must be >= operand_max"));
        }
        if self.allowed_ops.is_empty() {
            return Err(GenError::InvalidConfig("allowed_ops is empty"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArithmeticProblem {
    pub id: String,
    pub seed: u64,
    pub expr: Expr,
    pub rendered: String,
    pub answer: i128,
    pub op_count: u32,
    pub max_intermediate_magnitude: u128,
}

impl ArithmeticProblem {
    /// Rebuilds a problem from a stored expression, re-deriving the answer.
    pub fn from_expr(id: String, seed: u64, expr: Expr) -> Result<Self, EvalError> {
        let answer = evaluate_expr(&expr)?;
        let max_intermediate_magnitude =
            max_intermediate_magnitude(&expr).ok_or(EvalError::BoundViolation { value: None })?;
        Ok(ArithmeticProblem {
            id,
            seed,
            rendered: render_expr(&expr),
            op_count: expr.op_count(),
            answer,
            max_intermediate_magnitude,
            expr,
        })
    }
}

/// Per-problem seed derived from the dataset seed and the problem index.
pub fn problem_seed(config_seed: u64, index: u64) -> u64 {
    mix_seed(config_seed, index)
}

pub fn generate_problem(config: &GenConfig, index: u64) -> Result<ArithmeticProblem, GenError> {
    config.validate()?;
    let seed = problem_seed(config.seed, index);
    let mut gen = Generator {
        rng: ChaCha8Rng::seed_from_u64(seed),
        config,
    };
    let ops = gen.rng.random_range(1..=config.max_ops);
    let (expr, answer) = gen.build(ops, 1)?;
    let max_intermediate_magnitude = max_intermediate_magnitude(&expr).expect("generated tree evaluates");
    Ok(ArithmeticProblem {
        id: format!("arith-{}-{index}", config.seed),
        seed,
        rendered: render_expr(&expr),
        op_count: ops,
        answer,
        max_intermediate_magnitude,
        expr,
    })
}

struct Generator<'a> {
    rng: ChaCha8Rng,
    config: &'a GenConfig,
}

impl Generator<'_> {
    /// Builds a subtree with exactly `ops` operators whose value is a multiple
    /// of `multiple`. Division nodes sample the divisor subtree first and then
    /// require the dividend to be a multiple of it.
    fn build(&mut self, ops: u32, multiple: i128) -> Result<(Expr, i128), GenError> {
        if ops == 0 {
            let q = self.log_uniform(self.config.operand_max / multiple as u64);
            let v = q as i128 * multiple;
            return Ok((Expr::Leaf(v), v));
        }
        let limit = self.config.intermediate_max as u128;
        for _ in 0..MAX_NODE_ATTEMPTS {
            let op = self.config.allowed_ops[self.rng.random_range(0..self.config.allowed_ops.len())];
            let left_ops = self.rng.random_range(0..ops);
            let right_ops = ops - 1 - left_ops;
            let ((l, lv), (r, rv)) = match op {
                Op::Add | Op::Sub => (self.build(left_ops, multiple)?, self.build(right_ops, multiple)?),
                Op::Mul => {
                    if self.rng.random::<bool>() {
                        (self.build(left_ops, multiple)?, self.build(right_ops, 1)?)
                    } else {
                        (self.build(left_ops, 1)?, self.build(right_ops, multiple)?)
                    }
                }
                Op::Div => {
                    let (r, rv) = self.build(right_ops, 1)?;
                    let Some(m) = multiple.checked_mul(rv.abs()) else {
                        continue;
                    };
                    if rv == 0 || m > self.config.operand_max as i128 {
                        continue;
                    }
                    (self.build(left_ops, m)?, (r, rv))
                }
            };
            let Ok(v) = op.apply(lv, rv) else { continue };
            if v.unsigned_abs() > limit {
                continue;
            }
            return Ok((Expr::binary(op, l, r), v));
        }
        Err(GenError::Exhausted)
    }

    /// Log-uniform integer in `[1, hi]`.
    fn log_uniform(&mut self, hi: u64) -> u64 {
        if hi <= 1 {
            return 1;
        }
        let u: f64 = self.rng.random();
        let v = libm::exp(u * libm::log(hi as f64 + 1.0));
        (v as u64).clamp(1, hi)
    }
}

/// Canonical form of an answer string: whitespace and thousands separators
/// removed, a leading `+` dropped, the unicode minus mapped to `-`.
pub fn normalize_answer(text: &str) -> Option<i128> {
    let cleaned: String = text
        .chars()
        .filter(|c| !c.is_whitespace() && *c != ',')
        .map(|c| if c == '−' { '-' } else { c })
        .collect();
    let digits = cleaned.strip_prefix('+').unwrap_or(&cleaned);
    if digits.is_empty() || digits.starts_with('+') {
        return None;
    }
    digits.parse::<i128>().ok()
}

pub fn check_answer(problem: &ArithmeticProblem, answer_text: &str) -> bool {
    normalize_answer(answer_text) == Some(problem.answer)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example_evaluates() {
        let e = parse_expr("(3483838+239)×5709526+8803−5446472+5530030").unwrap();
        assert_eq!(evaluate_expr(&e).unwrap(), 19_892_428_309_863);
    }

    #[test]
    fn annihilator_and_exact_division() {
        assert_eq!(evaluate_expr(&parse_expr("0×9999999").unwrap()).unwrap(), 0);
        assert_eq!(evaluate_expr(&parse_expr("(6+2)÷4").unwrap()).unwrap(), 2);
    }

    #[test]
    fn inexact_division_is_an_error() {
        let e = parse_expr("7÷2").unwrap();
        assert_eq!(
            evaluate_expr(&e),
            Err(EvalError::InexactDivision {
                dividend: 7,
                divisor: 2
            })
        );
        assert_eq!(
            evaluate_expr(&parse_expr("7÷(2-2)").unwrap()),
            Err(EvalError::DivisionByZero)
        );
    }

    #[test]
    fn bound_violation() {
        let e = parse_expr("10000000×10000000×1000").unwrap();
        assert!(matches!(evaluate_expr(&e), Err(EvalError::BoundViolation { .. })));
        let ok = parse_expr("10000000×10000000×100").unwrap();
        assert_eq!(evaluate_expr(&ok).unwrap(), 10_000_000_000_000_000);
    }

    #[test]
    fn render_shapes() {
        let e = Expr::binary(
            Op::Add,
            Expr::leaf(3),
            Expr::binary(Op::Mul, Expr::leaf(4), Expr::leaf(5)),
        );
        assert_eq!(render_expr(&e), "(3+(4×5))");
        assert_eq!(render_expr(&Expr::leaf(7)), "7");
        assert_eq!(parse_expr("(3+(4×5))").unwrap(), e);
    }

    #[test]
    fn precedence_and_associativity() {
        let e = parse_expr("2-3-4").unwrap();
        assert_eq!(evaluate_expr(&e).unwrap(), -5);
        let e = parse_expr("2+3*4").unwrap();
        assert_eq!(evaluate_expr(&e).unwrap(), 14);
        let e = parse_expr("3 - -5").unwrap();
        assert_eq!(evaluate_expr(&e).unwrap(), 8);
    }

    #[test]
    fn parse_errors() {
        assert_eq!(parse_expr(""), Err(ParseError::UnexpectedEnd));
        assert!(matches!(parse_expr("(1+2"), Err(ParseError::UnexpectedEnd)));
        assert!(matches!(parse_expr("1+2)"), Err(ParseError::Trailing { .. })));
        assert!(matches!(
            parse_expr("1+a"),
            Err(ParseError::UnexpectedChar { found: 'a', .. })
        ));
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = GenConfig::with_seed(7);
        let a = generate_problem(&cfg, 0).unwrap();
        let b = generate_problem(&cfg, 0).unwrap();
        assert_eq!(a, b);
        assert!((1..=10).contains(&a.op_count));
        assert_ne!(generate_problem(&cfg, 1).unwrap().rendered, a.rendered);
    }

    #[test]
    fn single_add_config() {
        let cfg = GenConfig {
            max_ops: 1,
            allowed_ops: alloc::vec![Op::Add],
            ..GenConfig::with_seed(3)
        };
        for i in 0..50 {
            let p = generate_problem(&cfg, i).unwrap();
            match &p.expr {
                Expr::Binary { op: Op::Add, lhs, rhs } => {
                    for side in [lhs, rhs] {
                        let Expr::Leaf(v) = **side else { panic!("leaf expected") };
                        assert!((1..=10_000_000).contains(&v));
                    }
                }
                other => panic!("unexpected shape {other:?}"),
            }
        }
    }

    #[test]
    fn rejects_infeasible_config() {
        let cfg = GenConfig {
            intermediate_max: 10,
            operand_max: 100,
            ..GenConfig::default()
        };
        assert!(matches!(generate_problem(&cfg, 0), Err(GenError::InvalidConfig(_))));
        let cfg = GenConfig {
            allowed_ops: alloc::vec![],
            ..GenConfig::default()
        };
        assert!(generate_problem(&cfg, 0).is_err());
    }

    #[test]
    fn division_only_is_exact() {
        let cfg = GenConfig {
            allowed_ops: alloc::vec![Op::Div],
            max_ops: 4,
            ..GenConfig::with_seed(11)
        };
        for i in 0..200 {
            let p = generate_problem(&cfg, i).unwrap();
            assert_eq!(evaluate_expr(&p.expr).unwrap(), p.answer);
        }
    }

    #[test]
    fn answer_normalization() {
        let p = ArithmeticProblem::from_expr("t".into(), 0, Expr::leaf(42)).unwrap();
        assert!(check_answer(&p, " 42 "));
        assert!(check_answer(&p, "+42"));
        assert!(!check_answer(&p, "41"));
        assert!(!check_answer(&p, "forty-two"));
        assert!(!check_answer(&p, ""));
        let p = ArithmeticProblem::from_expr("t".into(), 0, Expr::leaf(19_892_428_309_863)).unwrap();
        assert!(check_answer(&p, "19,892,428,309,863"));
        let n = ArithmeticProblem::from_expr("t".into(), 0, parse_expr("1-43").unwrap()).unwrap();
        assert!(check_answer(&n, "−42"));
        assert!(check_answer(&n, "-42"));
    }
}
