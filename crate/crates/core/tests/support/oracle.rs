//! Arbitrary-precision evaluator over rendered expressions, shared by test
//! targets.

use num_bigint::BigInt;

/// Independent evaluator over the rendered text. Records every node value and
/// whether each division was exact.
struct Oracle<'a> {
    chars: Vec<char>,
    pos: usize,
    nodes: &'a mut Vec<BigInt>,
    leaves: &'a mut Vec<BigInt>,
    inexact_division: bool,
}

impl Oracle<'_> {
    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn expr(&mut self) -> BigInt {
        let mut v = self.term();
        while let Some(c @ ('+' | '-' | '−')) = self.peek() {
            self.pos += 1;
            let r = self.term();
            v = if c == '+' { v + r } else { v - r };
            self.nodes.push(v.clone());
        }
        v
    }

    fn term(&mut self) -> BigInt {
        let mut v = self.factor();
        while let Some(c @ ('×' | '÷')) = self.peek() {
            self.pos += 1;
            let r = self.factor();
            if c == '×' {
                v *= r;
            } else {
                if r == zero() {
                    self.inexact_division = true;
                    v = zero();
                } else {
                    if &v % &r != zero() {
                        self.inexact_division = true;
                    }
                    v /= r;
                }
            }
            self.nodes.push(v.clone());
        }
        v
    }

    fn factor(&mut self) -> BigInt {
        if self.peek() == Some('(') {
            self.pos += 1;
            let v = self.expr();
            assert_eq!(self.peek(), Some(')'));
            self.pos += 1;
            return v;
        }
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_digit()) {
            self.pos += 1;
        }
        let s: String = self.chars[start..self.pos].iter().collect();
        let v: BigInt = s.parse().expect("digit run");
        self.leaves.push(v.clone());
        v
    }
}

pub fn zero() -> BigInt {
    BigInt::from(0)
}

pub struct Evaluation {
    pub value: BigInt,
    pub nodes: Vec<BigInt>,
    pub leaves: Vec<BigInt>,
    pub inexact_division: bool,
}

pub fn oracle(text: &str) -> Evaluation {
    let mut nodes = Vec::new();
    let mut leaves = Vec::new();
    let mut o = Oracle {
        chars: text.chars().filter(|c| !c.is_whitespace()).collect(),
        pos: 0,
        nodes: &mut nodes,
        leaves: &mut leaves,
        inexact_division: false,
    };
    let value = o.expr();
    assert_eq!(o.pos, o.chars.len(), "trailing input in {text}");
    let inexact_division = o.inexact_division;
    Evaluation {
        value,
        nodes,
        leaves,
        inexact_division,
    }
}
