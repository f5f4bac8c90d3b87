//! Case-data constraints: conjunctions of comparisons.
//!
//! Textual form, as written in model files:
//!
//! ```text
//! amount <= 1000 && approved = true && region != "north"
//! ```
//!
//! The right-hand side of a comparison is either a literal (integer, real,
//! quoted text, `true`/`false`) or another variable name. A constraint whose
//! variables are not all set holds vacuously.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::value::{DataMap, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CmpOp {
    fn holds(self, ord: Ordering) -> bool {
        match self {
            CmpOp::Eq => ord == Ordering::Equal,
            CmpOp::Ne => ord != Ordering::Equal,
            CmpOp::Lt => ord == Ordering::Less,
            CmpOp::Le => ord != Ordering::Greater,
            CmpOp::Gt => ord == Ordering::Greater,
            CmpOp::Ge => ord != Ordering::Less,
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            CmpOp::Eq => "=",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Operand {
    Literal(Value),
    Variable(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub variable: String,
    pub op: CmpOp,
    pub rhs: Operand,
}

/// A conjunction of comparisons.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Predicate(pub Vec<Comparison>);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConstraint {
    pub description: String,
    pub predicate: Predicate,
}

/// Compare two values. Integers and reals compare numerically; otherwise the
/// types must match.
pub fn compare(a: &Value, b: &Value) -> Option<Ordering> {
    match (a, b) {
        (Value::Integer(x), Value::Integer(y)) => Some(x.cmp(y)),
        (Value::Text(x), Value::Text(y)) => Some(x.cmp(y)),
        (Value::Boolean(x), Value::Boolean(y)) => Some(x.cmp(y)),
        _ => a.as_f64()?.partial_cmp(&b.as_f64()?),
    }
}

impl Predicate {
    pub fn variables(&self) -> impl Iterator<Item = &str> {
        self.0.iter().flat_map(|c| {
            let rhs = match &c.rhs {
                Operand::Variable(v) => Some(v.as_str()),
                Operand::Literal(_) => None,
            };
            std::iter::once(c.variable.as_str()).chain(rhs)
        })
    }

    /// Evaluate against case data. Vacuously true if any referenced variable
    /// is unset; false on a type-incompatible comparison.
    pub fn holds(&self, data: &DataMap) -> bool {
        if self.variables().any(|v| !data.contains_key(v)) {
            return true;
        }
        self.0.iter().all(|c| {
            let lhs = &data[&c.variable];
            let rhs = match &c.rhs {
                Operand::Literal(v) => v,
                Operand::Variable(v) => &data[v],
            };
            compare(lhs, rhs).is_some_and(|ord| c.op.holds(ord))
        })
    }
}

impl DataConstraint {
    pub fn holds(&self, data: &DataMap) -> bool {
        self.predicate.holds(data)
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
#[error("constraint syntax error at byte {pos}: {msg}")]
pub struct ParseError {
    pub pos: usize,
    pub msg: String,
}

struct Lexer<'a> {
    src: &'a str,
    pos: usize,
}

#[derive(Debug, PartialEq)]
enum Token {
    Ident(String),
    Op(CmpOp),
    And,
    Lit(Value),
}

impl<'a> Lexer<'a> {
    fn err(&self, msg: impl Into<String>) -> ParseError {
        ParseError { pos: self.pos, msg: msg.into() }
    }

    fn next(&mut self) -> Result<Option<Token>, ParseError> {
        let rest = &self.src[self.pos..];
        let trimmed = rest.trim_start();
        self.pos += rest.len() - trimmed.len();
        let rest = trimmed;
        let Some(c) = rest.chars().next() else {
            return Ok(None);
        };
        let two = rest.get(..2).unwrap_or("");
        let (tok, len) = match (c, two) {
            (_, "&&") => (Token::And, 2),
            (_, "==") => (Token::Op(CmpOp::Eq), 2),
            (_, "!=") => (Token::Op(CmpOp::Ne), 2),
            (_, "<=") => (Token::Op(CmpOp::Le), 2),
            (_, ">=") => (Token::Op(CmpOp::Ge), 2),
            ('=', _) => (Token::Op(CmpOp::Eq), 1),
            ('<', _) => (Token::Op(CmpOp::Lt), 1),
            ('>', _) => (Token::Op(CmpOp::Gt), 1),
            ('≠', _) => (Token::Op(CmpOp::Ne), c.len_utf8()),
            ('≤', _) => (Token::Op(CmpOp::Le), c.len_utf8()),
            ('≥', _) => (Token::Op(CmpOp::Ge), c.len_utf8()),
            ('"', _) => {
                let body = &rest[1..];
                let end = body.find('"').ok_or_else(|| self.err("unterminated string"))?;
                (Token::Lit(Value::Text(body[..end].to_string())), end + 2)
            }
            (c, _) if c.is_ascii_digit() || c == '-' => {
                let end = rest
                    .find(|ch: char| !(ch.is_ascii_digit() || matches!(ch, '-' | '.' | 'e' | 'E' | '+')))
                    .unwrap_or(rest.len());
                let text = &rest[..end];
                let value = if let Ok(i) = text.parse::<i64>() {
                    Value::Integer(i)
                } else if let Ok(r) = text.parse::<f64>() {
                    Value::Real(r)
                } else {
                    return Err(self.err(format!("bad number {text:?}")));
                };
                (Token::Lit(value), end)
            }
            (c, _) if c.is_alphabetic() || c == '_' => {
                let end = rest
                    .find(|ch: char| !(ch.is_alphanumeric() || ch == '_'))
                    .unwrap_or(rest.len());
                let word = &rest[..end];
                let tok = match word {
                    "and" | "AND" => Token::And,
                    "true" => Token::Lit(Value::Boolean(true)),
                    "false" => Token::Lit(Value::Boolean(false)),
                    _ => Token::Ident(word.to_string()),
                };
                (tok, end)
            }
            _ => return Err(self.err(format!("unexpected character {c:?}"))),
        };
        self.pos += len;
        Ok(Some(tok))
    }
}

impl FromStr for Predicate {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut lx = Lexer { src: s, pos: 0 };
        let mut atoms = Vec::new();
        loop {
            let variable = match lx.next()? {
                Some(Token::Ident(v)) => v,
                _ => return Err(lx.err("expected variable name")),
            };
            let op = match lx.next()? {
                Some(Token::Op(op)) => op,
                _ => return Err(lx.err("expected comparison operator")),
            };
            let rhs = match lx.next()? {
                Some(Token::Lit(v)) => Operand::Literal(v),
                Some(Token::Ident(v)) => Operand::Variable(v),
                _ => return Err(lx.err("expected literal or variable")),
            };
            atoms.push(Comparison { variable, op, rhs });
            match lx.next()? {
                None => break,
                Some(Token::And) => continue,
                Some(_) => return Err(lx.err("expected `&&` or end of input")),
            }
        }
        Ok(Predicate(atoms))
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, c) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" && ")?;
            }
            write!(f, "{} {} ", c.variable, c.op.symbol())?;
            match &c.rhs {
                Operand::Literal(v) => write!(f, "{v}")?,
                Operand::Variable(v) => f.write_str(v)?,
            }
        }
        Ok(())
    }
}
