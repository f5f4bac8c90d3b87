use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Declared type of a case variable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueType {
    Integer,
    Real,
    Text,
    Boolean,
}

impl fmt::Display for ValueType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ValueType::Integer => "integer",
            ValueType::Real => "real",
            ValueType::Text => "text",
            ValueType::Boolean => "boolean",
        })
    }
}

/// A typed case-data value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Value {
    Integer(i64),
    Real(f64),
    Text(String),
    Boolean(bool),
}

/// Case data: variable name to value.
pub type DataMap = BTreeMap<String, Value>;

impl Value {
    pub fn value_type(&self) -> ValueType {
        match self {
            Value::Integer(_) => ValueType::Integer,
            Value::Real(_) => ValueType::Real,
            Value::Text(_) => ValueType::Text,
            Value::Boolean(_) => ValueType::Boolean,
        }
    }

    /// Whether this value may be stored in a variable of type `ty`.
    /// Integers are accepted where reals are declared.
    pub fn conforms_to(&self, ty: ValueType) -> bool {
        matches!(
            (self, ty),
            (Value::Integer(_), ValueType::Integer)
                | (Value::Integer(_), ValueType::Real)
                | (Value::Real(_), ValueType::Real)
                | (Value::Text(_), ValueType::Text)
                | (Value::Boolean(_), ValueType::Boolean)
        )
    }

    /// Parse user input (CLI `k=v`, form fields) according to a declared type.
    pub fn parse_as(raw: &str, ty: ValueType) -> Option<Value> {
        let raw = raw.trim();
        match ty {
            ValueType::Integer => raw.parse().ok().map(Value::Integer),
            ValueType::Real => raw.parse().ok().map(Value::Real),
            ValueType::Text => Some(Value::Text(raw.to_string())),
            ValueType::Boolean => match raw {
                "true" | "yes" | "1" => Some(Value::Boolean(true)),
                "false" | "no" | "0" => Some(Value::Boolean(false)),
                _ => None,
            },
        }
    }

    pub(crate) fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Integer(i) => Some(*i as f64),
            Value::Real(r) => Some(*r),
            _ => None,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Integer(i) => write!(f, "{i}"),
            Value::Real(r) => write!(f, "{r}"),
            Value::Text(s) => write!(f, "{s:?}"),
            Value::Boolean(b) => write!(f, "{b}"),
        }
    }
}
