use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A memory value.
///
/// Serialized untagged: text as a JSON string, integers and decimals as JSON
/// numbers, lists and maps as arrays and objects. `null` is not a value; absence
/// is expressed with `Option<Value>` by callers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Boolean(bool),
    Integer(i64),
    Decimal(f64),
    Text(String),
    List(Vec<Value>),
    Map(BTreeMap<String, Value>),
}

impl Value {
    /// Rejects non-finite decimals, which have no canonical encoding.
    pub fn validate(&self) -> Result<()> {
        match self {
            Value::Decimal(d) if !d.is_finite() => Err(Error::InvalidValue(format!("non-finite decimal {d}"))),
            Value::List(items) => items.iter().try_for_each(Value::validate),
            Value::Map(map) => map.values().try_for_each(Value::validate),
            _ => Ok(()),
        }
    }

    /// Approximate payload size in bytes, used for copy accounting.
    pub fn byte_size(&self) -> u64 {
        match self {
            Value::Boolean(_) => 1,
            Value::Integer(_) | Value::Decimal(_) => 8,
            Value::Text(s) => s.len() as u64,
            Value::List(items) => items.iter().map(Value::byte_size).sum(),
            Value::Map(map) => map.iter().map(|(k, v)| k.len() as u64 + v.byte_size()).sum(),
        }
    }

    /// Parses a JSON fragment. Bare words that are not JSON are taken as text,
    /// so `--value hello` works on the command line.
    pub fn parse_lenient(raw: &str) -> Result<Value> {
        match serde_json::from_str::<serde_json::Value>(raw) {
            Ok(serde_json::Value::Null) => Err(Error::InvalidValue("null is not a value".into())),
            Ok(json) => {
                let value: Value = serde_json::from_value(json).map_err(|e| Error::InvalidValue(e.to_string()))?;
                value.validate()?;
                Ok(value)
            }
            Err(_) => Ok(Value::Text(raw.to_string())),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&crate::canonical::to_canonical_string(self))
    }
}

impl From<i64> for Value {
    fn from(v: i64) -> Self {
        Value::Integer(v)
    }
}

impl From<f64> for Value {
    fn from(v: f64) -> Self {
        Value::Decimal(v)
    }
}

impl From<bool> for Value {
    fn from(v: bool) -> Self {
        Value::Boolean(v)
    }
}

impl From<&str> for Value {
    fn from(v: &str) -> Self {
        Value::Text(v.to_string())
    }
}

impl From<String> for Value {
    fn from(v: String) -> Self {
        Value::Text(v)
    }
}

/// Checks a memory key: non-empty dot-separated segments, no whitespace or
/// control characters (the journal is newline-delimited).
pub fn validate_key(key: &str) -> Result<()> {
    let bad_char = key.chars().any(|c| c.is_whitespace() || c.is_control());
    if key.is_empty() || bad_char || key.split('.').any(str::is_empty) {
        return Err(Error::InvalidKey(key.to_string()));
    }
    Ok(())
}
