//! Parsing of chain-of-thought completions.
//!
//! Completions restate intermediate candidates before settling, so both
//! parsers take the *last* occurrence: the last well-formed JSON object and
//! the last standalone `true`/`false` token.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::LlmError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CotValue {
    Text(String),
    List(Vec<String>),
}

impl CotValue {
    pub fn as_text(&self) -> Option<&str> {
        match self {
            CotValue::Text(s) => Some(s),
            CotValue::List(_) => None,
        }
    }

    /// List items; a scalar is treated as a one-element list unless empty.
    pub fn items(&self) -> Vec<String> {
        match self {
            CotValue::List(v) => v.clone(),
            CotValue::Text(s) if s.trim().is_empty() => Vec::new(),
            CotValue::Text(s) => vec![s.clone()],
        }
    }
}

pub type CotMap = BTreeMap<String, CotValue>;

fn scalar_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => String::new(),
        other => other.to_string(),
    }
}

fn to_cot_value(v: &Value) -> CotValue {
    match v {
        Value::Array(items) => CotValue::List(
            items
                .iter()
                .map(scalar_text)
                .filter(|s| !s.trim().is_empty())
                .collect(),
        ),
        other => CotValue::Text(scalar_text(other)),
    }
}

/// Top-level JSON objects embedded in free text, in order of appearance.
fn embedded_objects(raw: &str) -> Vec<serde_json::Map<String, Value>> {
    let mut found = Vec::new();
    let mut pos = 0;
    while let Some(offset) = raw[pos..].find('{') {
        let start = pos + offset;
        let mut stream = serde_json::Deserializer::from_str(&raw[start..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(Value::Object(map))) => {
                found.push(map);
                pos = start + stream.byte_offset();
            }
            _ => pos = start + 1,
        }
    }
    found
}

/// Extracts the last well-formed JSON object from `raw` and checks that every
/// key in `required` is present.
pub fn parse_cot_json(raw: &str, required: &[&str]) -> Result<CotMap, LlmError> {
    let object = embedded_objects(raw)
        .pop()
        .ok_or(LlmError::MalformedOutput)?;
    let map: CotMap = object
        .iter()
        .map(|(k, v)| (k.clone(), to_cot_value(v)))
        .collect();
    let missing: BTreeSet<String> = required
        .iter()
        .filter(|k| !map.contains_key(**k))
        .map(|k| k.to_string())
        .collect();
    if missing.is_empty() {
        Ok(map)
    } else {
        Err(LlmError::MissingKeys(missing.into_iter().collect()))
    }
}

/// Last standalone `true`/`false` token, case-insensitive.
pub fn parse_boolean_verdict(raw: &str) -> Result<bool, LlmError> {
    raw.split(|c: char| !c.is_alphanumeric())
        .rev()
        .find_map(|tok| {
            if tok.eq_ignore_ascii_case("true") {
                Some(true)
            } else if tok.eq_ignore_ascii_case("false") {
                Some(false)
            } else {
                None
            }
        })
        .ok_or(LlmError::MalformedOutput)
}
