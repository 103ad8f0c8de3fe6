//! Extraction of structured blocks from free-form model replies.

use serde_json::{Map, Value};

/// Result of [`parse_structured`]. `value` is present exactly when `ok`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParseOutcome {
    pub ok: bool,
    pub value: Option<Map<String, Value>>,
    pub diagnostics: String,
}

impl ParseOutcome {
    fn fail(diagnostics: impl Into<String>) -> Self {
        Self {
            ok: false,
            value: None,
            diagnostics: diagnostics.into(),
        }
    }
}

/// The first JSON object embedded in `reply`, skipping prose and code fences.
pub fn first_object(reply: &str) -> Option<Map<String, Value>> {
    reply.char_indices().filter(|(_, c)| *c == '{').find_map(|(i, _)| {
        let mut stream = serde_json::Deserializer::from_str(&reply[i..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(Value::Object(map))) => Some(map),
            _ => None,
        }
    })
}

/// Extracts the first well-formed structured block and checks that every
/// field in `expected_fields` is present and not null.
pub fn parse_structured(reply: &str, expected_fields: &[&str]) -> ParseOutcome {
    let Some(map) = first_object(reply) else {
        return ParseOutcome::fail("no JSON object found in the reply");
    };
    let missing: Vec<&str> = expected_fields
        .iter()
        .copied()
        .filter(|f| map.get(*f).is_none_or(Value::is_null))
        .collect();
    if !missing.is_empty() {
        return ParseOutcome::fail(format!("missing field(s): {}", missing.join(", ")));
    }
    ParseOutcome {
        ok: true,
        value: Some(map),
        diagnostics: String::new(),
    }
}

/// Reads a field as a string list; a bare string becomes a one-element list.
pub(crate) fn string_list(map: &Map<String, Value>, field: &str) -> Result<Vec<String>, String> {
    match map.get(field) {
        None | Some(Value::Null) => Ok(Vec::new()),
        Some(Value::String(s)) if s.trim().is_empty() => Ok(Vec::new()),
        Some(Value::String(s)) => Ok(vec![s.trim().to_string()]),
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| match v {
                Value::String(s) => Ok(s.trim().to_string()),
                other => Err(format!("`{field}` contains a non-string item {other}")),
            })
            .filter(|r| r.as_ref().map_or(true, |s| !s.is_empty()))
            .collect(),
        Some(other) => Err(format!("`{field}` must be a list of strings, got {other}")),
    }
}

pub(crate) fn string_field(map: &Map<String, Value>, field: &str) -> Result<String, String> {
    match map.get(field) {
        Some(Value::String(s)) if !s.trim().is_empty() => Ok(s.trim().to_string()),
        Some(Value::String(_)) => Err(format!("`{field}` is empty")),
        Some(other) => Err(format!("`{field}` must be a string, got {other}")),
        None => Err(format!("missing field `{field}`")),
    }
}

/// Interprets a check value: booleans, 0/1, or pass/fail style words.
pub(crate) fn check_value(v: &Value) -> Option<bool> {
    match v {
        Value::Bool(b) => Some(*b),
        Value::Number(n) => match n.as_f64()? {
            x if x == 1.0 => Some(true),
            x if x == 0.0 => Some(false),
            _ => None,
        },
        Value::String(s) => match s.trim().to_ascii_lowercase().as_str() {
            "true" | "pass" | "passed" | "yes" | "ok" | "1" => Some(true),
            "false" | "fail" | "failed" | "no" | "0" => Some(false),
            _ => None,
        },
        Value::Object(o) => o.get("pass").or_else(|| o.get("passed")).and_then(check_value),
        _ => None,
    }
}
