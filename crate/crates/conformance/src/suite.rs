use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Variables every run defines without declaring them.
pub const BUILTIN_VARIABLES: &[&str] = &["run_id"];

const METHODS: &[&str] = &["GET", "POST", "PUT", "PATCH", "DELETE", "HEAD", "OPTIONS"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Suite {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    #[serde(default)]
    pub variables: BTreeMap<String, String>,
    #[serde(default)]
    pub cases: Vec<Case>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Case {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub request: Request,
    /// Variable name to JSON pointer into the final response body.
    #[serde(default)]
    pub capture: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub poll: Option<Poll>,
    #[serde(default, with = "serde_yaml::with::singleton_map_recursive")]
    pub assertions: Vec<Assertion>,
    /// Skip the remaining cases if this one fails.
    #[serde(default)]
    pub halt_on_fail: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Request {
    pub method: String,
    pub path: String,
    #[serde(default)]
    pub query: BTreeMap<String, QueryValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body: Option<Value>,
}

/// A query parameter value. Lists repeat the key once per element.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum QueryValue {
    One(Scalar),
    Many(Vec<Scalar>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Bool(bool),
    Int(i64),
    Float(f64),
    Text(String),
}

impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scalar::Bool(b) => write!(f, "{b}"),
            Scalar::Int(n) => write!(f, "{n}"),
            Scalar::Float(x) => write!(f, "{x}"),
            Scalar::Text(s) => f.write_str(s),
        }
    }
}

impl QueryValue {
    pub fn values(&self) -> Vec<String> {
        match self {
            QueryValue::One(v) => vec![v.to_string()],
            QueryValue::Many(vs) => vs.iter().map(Scalar::to_string).collect(),
        }
    }
}

/// Repeat the request until the value at `pointer` is one of
/// `equals_one_of` or `timeout_s` elapses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Poll {
    pub pointer: String,
    pub equals_one_of: Vec<Value>,
    #[serde(default = "default_interval")]
    pub interval_s: f64,
    #[serde(default = "default_timeout")]
    pub timeout_s: f64,
}

fn default_interval() -> f64 {
    1.0
}

fn default_timeout() -> f64 {
    60.0
}

/// One check against a response. Pointers are RFC 6901 JSON pointers into
/// the body; `""` is the whole body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Assertion {
    Status(u16),
    Exists(String),
    Absent(String),
    Equals { pointer: String, value: Value },
    Matches { pointer: String, regex: String },
    OneOf { pointer: String, values: Vec<Value> },
    /// The object at `pointer` has exactly these keys.
    Keys { pointer: String, values: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemaError {
    pub case_index: Option<usize>,
    pub case_name: Option<String>,
    pub field: Option<String>,
    pub message: String,
    pub line: Option<usize>,
    pub context: Option<String>,
}

impl fmt::Display for SchemaError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(index) = self.case_index {
            write!(f, "case {index}")?;
            if let Some(name) = &self.case_name {
                write!(f, " `{name}`")?;
            }
            f.write_str(": ")?;
        }
        if let Some(field) = &self.field {
            write!(f, "{field}: ")?;
        }
        f.write_str(&self.message)?;
        if let Some(line) = self.line {
            write!(f, " (line {line}")?;
            if let Some(context) = &self.context {
                write!(f, ": `{}`", context.trim())?;
            }
            f.write_str(")")?;
        }
        Ok(())
    }
}

impl std::error::Error for SchemaError {}

#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Schema(#[from] SchemaError),
}

pub fn load_suite(path: impl AsRef<Path>) -> Result<Suite, LoadError> {
    let path = path.as_ref();
    let source = std::fs::read_to_string(path).map_err(|source| LoadError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(parse_suite(&source)?)
}

/// Split serde_yaml's `cases[3].request: missing field ...` into parts.
fn split_path(message: &str) -> (Option<usize>, Option<String>, String) {
    let Some((path, rest)) = message.split_once(": ") else {
        return (None, None, message.to_string());
    };
    if path.contains(' ') {
        return (None, None, message.to_string());
    }
    let index = path
        .strip_prefix("cases[")
        .and_then(|s| s.split_once(']'))
        .and_then(|(n, _)| n.parse().ok());
    let field = match index {
        Some(_) => path
            .split_once("].")
            .map(|(_, field)| field.to_string()),
        None => Some(path.to_string()),
    };
    (index, field, rest.to_string())
}

fn case_name(doc: &serde_yaml::Value, index: usize) -> Option<String> {
    doc.get("cases")?
        .get(index)?
        .get("name")?
        .as_str()
        .map(str::to_string)
}

/// Parse and check a suite: structure, methods, poll settings, regexes, and
/// that every `${var}` is defined before use.
pub fn parse_suite(source: &str) -> Result<Suite, SchemaError> {
    let lines: Vec<&str> = source.lines().collect();
    let suite: Suite = serde_yaml::from_str(source).map_err(|err| {
        let line = err.location().map(|l| l.line());
        let doc: Option<serde_yaml::Value> = serde_yaml::from_str(source).ok();
        let text = err.to_string();
        let text = match text.rsplit_once(" at line ") {
            Some((head, _)) if line.is_some() => head.to_string(),
            _ => text,
        };
        let (case_index, field, message) = split_path(&text);
        SchemaError {
            case_index,
            case_name: case_index.and_then(|i| doc.as_ref().and_then(|d| case_name(d, i))),
            field,
            message,
            line,
            context: line.and_then(|l| lines.get(l - 1)).map(|s| s.to_string()),
        }
    })?;
    check_suite(&suite, &lines)?;
    Ok(suite)
}

fn variable_pattern() -> Regex {
    Regex::new(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}").expect("valid pattern")
}

/// Variable names referenced in `text`.
pub(crate) fn references(text: &str) -> Vec<String> {
    variable_pattern()
        .captures_iter(text)
        .map(|c| c[1].to_string())
        .collect()
}

fn json_strings<'a>(value: &'a Value, out: &mut Vec<&'a str>) {
    match value {
        Value::String(s) => out.push(s),
        Value::Array(items) => items.iter().for_each(|v| json_strings(v, out)),
        Value::Object(map) => map.values().for_each(|v| json_strings(v, out)),
        _ => {}
    }
}

/// Every templated text in a case, labeled by field.
fn templated_fields(case: &Case) -> Vec<(String, String)> {
    let mut fields = vec![("request.path".to_string(), case.request.path.clone())];
    for (key, value) in &case.request.query {
        for v in value.values() {
            fields.push((format!("request.query.{key}"), v));
        }
    }
    if let Some(body) = &case.request.body {
        let mut strings = Vec::new();
        json_strings(body, &mut strings);
        fields.extend(strings.into_iter().map(|s| ("request.body".to_string(), s.to_string())));
    }
    for (j, assertion) in case.assertions.iter().enumerate() {
        let mut strings = Vec::new();
        match assertion {
            Assertion::Equals { value, .. } => json_strings(value, &mut strings),
            Assertion::OneOf { values, .. } => values.iter().for_each(|v| json_strings(v, &mut strings)),
            Assertion::Matches { regex, .. } => strings.push(regex),
            _ => {}
        }
        fields.extend(strings.into_iter().map(|s| (format!("assertions[{j}]"), s.to_string())));
    }
    fields
}

fn line_of_case(lines: &[&str], name: &str) -> Option<usize> {
    lines
        .iter()
        .position(|l| {
            let l = l.trim_start().trim_start_matches("- ").trim_start();
            l.strip_prefix("name:")
                .map(|v| v.trim().trim_matches(|c| c == '"' || c == '\'') == name)
                .unwrap_or(false)
        })
        .map(|i| i + 1)
}

fn check_suite(suite: &Suite, lines: &[&str]) -> Result<(), SchemaError> {
    let mut defined: BTreeSet<String> = suite.variables.keys().cloned().collect();
    defined.extend(BUILTIN_VARIABLES.iter().map(|s| s.to_string()));

    for (index, case) in suite.cases.iter().enumerate() {
        let fail = |field: String, message: String| {
            let line = line_of_case(lines, &case.name);
            SchemaError {
                case_index: Some(index),
                case_name: Some(case.name.clone()),
                field: Some(field),
                message,
                line,
                context: line.and_then(|l| lines.get(l - 1)).map(|s| s.to_string()),
            }
        };
        if !METHODS.contains(&case.request.method.to_ascii_uppercase().as_str()) {
            return Err(fail(
                "request.method".into(),
                format!("unsupported method `{}`", case.request.method),
            ));
        }
        if !case.request.path.starts_with('/') {
            return Err(fail("request.path".into(), "must start with `/`".into()));
        }
        if let Some(poll) = &case.poll {
            if poll.equals_one_of.is_empty() {
                return Err(fail("poll.equals_one_of".into(), "must be non-empty".into()));
            }
            if !(poll.interval_s > 0.0 && poll.timeout_s > 0.0) {
                return Err(fail("poll".into(), "interval_s and timeout_s must be positive".into()));
            }
        }
        for (j, assertion) in case.assertions.iter().enumerate() {
            if let Assertion::Matches { regex, .. } = assertion {
                if references(regex).is_empty() {
                    if let Err(err) = Regex::new(regex) {
                        return Err(fail(format!("assertions[{j}].matches.regex"), err.to_string()));
                    }
                }
            }
        }
        for (field, text) in templated_fields(case) {
            if let Some(var) = references(&text).into_iter().find(|v| !defined.contains(v)) {
                return Err(fail(field, format!("undefined variable `${{{var}}}`")));
            }
        }
        defined.extend(case.capture.keys().cloned());
    }
    Ok(())
}
