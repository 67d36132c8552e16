use std::collections::BTreeMap;
use std::fmt::Write;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use regex::Regex;
use reqwest::Method;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::suite::{references, Assertion, Case, Suite};

/// Status and parsed body of one HTTP exchange. Bodies that are not JSON are
/// kept as a JSON string; empty bodies become `null`.
#[derive(Debug, Clone, PartialEq)]
pub struct Response {
    pub status: u16,
    pub body: Value,
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub bearer_token: Option<String>,
    /// Overrides for suite variables, also used to pin `run_id`.
    pub variables: BTreeMap<String, String>,
    pub request_timeout: Duration,
    /// Upper bound applied to every poll timeout in the suite.
    pub max_poll_timeout: Option<Duration>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            bearer_token: None,
            variables: BTreeMap::new(),
            request_timeout: Duration::from_secs(30),
            max_poll_timeout: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub name: String,
    pub passed: bool,
    pub failures: Vec<String>,
    pub duration_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: String,
    pub base_url: String,
    pub passed: usize,
    pub failed: usize,
    pub duration_s: f64,
    pub cases: Vec<CaseReport>,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        self.failed == 0
    }

    pub fn failed_cases(&self) -> Vec<&str> {
        self.cases
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.name.as_str())
            .collect()
    }
}

fn substitute(text: &str, vars: &BTreeMap<String, String>) -> Result<String, String> {
    let mut out = text.to_string();
    for name in references(text) {
        let value = vars
            .get(&name)
            .ok_or_else(|| format!("variable `${{{name}}}` is not set"))?;
        out = out.replace(&format!("${{{name}}}"), value);
    }
    Ok(out)
}

fn substitute_json(value: &Value, vars: &BTreeMap<String, String>) -> Result<Value, String> {
    Ok(match value {
        Value::String(s) => Value::String(substitute(s, vars)?),
        Value::Array(items) => Value::Array(
            items
                .iter()
                .map(|v| substitute_json(v, vars))
                .collect::<Result<_, _>>()?,
        ),
        Value::Object(map) => Value::Object(
            map.iter()
                .map(|(k, v)| Ok((k.clone(), substitute_json(v, vars)?)))
                .collect::<Result<_, String>>()?,
        ),
        other => other.clone(),
    })
}

fn show(value: Option<&Value>) -> String {
    match value {
        Some(v) => v.to_string(),
        None => "<absent>".to_string(),
    }
}

/// Evaluate one assertion. `Err` carries a message with expected and actual
/// values.
pub fn assert_response(
    response: &Response,
    assertion: &Assertion,
    vars: &BTreeMap<String, String>,
) -> Result<(), String> {
    let at = |pointer: &str| response.body.pointer(pointer);
    match assertion {
        Assertion::Status(expected) => {
            if response.status == *expected {
                Ok(())
            } else {
                Err(format!("status: expected {expected}, got {}", response.status))
            }
        }
        Assertion::Exists(pointer) => match at(pointer) {
            Some(_) => Ok(()),
            None => Err(format!("{pointer}: expected to exist, but is absent")),
        },
        Assertion::Absent(pointer) => match at(pointer) {
            None => Ok(()),
            Some(v) => Err(format!("{pointer}: expected to be absent, got {v}")),
        },
        Assertion::Equals { pointer, value } => {
            let expected = substitute_json(value, vars)?;
            let actual = at(pointer);
            if actual == Some(&expected) {
                Ok(())
            } else {
                Err(format!("{pointer}: expected {expected}, got {}", show(actual)))
            }
        }
        Assertion::Matches { pointer, regex } => {
            let pattern = substitute(regex, vars)?;
            let re = Regex::new(&pattern).map_err(|e| format!("{pointer}: bad regex: {e}"))?;
            match at(pointer) {
                Some(Value::String(s)) if re.is_match(s) => Ok(()),
                actual => Err(format!(
                    "{pointer}: expected a string matching /{pattern}/, got {}",
                    show(actual)
                )),
            }
        }
        Assertion::OneOf { pointer, values } => {
            let expected = values
                .iter()
                .map(|v| substitute_json(v, vars))
                .collect::<Result<Vec<_>, _>>()?;
            let actual = at(pointer);
            if actual.is_some_and(|a| expected.contains(a)) {
                Ok(())
            } else {
                Err(format!(
                    "{pointer}: expected one of {}, got {}",
                    Value::Array(expected),
                    show(actual)
                ))
            }
        }
        Assertion::Keys { pointer, values } => match at(pointer) {
            Some(Value::Object(map)) => {
                let mut actual: Vec<&str> = map.keys().map(String::as_str).collect();
                let mut expected: Vec<&str> = values.iter().map(String::as_str).collect();
                actual.sort_unstable();
                expected.sort_unstable();
                if actual == expected {
                    Ok(())
                } else {
                    Err(format!("{pointer}: expected keys {expected:?}, got {actual:?}"))
                }
            }
            actual => Err(format!("{pointer}: expected an object, got {}", show(actual))),
        },
    }
}

struct Runner<'a> {
    http: reqwest::Client,
    base: String,
    options: &'a RunOptions,
}

impl Runner<'_> {
    async fn send(&self, case: &Case, vars: &BTreeMap<String, String>) -> Result<Response, String> {
        let req = &case.request;
        let path = substitute(&req.path, vars)?;
        let mut url = url::Url::parse(&format!("{}{path}", self.base))
            .map_err(|e| format!("bad url for path {path}: {e}"))?;
        if !req.query.is_empty() {
            let mut pairs = url.query_pairs_mut();
            for (key, value) in &req.query {
                for v in value.values() {
                    pairs.append_pair(key, &substitute(&v, vars)?);
                }
            }
        }
        let method = Method::from_bytes(req.method.to_ascii_uppercase().as_bytes())
            .map_err(|e| e.to_string())?;
        let mut builder = self.http.request(method, url);
        if let Some(token) = &self.options.bearer_token {
            builder = builder.bearer_auth(token);
        }
        if let Some(body) = &req.body {
            let body = substitute_json(body, vars)?;
            builder = builder
                .header("content-type", "application/json")
                .body(body.to_string());
        }
        let resp = builder
            .send()
            .await
            .map_err(|e| format!("transport error: {e}"))?;
        let status = resp.status().as_u16();
        let text = resp
            .text()
            .await
            .map_err(|e| format!("transport error reading body: {e}"))?;
        let body = if text.trim().is_empty() {
            Value::Null
        } else {
            serde_json::from_str(&text).unwrap_or(Value::String(text))
        };
        Ok(Response { status, body })
    }

    async fn run_case(&self, case: &Case, vars: &mut BTreeMap<String, String>) -> Vec<String> {
        let mut failures = Vec::new();
        let started = Instant::now();
        let response = loop {
            let response = match self.send(case, vars).await {
                Ok(r) => r,
                Err(msg) => {
                    failures.push(msg);
                    return failures;
                }
            };
            let Some(poll) = &case.poll else {
                break response;
            };
            let value = response.body.pointer(&poll.pointer);
            if value.is_some_and(|v| poll.equals_one_of.contains(v)) {
                break response;
            }
            let timeout = match self.options.max_poll_timeout {
                Some(cap) => poll.timeout_s.min(cap.as_secs_f64()),
                None => poll.timeout_s,
            };
            if started.elapsed().as_secs_f64() >= timeout {
                failures.push(format!(
                    "poll timed out after {timeout}s waiting for {} to be one of {}; last value {}",
                    poll.pointer,
                    Value::Array(poll.equals_one_of.clone()),
                    show(value)
                ));
                break response;
            }
            tokio::time::sleep(Duration::from_secs_f64(poll.interval_s)).await;
        };

        for assertion in &case.assertions {
            if let Err(msg) = assert_response(&response, assertion, vars) {
                failures.push(msg);
            }
        }
        for (name, pointer) in &case.capture {
            match response.body.pointer(pointer) {
                Some(Value::String(s)) => {
                    vars.insert(name.clone(), s.clone());
                }
                Some(Value::Null) | None => {
                    failures.push(format!("capture {name}: {pointer} is absent"));
                }
                Some(other) => {
                    vars.insert(name.clone(), other.to_string());
                }
            }
        }
        failures
    }
}

fn fresh_run_id() -> String {
    let nanos = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_nanos())
        .unwrap_or_default();
    format!("{:x}{:x}", nanos & 0xffff_ffff_ffff, std::process::id())
}

pub async fn run_suite(suite: &Suite, base_url: &str) -> SuiteReport {
    run_suite_with(suite, base_url, &RunOptions::default()).await
}

/// Run cases in order. A failing case does not stop the run unless it is
/// marked `halt_on_fail`; cases after that are reported failed unrun.
pub async fn run_suite_with(suite: &Suite, base_url: &str, options: &RunOptions) -> SuiteReport {
    let started = Instant::now();
    let mut vars = suite.variables.clone();
    vars.insert("run_id".to_string(), fresh_run_id());
    vars.extend(options.variables.clone());

    let http = reqwest::Client::builder()
        .timeout(options.request_timeout)
        .build()
        .expect("http client");
    let runner = Runner {
        http,
        base: base_url.trim_end_matches('/').to_string(),
        options,
    };

    let mut cases = Vec::with_capacity(suite.cases.len());
    let mut halted_by: Option<&str> = None;
    for case in &suite.cases {
        let case_started = Instant::now();
        let failures = match halted_by {
            Some(name) => vec![format!("not run: halted after `{name}` failed")],
            None => runner.run_case(case, &mut vars).await,
        };
        if !failures.is_empty() && case.halt_on_fail && halted_by.is_none() {
            halted_by = Some(&case.name);
        }
        cases.push(CaseReport {
            name: case.name.clone(),
            passed: failures.is_empty(),
            failures,
            duration_s: case_started.elapsed().as_secs_f64(),
        });
    }
    let passed = cases.iter().filter(|c| c.passed).count();
    SuiteReport {
        suite: suite.name.clone(),
        base_url: base_url.to_string(),
        passed,
        failed: cases.len() - passed,
        duration_s: started.elapsed().as_secs_f64(),
        cases,
    }
}

/// Human-readable report, one line per case plus failure details.
pub fn format_report(report: &SuiteReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "suite {} against {}", report.suite, report.base_url);
    for case in &report.cases {
        let mark = if case.passed { "PASS" } else { "FAIL" };
        let _ = writeln!(out, "  {mark}  {} ({:.2}s)", case.name, case.duration_s);
        for failure in &case.failures {
            let _ = writeln!(out, "        - {failure}");
        }
    }
    let _ = writeln!(
        out,
        "{} passed, {} failed in {:.2}s",
        report.passed, report.failed, report.duration_s
    );
    out
}
