//! Declarative conformance testing for TES servers.
//!
//! A suite is a YAML file of ordered request/poll/assert cases. Cases share
//! variables: values captured from one response can be referenced as
//! `${name}` in later requests.

mod runner;
mod suite;

pub use runner::{
    assert_response, format_report, run_suite, run_suite_with, CaseReport, Response, RunOptions,
    SuiteReport,
};
pub use suite::{
    load_suite, parse_suite, Assertion, Case, LoadError, Poll, QueryValue, Request, SchemaError,
    Suite, BUILTIN_VARIABLES,
};

/// Location of the suite shipped with this crate.
pub const CORE_SUITE_PATH: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/suites/core.yaml");
