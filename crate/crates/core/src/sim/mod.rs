//! Deterministic simulation of a small cluster and the isolation checker that audits its traces.

mod check;
mod runner;
mod scenario;
mod trace;

pub use check::{check_isolation, Channel, IsolationReport, Mediated, ResidualChannel, ResidualKind, Summary, Violation};
pub use runner::{run, SimTransport};
pub use scenario::*;
pub use trace::{parse_trace, write_trace, Body, JobView, ProcView, TraceRecord};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("invalid scenario at {path}: {message}")]
    Invalid { path: String, message: String },
    #[error("malformed scenario at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("trace line {line}: {message}")]
    BadTrace { line: usize, message: String },
    #[error("trace does not match scenario: {0}")]
    TraceMismatch(String),
}
