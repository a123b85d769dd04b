//! Experiment front end: profiles, manifests, the run executor, report
//! generation, and the self-verification suites.
//!
//! The binary in `main.rs` is a thin argument layer over this library so
//! integration tests can drive every command in-process.

pub mod manifest;
pub mod profiles;
pub mod report;
pub mod runner;
pub mod svg;
pub mod verify;

use std::fmt;

/// A command's terminal failure, carrying the process exit code the
/// contract assigns it: 1 usage, 2 run failure, 3 verification failure.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.message)
    }
}

impl std::error::Error for Failure {}

pub fn usage(message: impl Into<String>) -> Failure {
    Failure { code: 1, message: message.into() }
}

pub fn run_failure(message: impl Into<String>) -> Failure {
    Failure { code: 2, message: message.into() }
}

pub fn verify_failure(message: impl Into<String>) -> Failure {
    Failure { code: 3, message: message.into() }
}
