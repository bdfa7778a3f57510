//! Experiment orchestration for the `agp` binary: configuration, run
//! directories, the subcommands, and comparison reports.

pub mod commands;
pub mod config;
pub mod report;
pub mod rundir;

use std::fmt;

use agp_core::error::{Error as CoreError, ErrorKind};

/// Process exit codes.
pub mod exit {
    pub const OTHER: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const DATA: i32 = 3;
    pub const NUMERIC: i32 = 4;
}

/// A classified failure raised by the CLI layer itself.
#[derive(Debug)]
pub struct Failure {
    pub kind: ErrorKind,
    pub msg: String,
}

impl Failure {
    pub fn config(msg: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Config, msg: msg.into() }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Data, msg: msg.into() }
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Numeric, msg: msg.into() }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl std::error::Error for Failure {}

fn code(kind: ErrorKind) -> i32 {
    match kind {
        ErrorKind::Config => exit::CONFIG,
        ErrorKind::Data => exit::DATA,
        ErrorKind::Numeric => exit::NUMERIC,
        ErrorKind::Other => exit::OTHER,
    }
}

/// Exit code for an error: the first classified cause in the chain wins.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return code(f.kind);
        }
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            if e.kind() != ErrorKind::Other {
                return code(e.kind());
            }
        }
        if cause.downcast_ref::<toml::de::Error>().is_some() {
            return exit::CONFIG;
        }
    }
    exit::OTHER
}
