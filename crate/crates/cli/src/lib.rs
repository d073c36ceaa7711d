//! Library side of the `saccade` command: subcommands, pipeline runner,
//! provenance records and exit codes.

pub mod commands;
pub mod ops;
pub mod pipeline;
pub mod provenance;
pub mod svg;

use std::fmt;
use std::path::{Path, PathBuf};

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "SACCADE_OUT";

pub mod exit {
    pub const GENERAL: i32 = 1;
    pub const UNKNOWN_STAGE: i32 = 3;
    pub const ORDER_VIOLATION: i32 = 4;
    pub const MISSING_INPUT: i32 = 5;
    pub const OVERWRITE_REFUSED: i32 = 6;
}

/// An error with a dedicated exit code and the stage it came from.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub stage: String,
    pub msg: String,
}

impl Failure {
    pub fn new(code: i32, stage: impl Into<String>, msg: impl Into<String>) -> Self {
        Failure { code, stage: stage.into(), msg: msg.into() }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}", self.stage, self.msg)
    }
}

impl std::error::Error for Failure {}

/// Exit code for an error chain: the first [`Failure`] found decides,
/// anything else is a general failure.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    err.chain()
        .find_map(|e| e.downcast_ref::<Failure>())
        .map_or(exit::GENERAL, |f| f.code)
}

/// Fails with the missing-input code unless `path` exists.
pub fn require_input(stage: &str, path: &Path) -> anyhow::Result<()> {
    if !path.exists() {
        return Err(Failure::new(exit::MISSING_INPUT, stage, format!("input {} does not exist", path.display())).into());
    }
    Ok(())
}

/// `--out` if given, else `$SACCADE_OUT/<name>`, else `saccade-out/<name>`.
pub fn output_dir(given: Option<PathBuf>, name: &str) -> PathBuf {
    given.unwrap_or_else(|| {
        let base = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("saccade-out"));
        base.join(name)
    })
}
