//! Command-line surface for the compression pipeline: run configuration
//! parsing, the versioned checkpoint container, CSV reporting, and the
//! subcommand implementations.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod report;

use std::fmt;

/// Tune glibc malloc for the training workload. The tape allocates and frees
/// many multi-megabyte activation buffers per step; with default thresholds
/// glibc serves them with mmap/munmap, and the resulting page-fault churn
/// costs ~20% of wall time. Raising the mmap and trim thresholds keeps those
/// buffers on the reusable heap.
pub fn tune_allocator() {
    #[cfg(target_os = "linux")]
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
    }
}

/// Top-level failure classes, mapped to process exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or mismatched shapes/contracts. Exit code 2.
    Config(String),
    /// Filesystem or serialization failure. Exit code 3.
    Io(String),
    /// Non-finite numbers encountered mid-run. Exit code 4.
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<clipmap_core::Error> for CliError {
    fn from(e: clipmap_core::Error) -> Self {
        match e {
            clipmap_core::Error::NonFinite { .. } => CliError::Numeric(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
