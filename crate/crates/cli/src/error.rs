use std::fmt::Display;

use qkmps::ansatz::AnsatzError;
use qkmps::kernel::KernelError;
use qkmps::learn::LearnError;
use qkmps::mps::MpsError;
use thiserror::Error;

/// Error families with distinct process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Other,
    Io,
    Validation,
    NonConvergence,
}

impl Family {
    pub fn exit_code(self) -> i32 {
        match self {
            Family::Other => 1,
            Family::Io => 2,
            Family::Validation => 3,
            Family::NonConvergence => 4,
        }
    }
}

#[derive(Debug, Error)]
#[error("{stage}: {message}")]
pub struct CliError {
    pub stage: &'static str,
    pub family: Family,
    pub message: String,
}

impl CliError {
    pub fn validation(stage: &'static str, message: impl Into<String>) -> Self {
        Self {
            stage,
            family: Family::Validation,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.family.exit_code()
    }
}

pub trait Classify: Display {
    fn family(&self) -> Family;
}

impl Classify for std::io::Error {
    fn family(&self) -> Family {
        Family::Io
    }
}

impl Classify for serde_json::Error {
    fn family(&self) -> Family {
        if self.is_io() {
            Family::Io
        } else {
            Family::Validation
        }
    }
}

impl Classify for toml::de::Error {
    fn family(&self) -> Family {
        Family::Validation
    }
}

impl Classify for AnsatzError {
    fn family(&self) -> Family {
        Family::Validation
    }
}

impl Classify for MpsError {
    fn family(&self) -> Family {
        Family::Other
    }
}

impl Classify for KernelError {
    fn family(&self) -> Family {
        match self {
            KernelError::Io(_) => Family::Io,
            KernelError::Json(e) => e.family(),
            KernelError::Worker { .. } | KernelError::Coverage(..) | KernelError::Mps(_) => Family::Other,
            _ => Family::Validation,
        }
    }
}

impl Classify for LearnError {
    fn family(&self) -> Family {
        match self {
            LearnError::Io(_) => Family::Io,
            LearnError::Csv(e) if e.is_io_error() => Family::Io,
            LearnError::NonConvergence { .. } => Family::NonConvergence,
            LearnError::Kernel(e) => e.family(),
            _ => Family::Validation,
        }
    }
}

pub trait StageExt<T> {
    /// Labels an error with the pipeline stage that produced it.
    fn stage(self, stage: &'static str) -> Result<T, CliError>;
}

impl<T, E: Classify> StageExt<T> for Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T, CliError> {
        self.map_err(|e| CliError {
            stage,
            family: e.family(),
            message: e.to_string(),
        })
    }
}
