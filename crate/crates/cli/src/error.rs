use std::fmt;

use nriqa_core::Error as CoreError;

/// Process exit status of a failed command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Usage = 2,
    Environment = 3,
    Numerical = 4,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ExitKind,
    pub message: String,
}

impl CliError {
    pub fn usage(msg: impl fmt::Display) -> Self {
        Self { kind: ExitKind::Usage, message: msg.to_string() }
    }

    pub fn environment(msg: impl fmt::Display) -> Self {
        Self { kind: ExitKind::Environment, message: msg.to_string() }
    }

    pub fn numerical(msg: impl fmt::Display) -> Self {
        Self { kind: ExitKind::Numerical, message: msg.to_string() }
    }

    pub fn code(&self) -> i32 {
        self.kind as i32
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

// Bad inputs are the caller's problem, I/O is the machine's, and anything
// that blew up inside the numerics gets its own code.
impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let kind = match &e {
            CoreError::InvalidInput(_) | CoreError::Image(_) | CoreError::Format { .. } | CoreError::Weights(_) => {
                ExitKind::Usage
            }
            CoreError::Io(_) => ExitKind::Environment,
            CoreError::NonFinite(_) | CoreError::Tensor(_) => ExitKind::Numerical,
        };
        Self { kind, message: e.to_string() }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::environment(e)
    }
}

pub type CliResult<T> = Result<T, CliError>;
