use std::fmt;

use rofusion::Error;

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;

/// A command failure carrying its process exit code.
#[derive(Debug)]
pub struct Exit {
    pub code: i32,
    pub message: String,
}

impl Exit {
    pub fn failure(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_FAILURE,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_IO,
            message: message.into(),
        }
    }

    /// Prefixes the message with where it happened.
    pub fn context(mut self, what: impl fmt::Display) -> Self {
        self.message = format!("{what}: {}", self.message);
        self
    }
}

impl fmt::Display for Exit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Exit {}

impl From<Error> for Exit {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io(_) | Error::FrameFile { .. } | Error::Checkpoint { .. } => EXIT_IO,
            Error::Config { .. } | Error::Json(_) | Error::ModeMismatch { .. } | Error::OutOfExtent { .. } => EXIT_CONFIG,
            _ => EXIT_FAILURE,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Exit {
    fn from(e: std::io::Error) -> Self {
        Self::io(e.to_string())
    }
}

impl From<csv::Error> for Exit {
    fn from(e: csv::Error) -> Self {
        Self::io(e.to_string())
    }
}

impl From<serde_json::Error> for Exit {
    fn from(e: serde_json::Error) -> Self {
        Self::config(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, Exit>;
