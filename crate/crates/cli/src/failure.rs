use std::fmt::Display;

use serde_json::json;

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

/// A failed command: what went wrong and the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub kind: String,
    pub message: String,
    pub code: u8,
}

impl Failure {
    pub fn usage(message: impl Display) -> Self {
        Self {
            kind: "usage".into(),
            message: message.to_string(),
            code: EXIT_USAGE,
        }
    }

    pub fn data(kind: &str, message: impl Display) -> Self {
        Self {
            kind: kind.into(),
            message: message.to_string(),
            code: EXIT_DATA,
        }
    }

    pub fn to_json(&self) -> String {
        json!({"error": {"kind": self.kind, "message": self.message, "exit_code": self.code}}).to_string()
    }
}

impl From<prefixmtl::Error> for Failure {
    fn from(e: prefixmtl::Error) -> Self {
        let code = if e.is_numeric_error() {
            EXIT_NUMERIC
        } else if e.is_data_error() || matches!(e, prefixmtl::Error::Io { .. }) {
            EXIT_DATA
        } else {
            EXIT_USAGE
        };
        Self {
            kind: e.kind().into(),
            message: e.to_string(),
            code,
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::data("io", e)
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Self::data("json", e)
    }
}
