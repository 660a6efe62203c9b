use serde_json::{json, Value};

/// Exit code for bad input: config, flags, files.
pub const EXIT_USAGE: i32 = 2;
/// Exit code for failures while computing.
pub const EXIT_RUNTIME: i32 = 1;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub kind: &'static str,
    pub message: String,
    pub details: Value,
}

impl CliError {
    pub fn usage(kind: &'static str, message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, kind, message: message.into(), details: Value::Null }
    }

    pub fn with_details(mut self, details: Value) -> Self {
        self.details = details;
        self
    }

    pub fn to_json(&self) -> Value {
        let mut v = json!({ "error": self.kind, "message": self.message });
        if !self.details.is_null() {
            v["details"] = self.details.clone();
        }
        v
    }
}

impl From<covflow::Error> for CliError {
    fn from(e: covflow::Error) -> Self {
        let code = match e {
            covflow::Error::InvalidInput(_) | covflow::Error::NotPositiveDefinite { .. } => EXIT_USAGE,
            _ => EXIT_RUNTIME,
        };
        let details = match &e {
            covflow::Error::Plan { iteration, .. } => json!({ "iteration": iteration }),
            _ => Value::Null,
        };
        Self { code, kind: e.tag(), message: e.to_string(), details }
    }
}

pub fn io_error(path: &std::path::Path, e: std::io::Error) -> CliError {
    let (kind, message) = if e.kind() == std::io::ErrorKind::NotFound {
        ("file_not_found", format!("file not found: {}", path.display()))
    } else {
        ("io", format!("{}: {e}", path.display()))
    };
    CliError::usage(kind, message).with_details(json!({ "path": path.display().to_string() }))
}

pub type CliResult<T> = Result<T, CliError>;
