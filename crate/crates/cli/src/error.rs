use serde::Serialize;

/// A failure, classified for the exit code: 1 for user errors, 2 otherwise.
#[derive(Debug)]
pub enum CliError {
    User(String),
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::User(_) => 1,
            CliError::Internal(_) => 2,
        }
    }

    /// The structured record printed to stderr.
    pub fn record(&self) -> String {
        #[derive(Serialize)]
        struct Record<'a> {
            error: &'a str,
            kind: &'a str,
            exit_code: i32,
        }
        let (kind, message) = match self {
            CliError::User(m) => ("user", m),
            CliError::Internal(m) => ("internal", m),
        };
        serde_json::to_string(&Record { error: message, kind, exit_code: self.exit_code() }).expect("record serializes")
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::User(m) | CliError::Internal(m) => f.write_str(m),
        }
    }
}

impl From<tig_core::Error> for CliError {
    fn from(e: tig_core::Error) -> Self {
        if e.is_user_error() {
            CliError::User(e.to_string())
        } else {
            CliError::Internal(e.to_string())
        }
    }
}

/// Failures writing run artifacts are internal.
pub fn io(context: impl std::fmt::Display) -> impl FnOnce(std::io::Error) -> CliError {
    move |e| CliError::Internal(format!("{context}: {e}"))
}
