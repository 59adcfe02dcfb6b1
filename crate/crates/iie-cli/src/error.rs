use iie::IieError;
use thiserror::Error;

/// Failures surfaced by the command line, each with a fixed exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Lib(#[from] IieError),

    #[error("config: {0}")]
    Config(String),

    #[error("dataset column '{column}': {message}")]
    Schema { column: String, message: String },

    /// Fitted nuisances fall below the configured floor at these data rows.
    #[error("positivity below {floor} at {} row(s): {}", rows.len(), preview(rows))]
    Positivity { floor: f64, rows: Vec<usize> },

    #[error("residual check failed for {term}: {detail}")]
    Verify { term: String, detail: String },

    #[error("io: {0}")]
    Io(String),
}

fn preview(rows: &[usize]) -> String {
    let shown: Vec<String> = rows.iter().take(20).map(|r| r.to_string()).collect();
    let more = if rows.len() > 20 { ", ..." } else { "" };
    format!("{}{more}", shown.join(", "))
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Lib(IieError::FailureCap { .. }) => 3,
            CliError::Lib(IieError::Positivity { .. }) | CliError::Positivity { .. } => 4,
            CliError::Verify { .. } => 5,
            CliError::Io(_) => 1,
            _ => 2,
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            CliError::Lib(e) => e.id(),
            CliError::Config(_) => "config",
            CliError::Schema { .. } => "schema",
            CliError::Positivity { .. } => "positivity",
            CliError::Verify { .. } => "verify-residual",
            CliError::Io(_) => "io",
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
