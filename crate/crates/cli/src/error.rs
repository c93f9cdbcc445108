use cdr_core::CdrError;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error{}: {message}", row.map(|r| format!(" at line {r}")).unwrap_or_default())]
    Data { row: Option<usize>, message: String },

    #[error("numerical failure: {0}")]
    Numerical(#[from] CdrError),

    #[error("cannot write output: {0}")]
    Output(String),
}

impl CliError {
    pub fn data(row: Option<usize>, message: impl Into<String>) -> Self {
        CliError::Data { row, message: message.into() }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data { .. } | CliError::Output(_) => 3,
            CliError::Numerical(CdrError::InvalidInput(_)) => 2,
            CliError::Numerical(_) => 4,
        }
    }

    pub fn report(&self) -> ErrorReport {
        let (kind, cell, row) = match self {
            CliError::Config(_) => ("config", None, None),
            CliError::Data { row, .. } => ("data", None, *row),
            CliError::Output(_) => ("output", None, None),
            CliError::Numerical(e) => ("numerical", cell_of(e), None),
        };
        ErrorReport { kind, exit_code: self.exit_code(), message: self.to_string(), cell, row }
    }
}

fn cell_of(e: &CdrError) -> Option<String> {
    match e {
        CdrError::Separation(c) | CdrError::SingularHessian(c) | CdrError::DegenerateCell(c) => Some(c.to_string()),
        CdrError::StepFailed { cell, .. } => Some(cell.to_string()),
        _ => None,
    }
}

/// Machine-readable error payload written to stderr and the manifest.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ErrorReport {
    pub kind: &'static str,
    pub exit_code: i32,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cell: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub row: Option<usize>,
}
