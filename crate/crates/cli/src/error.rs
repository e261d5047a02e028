use thiserror::Error;

use crate::config::Diagnostic;

#[derive(Debug, Error)]
pub enum CliError {
    /// Malformed document, anchored at a 1-based line and column.
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },

    #[error("invalid configuration:\n{}", render(.0))]
    Invalid(Vec<Diagnostic>),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown scenario {name:?}; valid names: {}", .valid.join(", "))]
    UnknownScenario { name: String, valid: Vec<&'static str> },

    #[error(transparent)]
    Core(#[from] tweezer_core::Error),

    #[error("i/o error: {0}")]
    Io(String),
}

fn render(d: &[Diagnostic]) -> String {
    d.iter().map(|d| format!("  {d}")).collect::<Vec<_>>().join("\n")
}

impl CliError {
    pub(crate) fn parse(text: &str, err: &toml::de::Error) -> Self {
        let offset = err.span().map(|s| s.start).unwrap_or(0).min(text.len());
        let before = &text[..offset];
        let line = before.matches('\n').count() + 1;
        let column = before.rsplit('\n').next().map(|l| l.chars().count()).unwrap_or(0) + 1;
        CliError::Parse { line, column, message: err.message().to_string() }
    }

    /// 2 for anything the user can fix in the inputs, 3 for failures of
    /// the numerics or the environment.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Parse { .. } | CliError::Invalid(_) | CliError::Config(_) | CliError::UnknownScenario { .. } => 2,
            CliError::Core(tweezer_core::Error::Domain(_)) => 2,
            CliError::Core(_) | CliError::Io(_) => 3,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
