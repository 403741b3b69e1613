use std::fmt;

use thiserror::Error;

/// One violated config invariant, with a dotted path to the offending field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigIssue {
    pub path: String,
    pub message: String,
}

impl ConfigIssue {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid scenario ({} issue(s)):\n{}", .0.len(), render_issues(.0))]
    Config(Vec<ConfigIssue>),

    #[error("failed to parse scenario: {0}")]
    Parse(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("no models to aggregate")]
    EmptyModels,

    #[error("models have mismatched shapes")]
    ShapeMismatch,

    #[error("cluster member {0} has no uploaded model")]
    MissingUpload(usize),

    #[error("series for {key} has {actual} samples, expected {expected}")]
    RaggedSeries {
        key: String,
        expected: usize,
        actual: usize,
    },

    #[error("need at least {needed} series, got {actual}")]
    TooFewSeries { needed: usize, actual: usize },

    #[error("unknown federation strategy `{0}`")]
    UnknownStrategy(String),

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn render_issues(issues: &[ConfigIssue]) -> String {
    issues
        .iter()
        .map(|i| format!("  - {i}"))
        .collect::<Vec<_>>()
        .join("\n")
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
