use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the registration toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid rigid transform: {0}")]
    InvalidTransform(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("degenerate feature row {row}: norm {norm:e} is below the admissible minimum")]
    DegenerateFeature { row: usize, norm: f64 },

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("infeasible transport instance: {0}")]
    Infeasible(String),

    #[error("insufficient correspondences: need at least {needed}, got {got}")]
    InsufficientPairs { needed: usize, got: usize },

    #[error("degenerate correspondence geometry: {0}")]
    DegenerateGeometry(String),

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("report schema error: {0}")]
    ReportSchema(String),

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path} line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

impl Error {
    pub(crate) fn shape(
        context: &'static str,
        expected: impl ToString,
        actual: impl ToString,
    ) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    /// Wraps an error with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// True for errors caused by bad configuration or missing inputs rather
    /// than by a numerical failure at run time.
    pub fn is_config_error(&self) -> bool {
        match self {
            Error::Config(_) | Error::Io { .. } | Error::Parse { .. } => true,
            Error::Stage { source, .. } => source.is_config_error(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
