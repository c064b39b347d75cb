use thiserror::Error;

use crate::train::Checkpoint;

pub type Result<T, E = GnolrError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum GnolrError {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("argument error: {0}")]
    Argument(String),

    #[error("cannot estimate threshold for category {category}: {reason}")]
    ThresholdEstimation { category: usize, reason: String },

    #[error("dimension error in {op}: expected {expected}, got {got}")]
    Dimension {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("kernel error: {0}")]
    Kernel(String),

    #[error("optimizer error: non-finite gradient in parameter `{param}`")]
    Optimizer { param: String },

    #[error("ingestion error{}: {msg}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Ingestion { line: Option<usize>, msg: String },

    #[error("dataset is empty")]
    EmptyBundle,

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize, last_good: Box<Checkpoint> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl GnolrError {
    pub(crate) fn dim(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        GnolrError::Dimension {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    /// True for errors caused by bad input or configuration rather than a
    /// runtime failure. The CLI maps these to exit code 2.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            GnolrError::Schema(_)
                | GnolrError::Argument(_)
                | GnolrError::Ingestion { .. }
                | GnolrError::EmptyBundle
                | GnolrError::Config(_)
                | GnolrError::ThresholdEstimation { .. }
        )
    }
}
