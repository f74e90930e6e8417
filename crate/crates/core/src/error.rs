//! Error type shared across the workspace.

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Caller handed us something that violates a precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A numeric routine produced NaN/inf mid-computation.
    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    /// Training diverged; epoch/step locate the offending update.
    #[error("training failure at epoch {epoch}, step {step}: {message}")]
    TrainingFailure {
        epoch: usize,
        step: usize,
        message: String,
    },

    /// A projection collapsed to the zero vector and cannot be normalized.
    #[error("degenerate embedding: projection output has zero norm")]
    DegenerateEmbedding,

    /// Remote captioning gave up after exhausting retries.
    #[error("captioning failed after {attempts} attempt(s): {message}")]
    CaptioningFailed { attempts: u32, message: String },

    /// A response arrived but did not satisfy the wire contract.
    #[error("response validation failed: {0}")]
    ValidationFailed(String),

    /// An index build referenced a window that is not loaded.
    #[error("missing window '{window_id}' referenced by segment ({a}, {b})")]
    MissingWindow {
        window_id: String,
        a: usize,
        b: usize,
    },

    /// A caption has no precomputed embedding in the lookup table.
    #[error("no precomputed embedding for caption: {0:?}")]
    MissingEmbedding(String),

    /// The judgment grid has holes; each entry is a (query_id, rank) gap.
    #[error("incomplete judgments, missing {} cell(s): {}", .gaps.len(), format_gaps(.gaps))]
    IncompleteJudgments { gaps: Vec<(String, usize)> },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed record in {path}: {message}")]
    MalformedFile { path: String, message: String },

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    /// Invalid input and config problems are the caller's fault; everything
    /// else is a runtime failure. The CLI maps this to exit codes 1 and 2.
    pub fn is_invalid_input(&self) -> bool {
        matches!(self, Error::InvalidInput(_) | Error::Config(_))
    }

    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

fn format_gaps(gaps: &[(String, usize)]) -> String {
    const SHOWN: usize = 8;
    let mut s = gaps
        .iter()
        .take(SHOWN)
        .map(|(q, r)| format!("({q}, rank {r})"))
        .collect::<Vec<_>>()
        .join(", ");
    if gaps.len() > SHOWN {
        s.push_str(", ...");
    }
    s
}
