use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box [{left}, {top}, {right}, {bottom}]: {reason}")]
    InvalidBox {
        left: f64,
        top: f64,
        right: f64,
        bottom: f64,
        reason: &'static str,
    },

    #[error("envelope of an empty box list")]
    EmptyEnvelope,

    #[error("malformed JSON at byte {offset} (line {line}, column {column}): {message}")]
    Json {
        offset: usize,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("unknown category id {0}")]
    UnknownCategoryId(u64),

    #[error("unknown category name {0:?}")]
    UnknownCategoryName(String),

    #[error("annotation {id}: {reason}")]
    BadAnnotation { id: u64, reason: String },

    #[error("annotation {id} references missing image {image_id}")]
    MissingImage { id: u64, image_id: String },

    #[error("image {id}: {reason}")]
    BadImage { id: String, reason: String },

    #[error("prediction entry {index}: {reason}")]
    BadPrediction { index: usize, reason: String },

    #[error("cell {index} on page {page}: {reason}")]
    BadCell {
        page: String,
        index: usize,
        reason: String,
    },

    #[error("scale entry for page {page}: {reason}")]
    BadScale { page: String, reason: String },

    #[error("non-positive dimension {width}x{height}")]
    BadDimensions { width: f64, height: f64 },

    #[error("detections span several pages ({0} and {1})")]
    MixedPages(String, String),

    #[error("{0}")]
    Config(String),

    #[error("expected {expected} fusion weights, got {actual}")]
    WeightCount { expected: usize, actual: usize },

    #[error("prediction on unknown page {0}")]
    UnknownPage(String),

    #[error("probability vector for page {page}: {reason}")]
    BadProbabilities { page: String, reason: String },

    #[error("value outside its domain: {0}")]
    OutOfDomain(String),

    #[error("history line {line}: {message}")]
    History { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn json(bytes: &[u8], err: serde_json::Error) -> Self {
        let (line, column) = (err.line(), err.column());
        Error::Json {
            offset: byte_offset(bytes, line, column),
            line,
            column,
            message: err.to_string(),
        }
    }
}

/// Converts serde_json's 1-based line/column into a byte offset.
fn byte_offset(bytes: &[u8], line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let mut start = 0;
    for _ in 1..line {
        match bytes[start..].iter().position(|&b| b == b'\n') {
            Some(p) => start += p + 1,
            None => return bytes.len(),
        }
    }
    (start + column.saturating_sub(1)).min(bytes.len())
}
