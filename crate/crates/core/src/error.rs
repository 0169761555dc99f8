use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape for {op}: {msg}")]
    Shape { op: &'static str, msg: String },

    #[error("unsupported shape for {op}: {msg}")]
    UnsupportedShape { op: &'static str, msg: String },

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// Position encodings (and the arch description) are fixed to one
    /// featuremap size; inference at any other size is rejected.
    #[error(
        "resolution dependency: input is {got_h}x{got_w} but the position encodings \
         were built for {want_h}x{want_w}; inference must use the same resolution"
    )]
    Resolution {
        want_h: usize,
        want_w: usize,
        got_h: usize,
        got_w: usize,
    },

    #[error("op {0} has no registered vector-Jacobian product")]
    UnsupportedOp(&'static str),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Shape { op, msg: msg.into() }
    }

    pub(crate) fn dims(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// True for errors caused by bad user input rather than internal faults.
    pub fn is_invalid_input(&self) -> bool {
        !matches!(self, Error::Io(_) | Error::NonFinite(_))
    }
}
