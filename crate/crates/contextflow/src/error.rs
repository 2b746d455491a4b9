use thiserror::Error;

/// Error variants shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Two inputs that must agree in shape do not.
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    /// A scalar parameter is outside its admissible range.
    #[error("invalid parameter {name}: {message} (got {value})")]
    InvalidParameter {
        name: &'static str,
        message: &'static str,
        value: f64,
    },

    /// A matrix or vector contains NaN or infinite entries.
    #[error("non-finite value in {context} at {location}")]
    NonFinite { context: String, location: String },

    /// A slice has no cells.
    #[error("slice has no cells")]
    EmptySlice,

    /// An operation requiring ligand-receptor features was called on a slice without them.
    #[error("slice carries no ligand-receptor features")]
    MissingLrFeatures,

    /// An operation requiring cell-type labels was called on unlabeled data.
    #[error("slice carries no cell-type labels")]
    MissingLabels,

    /// Index out of range.
    #[error("index {index} out of range for {context} of length {len}")]
    IndexOutOfRange {
        context: &'static str,
        index: usize,
        len: usize,
    },

    /// Marginal vectors must be strictly positive and sum to one.
    #[error("invalid marginal {which}: {message}")]
    InvalidMarginal {
        which: &'static str,
        message: String,
    },

    /// The Gibbs kernel degenerated (zero row/column or non-finite after stabilization).
    #[error("degenerate transport kernel: {0}")]
    DegenerateKernel(String),

    /// A row of the prior probability matrix underflowed to zero; the prior is too
    /// sharp at this scale and the caller should rescale the plausibility matrix.
    #[error("prior matrix row {row} underflowed to zero; rescale the plausibility matrix")]
    PriorTooSharp { row: usize },

    /// Exact solver invoked on a problem above its size cap.
    #[error("exact transport problem too large: {message}")]
    ProblemTooLarge { message: String },

    /// A transport plan with non-positive total mass cannot be sampled.
    #[error("degenerate transport plan: total mass {0} is not positive")]
    DegeneratePlan(f64),

    /// Training loss or a network activation stopped being finite.
    #[error("numerical divergence: {0}")]
    Diverged(String),

    /// Not enough usable data for the requested operation.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// Dataset or checkpoint file failed validation.
    #[error("{path}:{line}: {message}")]
    Schema {
        path: String,
        line: usize,
        message: String,
    },

    /// Checkpoint or manifest carries an unsupported format version.
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    /// Stored checksum does not match the payload.
    #[error("checksum mismatch: stored {stored}, computed {computed}")]
    ChecksumMismatch { stored: String, computed: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
