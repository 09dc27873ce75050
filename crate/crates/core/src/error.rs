use thiserror::Error;

/// Errors surfaced by the library. Callers that need an exit-code policy
/// should treat [`Error::NonFiniteLoss`] as a numerical failure and
/// everything else as a usage/configuration problem.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("domain error in {op}: {detail}")]
    DomainError { op: &'static str, detail: String },

    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },

    #[error("index {index} out of range for table with {len} rows")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("loss is not finite: {value}")]
    NonFiniteLoss { value: f64 },

    #[error("parameter `{name}` has no gradient")]
    MissingGradient { name: String },

    #[error("attention over an empty key/value sequence")]
    ZeroLengthSequence,

    #[error("mask strategy mismatch: {detail}")]
    StrategyMismatch { detail: String },

    #[error("gamma[{index}] = {value} outside [0, 1]")]
    GammaOutOfRange { index: usize, value: f64 },

    #[error("attribute {index} is degenerate ({detail}); mA is undefined")]
    DegenerateAttribute { index: usize, detail: String },

    #[error("latent factor count {k} exceeds enumeration cap {cap}")]
    KTooLarge { k: usize, cap: usize },

    #[error("bad image shape: {detail}")]
    BadImageShape { detail: String },

    #[error("dataset manifest error: {detail}")]
    ManifestError { detail: String },

    #[error("tensor file `{path}`: {detail}")]
    TensorFormatError { path: String, detail: String },

    #[error("label file row {row}, column {column}: {detail}")]
    LabelDomainError { row: usize, column: usize, detail: String },

    #[error("checkpoint incompatible: {detail}")]
    IncompatibleCheckpoint { detail: String },

    #[error("sample {id} not found in dataset")]
    SampleNotFound { id: u64 },

    #[error("config error: {detail}")]
    ConfigError { detail: String },

    #[error("io error on `{path}`: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for failures of the numerics (exit code 3 territory) rather than
    /// of configuration or input files.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFiniteLoss { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
