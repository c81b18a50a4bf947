use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    ShapeMismatch {
        context: String,
        expected: String,
        found: String,
    },

    #[error("non-finite value in {context} at row {row}, col {col}")]
    NonFinite {
        context: String,
        row: usize,
        col: usize,
    },

    #[error("non-finite gradient for parameter {name}")]
    NonFiniteGradient { name: String },

    #[error("non-finite loss in {context} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        context: String,
        epoch: usize,
        batch: usize,
    },

    #[error("unsupported critic architecture: {0}")]
    UnsupportedCritic(String),

    #[error("class {class} not present in {context}")]
    UnknownClass { class: u32, context: String },

    #[error("empty batch in {context}")]
    EmptyBatch { context: String },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("missing artifact {path}: {hint}")]
    MissingArtifact { path: String, hint: String },

    #[error("{path}: bad magic bytes {found} (expected {expected})")]
    BadMagic {
        path: String,
        expected: String,
        found: String,
    },

    #[error("{path}: unsupported format version {found} (supported: {supported})")]
    BadVersion {
        path: String,
        supported: u32,
        found: u32,
    },

    #[error("{path}: malformed payload (expected {expected}, found {found})")]
    BadPayload {
        path: String,
        expected: String,
        found: String,
    },

    #[error("{path}: malformed {what} at line {line}: {detail}")]
    MalformedRecord {
        path: String,
        what: String,
        line: u64,
        detail: String,
    },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn csv(path: impl Into<String>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }

    /// Stable tag for the machine-readable error line the CLI prints.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::NonFinite { .. } => "non_finite",
            Error::NonFiniteGradient { .. } => "non_finite_gradient",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::UnsupportedCritic(_) => "unsupported_critic",
            Error::UnknownClass { .. } => "unknown_class",
            Error::EmptyBatch { .. } => "empty_batch",
            Error::InvalidDataset(_) => "invalid_dataset",
            Error::InvalidConfig(_) => "invalid_config",
            Error::MissingArtifact { .. } => "missing_artifact",
            Error::BadMagic { .. } => "bad_magic",
            Error::BadVersion { .. } => "bad_version",
            Error::BadPayload { .. } => "bad_payload",
            Error::MalformedRecord { .. } => "malformed_record",
            Error::Diverged(_) => "diverged",
            Error::Io { .. } => "io",
            Error::Csv { .. } => "csv",
            Error::Json { .. } => "json",
        }
    }

    /// True for errors that mean the run was set up wrong (bad config,
    /// missing inputs) as opposed to a failure while computing.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::InvalidConfig(_)
                | Error::MissingArtifact { .. }
                | Error::InvalidDataset(_)
                | Error::UnsupportedCritic(_)
        )
    }
}
