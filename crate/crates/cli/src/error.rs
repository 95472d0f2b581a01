use std::path::PathBuf;

/// Errors surfaced by the command-line layer.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] flowtie::Error),

    #[error("{path}:{line}: {reason}")]
    ConfigSyntax { path: PathBuf, line: usize, reason: String },

    #[error("config key {key:?}: {reason}")]
    ConfigValue { key: String, reason: String },

    #[error("{0}")]
    Usage(String),

    #[error("corpus {path}: {reason}")]
    Corpus { path: PathBuf, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable kebab-case category used as the machine-readable error prefix.
    pub fn code(&self) -> &'static str {
        use flowtie::Error as E;
        match self {
            CliError::Core(e) => match e {
                E::NonFinite(_) => "non-finite",
                E::GridMismatch(_) => "grid-mismatch",
                E::ShapeMismatch { .. } => "shape-mismatch",
                E::InvalidParameter(_) => "invalid-parameter",
                E::UnknownPreset { .. } => "unknown-preset",
                E::UnsupportedElement(_) => "unsupported-element",
                E::DenseLimit { .. } => "dense-limit",
                E::NegativeIntensity { .. } => "negative-intensity",
                E::DarkProbe(_) => "dark-probe",
                E::Diverged { .. } => "diverged",
                E::Format { .. } => "format",
                E::MissingTensor(_) => "missing-tensor",
                E::Io { .. } => "io",
                E::Json(_) => "json",
            },
            CliError::ConfigSyntax { .. } | CliError::ConfigValue { .. } => "config",
            CliError::Usage(_) => "usage",
            CliError::Corpus { .. } => "corpus",
            CliError::Io { .. } => "io",
            CliError::Json(_) => "json",
        }
    }
}
