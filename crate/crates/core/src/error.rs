use thiserror::Error;

/// Errors shared by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Two parameter trees (or a tree and a model layout) disagree in shape.
    #[error("structural mismatch at layer `{layer}`: {detail}")]
    Structure { layer: String, detail: String },

    /// A configuration value or combination of values is invalid.
    #[error("invalid configuration `{field}`: {reason}")]
    Config { field: String, reason: String },

    /// A mathematical precondition was violated (e.g. q = 0 when computing
    /// sensitivity, or a Rényi order ≤ 1).
    #[error("domain error: {0}")]
    Domain(String),

    /// A computation produced a non-finite value where a finite one is required.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Noise calibration could not reach the target within the search bracket.
    #[error(
        "target epsilon {target} unreachable for noise multipliers in [{z_lo}, {z_hi}] \
         (epsilon ranges over [{eps_at_hi}, {eps_at_lo}])"
    )]
    Unreachable {
        target: f64,
        z_lo: f64,
        z_hi: f64,
        eps_at_lo: f64,
        eps_at_hi: f64,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed input {what}: {reason}")]
    Parse { what: String, reason: String },
}

impl Error {
    /// Process exit status for the command-line front end: 2 for bad
    /// configuration or input, 3 for numerical failures, 4 for I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Structure { .. } | Error::Domain(_) | Error::Parse { .. } => 2,
            Error::Numerical(_) | Error::Unreachable { .. } => 3,
            Error::Io { .. } => 4,
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn structure(layer: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Structure {
            layer: layer.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
