/// Error type shared by every module in the crate.
///
/// The CLI maps these onto process exit codes, so the variants are grouped by
/// *kind of failure* rather than by module: bad caller input (`Config`,
/// `Dimension`, `Usage`), runtime numeric trouble (`Numeric`), and missing or
/// malformed artifacts on disk (`MissingArtifact`, `Format`, `Io`, `Json`).
#[derive(Debug, thiserror::Error)]
pub enum DsrError {
    /// Invalid configuration value (bad hyper-parameter, inconsistent sizes picked by the user).
    #[error("config error: {0}")]
    Config(String),

    /// Tensor or model shapes do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// API misuse detected at runtime (e.g. backward from a non-scalar node).
    #[error("usage error: {0}")]
    Usage(String),

    /// Non-finite values or numerically impossible requests.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A required file or dataset entry does not exist.
    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    /// A file exists but its contents are not what the format promises.
    #[error("format error: {0}")]
    Format(String),

    /// Geometry points left uncovered by every patch during reconstruction.
    #[error("coverage error: {count} geometry points not covered by any patch (first: index {first_index} at {first_point:?})")]
    Coverage {
        count: usize,
        first_index: usize,
        first_point: [f64; 3],
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DsrError>;
