use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("halfway vector undefined for antipodal directions")]
    DegeneratePair,

    #[error("value {value} below allowed minimum {min} for {what}")]
    Domain { what: &'static str, value: f64, min: f64 },

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("light position coincides with the shading point")]
    CoincidentPoint,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error at {pointer}: {message}")]
    Config { pointer: String, message: String },

    #[error("non-finite {what} in parameter segment `{segment}`")]
    NonFinite { what: &'static str, segment: String },

    #[error("metric mask selects no texels")]
    EmptyMask,

    #[error("malformed {format} data: {message}")]
    Format { format: &'static str, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
