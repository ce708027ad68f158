use thiserror::Error;

/// Crate-wide error type. Variants map onto the CLI exit-code classes:
/// usage errors are handled by the argument parser, data problems
/// (dimension/domain/geometry/config/contract/format/io) exit 3, non-finite
/// numerics exit 4, and checkpoint version or precision mismatches exit 5.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("checkpoint version mismatch: found magic {found:?}")]
    VersionMismatch { found: String },

    #[error("precision mismatch: checkpoint stores {stored}-byte floats, build expects {expected}-byte")]
    PrecisionMismatch { stored: u8, expected: u8 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
