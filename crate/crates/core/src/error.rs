//! Error type shared by every stage of the codec.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GsError {
    /// PLY ingest/export failures (malformed header, missing or non-finite
    /// properties). The message names the offending property where possible.
    #[error("ply: {0}")]
    Ply(String),

    /// Camera JSON problems: unreadable file, bad schema, non-orthonormal
    /// rotation, non-positive focal length.
    #[error("cameras: {0}")]
    Camera(String),

    /// Rejected configuration; the message names the offending key.
    #[error("config: {0}")]
    Config(String),

    /// Container/bitstream decode failures: bad magic, truncation,
    /// out-of-range indices, checksum mismatch.
    #[error("decode: {0}")]
    Decode(String),

    /// Image IO or shape mismatches.
    #[error("image: {0}")]
    Image(String),

    /// A training loop hit a non-finite or diverging loss.
    #[error("training: {0}")]
    Train(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GsError>;
