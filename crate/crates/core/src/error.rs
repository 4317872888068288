use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] io::Error),

    /// Stage layout does not partition the latent layers.
    #[error("invalid stage layout: {0}")]
    Layout(String),

    /// Malformed or truncated binary file.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },

    #[error("unsupported {what} version {found} (expected {expected})")]
    UnsupportedVersion {
        what: &'static str,
        found: u16,
        expected: u16,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Non-finite value inside a coupling layer.
    #[error("non-finite value in coupling layer {layer}")]
    Numeric { layer: usize },

    /// Symbol could not be coded under its table.
    #[error("coding error at symbol {position}: {msg}")]
    Coding { position: usize, msg: String },

    #[error("decode error at symbol {position}: {msg}")]
    Decode { position: usize, msg: String },

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("model digest mismatch for slot {slot}")]
    DigestMismatch { slot: usize },

    /// Training produced a non-finite or exploding loss.
    #[error("training diverged at step {step}: {msg}")]
    Divergence { step: usize, msg: String },

    /// Support of a table misses bins that carry probability mass.
    #[error("support excludes bins with nonzero mass: {missing:?}")]
    Support { missing: Vec<i64> },

    #[error("value {0} does not fit in a 32-bit symbol")]
    Overflow(f64),

    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub(crate) fn format(offset: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }
}
