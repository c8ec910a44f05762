use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("tensor shape {shape:?} implies {expected} elements but data holds {got}")]
    BadTensor {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value produced in {0}")]
    NonFinite(&'static str),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("video too short: {frames} frames, sampler needs at least {required}")]
    VideoTooShort { frames: usize, required: usize },

    #[error("segment of {len} frames too short for {needed} (strategy {strategy})")]
    SegmentTooShort {
        len: usize,
        needed: usize,
        strategy: &'static str,
    },

    #[error("expected a 2-D matrix, got shape {0:?}")]
    NotAMatrix(Vec<usize>),

    #[error("index bits {0} outside supported range 1..=16")]
    BadIndexBits(u8),

    #[error("corrupted sparse stream: {0}")]
    CorruptStream(String),

    #[error("empty symbol histogram")]
    EmptyHistogram,

    #[error("symbol {0} not present in Huffman table")]
    UnknownSymbol(u32),

    #[error("invalid Huffman bitstream: {0}")]
    BadBitstream(String),

    #[error("container corrupt: {0}")]
    BadContainer(String),

    #[error("invalid config: {0}")]
    BadConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
