use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("raster buffer of length {len} does not match {width}x{height}x{channels}")]
    BufferSize {
        width: usize,
        height: usize,
        channels: usize,
        len: usize,
    },
    #[error("raster dimensions must be at least 1x1, got {width}x{height}")]
    EmptyRaster { width: usize, height: usize },
    #[error("raster contains a non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("pyramid depth {levels} is too large for a {width}x{height} raster")]
    LevelCountTooLarge {
        levels: usize,
        width: usize,
        height: usize,
    },
    #[error("pyramid depth must be at least 1")]
    ZeroLevels,
    #[error("pyramid level {level} is {got:?}, expected {expected:?}")]
    MismatchedPyramid {
        level: usize,
        got: (usize, usize),
        expected: (usize, usize),
    },
    #[error("dimension mismatch: {0:?} vs {1:?}")]
    DimensionMismatch((usize, usize), (usize, usize)),
    #[error("operation needs at least one input")]
    EmptyInput,
    #[error("image {width}x{height} is smaller than the {window}x{window} window")]
    ImageTooSmall {
        width: usize,
        height: usize,
        window: usize,
    },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("forward cache does not match: {0}")]
    CacheMismatch(String),
    #[error("non-finite gradient at parameter {index}")]
    NonFiniteGradient { index: usize },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("pseudo-label drift {drift:.4} exceeded threshold {threshold} in consecutive rounds (round {round})")]
    DriftAbort {
        round: usize,
        drift: f64,
        threshold: f64,
    },
    #[error("missing or incomplete manifest: {0}")]
    MissingManifest(String),
    #[error("malformed exposure file or value name: {0}")]
    MalformedEvName(String),
    #[error("EV list for scene {scene} is not strictly increasing")]
    NonMonotoneEvList { scene: String },
    #[error("scene {0} has no ground truth")]
    MissingGroundTruth(String),
    #[error("image codec error for {path}: {source}")]
    Codec {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
