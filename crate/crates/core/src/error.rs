//! Error types for the annotation, anchor, assignment, and pyramid modules.

use thiserror::Error;

/// Failures while parsing or validating an annotation file.
#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("annotation file is not valid UTF-8: {0}")]
    Utf8(#[from] std::str::Utf8Error),

    /// Syntactically broken JSON. `offset` is the byte position in the input.
    #[error("malformed JSON at byte {offset} (line {line}, column {column}): {message}")]
    Parse {
        offset: usize,
        line: usize,
        column: usize,
        message: String,
    },

    /// Well-formed JSON that does not match the annotation schema.
    #[error("annotation schema violation: {message}")]
    Schema { message: String },

    #[error("image {image_id} has non-positive dimensions {width}x{height}")]
    BadImageDims {
        image_id: i64,
        width: i64,
        height: i64,
    },

    #[error("duplicate image id {0}")]
    DuplicateImageId(i64),

    #[error("duplicate annotation id {0}")]
    DuplicateAnnotationId(i64),

    #[error("annotation {annotation_id} has a degenerate bbox (w={w}, h={h})")]
    BadBBox { annotation_id: i64, w: f64, h: f64 },

    #[error("annotation {annotation_id} references missing image {image_id}")]
    MissingImage { annotation_id: i64, image_id: i64 },
}

/// Invalid anchor configuration, image geometry, or sweep range.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("anchor config: {0}")]
    Invalid(String),

    #[error("anchor config is not valid JSON: {0}")]
    Json(String),

    #[error("anchor config is not valid TOML: {0}")]
    Toml(String),

    #[error("image dimensions must be positive, got {width}x{height}")]
    BadImageSize { width: u32, height: u32 },

    #[error("sweep range: {0}")]
    SweepRange(String),
}

/// Failures in IoU computation and ground-truth/anchor matching.
#[derive(Debug, Error)]
pub enum AssignError {
    #[error("box has non-positive area (w={w}, h={h})")]
    DegenerateBox { w: f64, h: f64 },

    #[error("IoU matrix has no anchor columns")]
    EmptyMatrix,

    /// A match refers to an anchor the pyramid does not contain. This means
    /// the match result and the pyramid come from different pipelines.
    #[error("anchor index {index} out of range for pyramid with {total} anchors")]
    AnchorIndexOutOfRange { index: usize, total: usize },

    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// Shape and domain failures in the micro feature pyramid.
#[derive(Debug, Error)]
pub enum FpnError {
    #[error(
        "level {level}: expected {expected_channels}x{expected_height}x{expected_width}, \
         got {got_channels}x{got_height}x{got_width}"
    )]
    ShapeMismatch {
        level: u32,
        expected_channels: usize,
        expected_height: usize,
        expected_width: usize,
        got_channels: usize,
        got_height: usize,
        got_width: usize,
    },

    #[error("base resolution {height}x{width} must be positive and divisible by 8")]
    BadBaseResolution { height: usize, width: usize },

    #[error("channel counts must be at least 1")]
    BadChannels,

    #[error("sigma must be positive and finite, got {0}")]
    BadSigma(f64),

    #[error("loss spec must include at least one pyramid level")]
    EmptyLoss,
}
