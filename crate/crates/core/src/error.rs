use thiserror::Error;

use crate::image::PixelRange;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("pixel range mismatch: {left:?} vs {right:?}")]
    RangeMismatch { left: PixelRange, right: PixelRange },

    #[error("value outside declared pixel range {range:?}: {value}")]
    OutOfRange { range: PixelRange, value: f32 },

    #[error("payload has {got} bits, model expects {expected}")]
    PayloadLength { expected: usize, got: usize },

    #[error("invalid payload: {0}")]
    Payload(String),

    #[error("image is {got_h}x{got_w}, model runs at {expected}x{expected}")]
    Resolution {
        expected: usize,
        got_h: usize,
        got_w: usize,
    },

    #[error("unknown transform `{0}`")]
    UnknownTransform(String),

    #[error("parameter `{name}` = {value} outside [{min}, {max}] for `{transform}`")]
    ParamRange {
        transform: String,
        name: String,
        value: f64,
        min: f64,
        max: f64,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite loss at iteration {iteration}: {breakdown}")]
    NonFinite { iteration: u64, breakdown: String },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Torch(#[from] tch::TchError),

    #[error(transparent)]
    Image(#[from] ::image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
