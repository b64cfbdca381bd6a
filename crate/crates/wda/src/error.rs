//! Crate-wide error type.

/// Anything that can go wrong while loading data, parsing configs, running
/// training, or writing results.
#[derive(Debug, thiserror::Error)]
pub enum WdaError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
    #[error("tiff: {0}")]
    Tiff(#[from] tiff::TiffError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("shape: {0}")]
    Shape(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("invalid input: {0}")]
    Invalid(String),
}

impl From<toml::de::Error> for WdaError {
    fn from(e: toml::de::Error) -> Self {
        WdaError::Config(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, WdaError>;
