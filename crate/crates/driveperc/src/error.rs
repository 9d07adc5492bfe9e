use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("tensor error: {0}")]
    Candle(#[from] candle_core::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("infeasible matching: {0}")]
    Infeasible(String),

    #[error("non-finite loss in component `{component}`: training aborted")]
    TrainingAbort { component: String },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("annotation parse error at line {line}: {msg}")]
    Annotation { line: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid_input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
