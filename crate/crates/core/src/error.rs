use std::io;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("coding error in slice {slice} ({phase}) at element {index}: {msg}")]
    Coding { slice: usize, phase: &'static str, index: usize, msg: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("refinement diverged at step {step}: loss {loss} > 10x initial {initial}")]
    Diverged { step: usize, loss: f64, initial: f64 },
    #[error("image error: {0}")]
    Image(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl From<lic_autodiff::Error> for Error {
    fn from(e: lic_autodiff::Error) -> Self {
        match e {
            lic_autodiff::Error::Shape(s) => Error::Shape(s),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
