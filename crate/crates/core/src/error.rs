use thiserror::Error;

#[derive(Debug, Error)]
pub enum DloError {
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("degenerate geometry: {0}")]
    Degenerate(String),
    #[error("empty point cloud")]
    EmptyCloud,
    #[error("frame unusable: {0}")]
    Unusable(String),
    #[error("config: {0}")]
    Config(String),
    #[error("format: {0}")]
    Format(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Num(#[from] numkit::NumError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DloError>;
