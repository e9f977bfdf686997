use thiserror::Error;

#[derive(Debug, Error)]
pub enum TemsrError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("training error in {term}: {detail}")]
    Training { term: String, detail: String },
    #[error("state error: {0}")]
    State(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TemsrError {
    pub fn training(term: impl Into<String>, detail: impl Into<String>) -> Self {
        TemsrError::Training {
            term: term.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, TemsrError>;
