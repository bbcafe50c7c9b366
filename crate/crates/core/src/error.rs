use std::path::PathBuf;

/// Errors raised by the model, data and harness layers.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),
    #[error("generation: {0}")]
    Generation(String),
    #[error("unknown word {0:?}")]
    UnknownWord(String),
    #[error("validation: {0}")]
    Validation(String),
    #[error("parse error in {file} at {path}: {msg}")]
    Parse { file: PathBuf, path: String, msg: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Tensor(#[from] dynprompt_autodiff::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}

/// Deserializes JSON, reporting the field path of the first schema violation.
pub(crate) fn parse_json<T: serde::de::DeserializeOwned>(file: &std::path::Path, text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
        file: file.to_path_buf(),
        path: e.path().to_string(),
        msg: e.inner().to_string(),
    })
}
