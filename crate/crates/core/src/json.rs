use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum JsonError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid JSON in {origin}: {source}")]
    Parse {
        origin: String,
        #[source]
        source: serde_json::Error,
    },
}

pub fn from_json_str<T: DeserializeOwned>(text: &str, origin: &str) -> Result<T, JsonError> {
    serde_json::from_str(text).map_err(|source| JsonError::Parse {
        origin: origin.to_string(),
        source,
    })
}

pub fn from_json_file<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T, JsonError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| JsonError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_json_str(&text, &path.display().to_string())
}

pub fn to_json_pretty<T: Serialize>(value: &T) -> String {
    // Only plain data types pass through here; serialization cannot fail.
    serde_json::to_string_pretty(value).expect("serializable value")
}
