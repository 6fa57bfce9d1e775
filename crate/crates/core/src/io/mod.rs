//! Bit-exact file formats and the run configuration schema.

mod codec;
mod config;
mod container;
mod tokens;

pub use codec::{
    model_from_container, model_to_container, read_model, read_stats, stats_from_container,
    stats_to_container, write_model, write_stats,
};
pub use config::{RunConfig, ToyShape};
pub use container::{Tensor, TensorContainer, TensorData, DTYPE_F32, DTYPE_F64};
pub use tokens::{read_tokens, write_tokens};

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic at offset {offset}: found {found:02x?}, expected {expected:?}")]
    BadMagic {
        path: PathBuf,
        offset: usize,
        found: Vec<u8>,
        expected: &'static str,
    },
    #[error("{path}: truncated at offset {offset} while reading {what}")]
    Truncated {
        path: PathBuf,
        offset: usize,
        what: &'static str,
    },
    #[error("{path}: {trailing} trailing bytes after offset {offset}")]
    TrailingBytes {
        path: PathBuf,
        offset: usize,
        trailing: usize,
    },
    #[error("{path}: duplicate tensor name '{name}'")]
    DuplicateName { path: PathBuf, name: String },
    #[error("{path}: tensor name at offset {offset} is not valid UTF-8")]
    BadName { path: PathBuf, offset: usize },
    #[error("{path}: unknown dtype {value} at offset {offset}")]
    UnknownDtype {
        path: PathBuf,
        offset: usize,
        value: u8,
    },
    #[error("tensor '{name}': payload of {got} values does not match dims {dims:?}")]
    ShapeMismatch {
        name: String,
        dims: Vec<u64>,
        got: usize,
    },
    #[error("missing tensor '{name}'")]
    MissingTensor { name: String },
    #[error("tensor '{name}': {reason}")]
    BadTensor { name: String, reason: String },
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn io_err(path: &std::path::Path, source: std::io::Error) -> IoError {
    IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes bytes atomically: temp file in the same directory, then rename.
pub fn write_atomic(path: &std::path::Path, bytes: &[u8]) -> Result<(), IoError> {
    let dir = path.parent().unwrap_or_else(|| std::path::Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| io_err(path, e))?;
    Ok(())
}
