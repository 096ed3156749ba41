//! JSON-lines helpers shared by every batch file format.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{de::DeserializeOwned, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum JsonlError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

/// Parses one value per non-blank line.
pub fn read_jsonl<T: DeserializeOwned, R: BufRead>(source: R) -> Result<Vec<T>, JsonlError> {
    let mut out = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| JsonlError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(value);
    }
    Ok(out)
}

pub fn read_jsonl_path<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>, JsonlError> {
    let file = std::fs::File::open(path.as_ref()).map_err(|e| {
        std::io::Error::new(e.kind(), format!("{}: {e}", path.as_ref().display()))
    })?;
    read_jsonl(std::io::BufReader::new(file))
}

pub fn write_jsonl<'a, T: Serialize + 'a, W: Write>(
    mut sink: W,
    items: impl IntoIterator<Item = &'a T>,
) -> Result<(), JsonlError> {
    for item in items {
        let line = serde_json::to_string(item).map_err(|e| JsonlError::Parse {
            line: 0,
            message: e.to_string(),
        })?;
        sink.write_all(line.as_bytes())?;
        sink.write_all(b"\n")?;
    }
    sink.flush()?;
    Ok(())
}

pub fn write_jsonl_path<'a, T: Serialize + 'a>(
    path: impl AsRef<Path>,
    items: impl IntoIterator<Item = &'a T>,
) -> Result<(), JsonlError> {
    let file = std::fs::File::create(path)?;
    write_jsonl(std::io::BufWriter::new(file), items)
}
