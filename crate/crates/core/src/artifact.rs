//! Small helpers shared by every on-disk artifact.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Version stamped into every manifest, checkpoint and index header.
pub const FORMAT_VERSION: u32 = 1;

/// A JSON payload stamped with the format version and the run config that
/// produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stamped<T> {
    pub format_version: u32,
    #[serde(default)]
    pub run_config: serde_json::Value,
    pub data: T,
}

impl<T> Stamped<T> {
    pub fn new(data: T, run_config: serde_json::Value) -> Self {
        Stamped {
            format_version: FORMAT_VERSION,
            run_config,
            data,
        }
    }
}

/// Writes `data` wrapped in a [`Stamped`] envelope.
pub fn write_stamped<T: Serialize>(path: impl AsRef<Path>, data: T, run_config: &serde_json::Value) -> Result<()> {
    write_json(path, &Stamped::new(data, run_config.clone()))
}

/// Reads a [`Stamped`] envelope, rejecting unknown format versions.
pub fn read_stamped<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Stamped<T>> {
    let path = path.as_ref();
    let s: Stamped<T> = read_json(path)?;
    if s.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "{} has format version {}, expected {FORMAT_VERSION}",
            path.display(),
            s.format_version
        )));
    }
    Ok(s)
}

pub fn write_json<T: Serialize + ?Sized>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}
