//! Line-delimited JSON reading and writing with line-numbered diagnostics.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Parses one value per non-blank line. A malformed line is an error unless
/// `lenient` is set, in which case it is logged and skipped.
pub fn read_jsonl<T: DeserializeOwned>(reader: impl Read, origin: &str, lenient: bool) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(v) => out.push(v),
            Err(e) => {
                let err = Error::MalformedLine {
                    path: origin.to_owned(),
                    line: i + 1,
                    detail: e.to_string(),
                };
                if !lenient {
                    return Err(err);
                }
                tracing::warn!("skipping {err}");
            }
        }
    }
    Ok(out)
}

pub fn read_jsonl_file<T: DeserializeOwned>(path: &Path, lenient: bool) -> Result<Vec<T>> {
    let file = File::open(path)?;
    read_jsonl(file, &path.display().to_string(), lenient)
}

pub fn write_jsonl<'a, T: Serialize + 'a>(mut out: impl Write, items: impl IntoIterator<Item = &'a T>) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_jsonl_file<'a, T: Serialize + 'a>(path: &Path, items: impl IntoIterator<Item = &'a T>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    write_jsonl(BufWriter::new(File::create(path)?), items)
}
