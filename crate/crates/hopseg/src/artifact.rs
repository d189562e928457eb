//! On-disk artifact helpers: atomic writes and the header+arrays blob
//! layout shared by all checkpoints.
//!
//! A blob is one JSON header line (terminated by `\n`) followed by the
//! concatenation of row-major `f64` arrays in little-endian byte order.
//! Readers know the array lengths from the header, so the payload is a
//! single flat buffer here.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Write via a temp file in the same directory, then rename into place,
/// so readers never observe a partially written artifact.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Parameter(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp).map_err(Error::io(&tmp))?;
        f.write_all(bytes).map_err(Error::io(&tmp))?;
        f.sync_all().map_err(Error::io(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(Error::io(path))
}

pub fn write_blob(path: &Path, header: &serde_json::Value, arrays: &[&[f64]]) -> Result<()> {
    let mut bytes = serde_json::to_vec(header)
        .map_err(|e| Error::Format(format!("encoding checkpoint header: {e}")))?;
    bytes.push(b'\n');
    for arr in arrays {
        bytes.reserve(arr.len() * 8);
        for v in arr.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    atomic_write(path, &bytes)
}

/// Read back `(header, flat payload)`. Callers split the payload by the
/// array lengths implied by the header.
pub fn read_blob(path: &Path) -> Result<(serde_json::Value, Vec<f64>)> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format(format!("{}: missing header line", path.display())))?;
    let header: serde_json::Value = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| Error::Format(format!("{}: bad header: {e}", path.display())))?;
    let payload = &bytes[newline + 1..];
    if payload.len() % 8 != 0 {
        return Err(Error::Format(format!(
            "{}: payload length {} is not a multiple of 8",
            path.display(),
            payload.len()
        )));
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok((header, values))
}

/// Split a flat payload into arrays of the given lengths.
pub fn split_payload(payload: &[f64], lens: &[usize]) -> Result<Vec<Vec<f64>>> {
    let total: usize = lens.iter().sum();
    if payload.len() != total {
        return Err(Error::Format(format!(
            "checkpoint payload has {} values, expected {total}",
            payload.len()
        )));
    }
    let mut out = Vec::with_capacity(lens.len());
    let mut at = 0;
    for &len in lens {
        out.push(payload[at..at + len].to_vec());
        at += len;
    }
    Ok(out)
}
