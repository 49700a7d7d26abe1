//! Headerless little-endian array files.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn check_len(path: &Path, bytes: &[u8], expected_elems: usize, width: usize) -> Result<()> {
    let expected = expected_elems * width;
    if bytes.len() != expected {
        return Err(Error::ShapeMismatch(format!(
            "{}: expected {} bytes, found {}",
            path.display(),
            expected,
            bytes.len()
        )));
    }
    Ok(())
}

pub(crate) fn read_f32(path: &Path, expected_elems: usize) -> Result<Vec<f32>> {
    let bytes = read_bytes(path)?;
    check_len(path, &bytes, expected_elems, 4)?;
    Ok(decode_f32(&bytes))
}

pub(crate) fn decode_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

pub(crate) fn read_u32(path: &Path, expected_elems: usize) -> Result<Vec<u32>> {
    let bytes = read_bytes(path)?;
    check_len(path, &bytes, expected_elems, 4)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub(crate) fn read_u8(path: &Path, expected_elems: usize) -> Result<Vec<u8>> {
    let bytes = read_bytes(path)?;
    check_len(path, &bytes, expected_elems, 1)?;
    Ok(bytes)
}

pub(crate) fn encode_f32(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub(crate) fn encode_u32(values: &[u32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))
}

pub(crate) fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub(crate) fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}
