//! Little-endian `f64` blobs and JSON manifests shared by the on-disk
//! formats (demand tensors, graph sets, checkpoints).

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numcore::Matrix;

pub fn write_f64_le(path: &Path, values: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads exactly `expected` values; `name` identifies the tensor in errors.
pub fn read_f64_le(path: &Path, expected: usize, name: &str) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected * 8 {
        return Err(Error::format(
            path,
            format!(
                "tensor {name:?}: expected {expected} float64 values ({} bytes), found {} bytes",
                expected * 8,
                bytes.len()
            ),
        ));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

pub fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    write_f64_le(path, m.data())
}

pub fn read_matrix(path: &Path, rows: usize, cols: usize, name: &str) -> Result<Matrix> {
    Matrix::new(rows, cols, read_f64_le(path, rows * cols, name)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.bin");
        write_f64_le(&p, &[1.5, -0.0, f64::MAX]).unwrap();
        assert_eq!(read_f64_le(&p, 3, "w").unwrap(), vec![1.5, -0.0, f64::MAX]);
        let err = read_f64_le(&p, 4, "layer0.w").unwrap_err().to_string();
        assert!(err.contains("layer0.w"), "{err}");
    }
}
