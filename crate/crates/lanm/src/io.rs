//! On-disk formats: the LANM binary array file and JSON helpers.
//!
//! Every numeric array (dataset columns, model weights, optimizer moments)
//! is stored in one self-describing binary file:
//!
//! ```text
//! offset  size  field
//! 0       4     magic, the ASCII bytes "LANM"
//! 4       4     format version, u32 little-endian (currently 1)
//! 8       4     rows, u32 little-endian
//! 12      4     cols, u32 little-endian
//! 16      8*r*c payload, f64 little-endian, row-major
//! ```
//!
//! Writes are whole-file and reads validate the header and exact length, so
//! a truncated or foreign file is rejected with a precise message rather
//! than silently producing garbage.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"LANM";
pub const FORMAT_VERSION: u32 = 1;

const HEADER_LEN: usize = 16;

/// Serialize a tensor to the binary array format.
///
/// The tensor must be finite: the format is shared by datasets and
/// checkpoints, both of which promise finite contents.
pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    if !t.is_finite() {
        return Err(Error::NonFinite(format!(
            "refusing to write non-finite tensor to {}",
            path.display()
        )));
    }
    if t.rows() > u32::MAX as usize || t.cols() > u32::MAX as usize {
        return Err(Error::Dimension(format!(
            "tensor {}x{} exceeds the format's u32 dimensions",
            t.rows(),
            t.cols()
        )));
    }
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * t.len());
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(t.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(t.cols() as u32).to_le_bytes());
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Read a tensor back, validating magic, version, dimensions, length, and
/// finiteness.
pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    if bytes.len() < HEADER_LEN {
        return Err(fail(format!(
            "file is {} bytes, shorter than the 16-byte header",
            bytes.len()
        )));
    }
    if bytes[..4] != MAGIC {
        return Err(fail(format!("bad magic {:?}", &bytes[..4])));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let version = word(4);
    if version != FORMAT_VERSION {
        return Err(fail(format!(
            "format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    let rows = word(8) as usize;
    let cols = word(12) as usize;
    let expect = HEADER_LEN as u64 + 8 * rows as u64 * cols as u64;
    if bytes.len() as u64 != expect {
        return Err(fail(format!(
            "payload for {rows}x{cols} needs {expect} bytes, file has {}",
            bytes.len()
        )));
    }
    let data: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(rows, cols, data).map_err(|e| fail(e.to_string()))
}

/// Write a value as pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Read and deserialize a JSON file.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}
