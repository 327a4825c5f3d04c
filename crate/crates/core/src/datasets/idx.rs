//! Big-endian IDX files in the MNIST layout: a four-byte magic number
//! (`0x00000803` for `u8` images, `0x00000801` for `u8` labels), one `u32`
//! per dimension, then the raw bytes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.rows * self.cols;
        &self.pixels[i * n..(i + 1) * n]
    }
}

fn idx_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Idx {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

fn read_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| idx_err(path, format!("truncated header at byte {offset}")))
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let magic = read_u32(bytes, 0, path)?;
    if magic != expected {
        return Err(idx_err(
            path,
            format!("bad magic number {magic:#010x}, expected {expected:#010x}"),
        ));
    }
    Ok(())
}

pub fn parse_images(bytes: &[u8], path: &Path) -> Result<IdxImages> {
    check_magic(bytes, IMAGES_MAGIC, path)?;
    let count = read_u32(bytes, 4, path)? as usize;
    let rows = read_u32(bytes, 8, path)? as usize;
    let cols = read_u32(bytes, 12, path)? as usize;
    let expected = count * rows * cols;
    let body = &bytes[16..];
    if body.len() < expected {
        return Err(idx_err(
            path,
            format!("truncated body: {} of {expected} pixel bytes", body.len()),
        ));
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: body[..expected].to_vec(),
    })
}

pub fn parse_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    check_magic(bytes, LABELS_MAGIC, path)?;
    let count = read_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(idx_err(
            path,
            format!("truncated body: {} of {count} label bytes", body.len()),
        ));
    }
    Ok(body[..count].to_vec())
}

pub fn read_images(path: &Path) -> Result<IdxImages> {
    let bytes = fs::read(path).map_err(|e| idx_err(path, e.to_string()))?;
    parse_images(&bytes, path)
}

pub fn read_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| idx_err(path, e.to_string()))?;
    parse_labels(&bytes, path)
}

pub fn encode_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let count = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, count as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

pub fn write_images(path: &Path, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    Ok(fs::write(path, encode_images(rows, cols, pixels))?)
}

pub fn write_labels(path: &Path, labels: &[u8]) -> Result<()> {
    Ok(fs::write(path, encode_labels(labels))?)
}
