//! IDX (MNIST) image and label files.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::ndmath::Matrix;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("header ends at byte {}", bytes.len()),
        })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(())
}

/// Images scaled to `[0, 1]`, one flattened image per row; also returns `(rows, cols)`.
pub fn read_idx_images(path: &Path) -> Result<(Matrix, (usize, usize))> {
    let bytes = fs::read(path)?;
    check_magic(&bytes, IMAGES_MAGIC, path)?;
    let n = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let pixels = n * rows * cols;
    let body = &bytes[16..];
    if body.len() < pixels {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("expected {pixels} pixel bytes, found {}", body.len()),
        });
    }
    let data = body[..pixels].iter().map(|&b| b as f64 / 255.0).collect();
    Ok((Matrix::new(n, rows * cols, data)?, (rows, cols)))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = fs::read(path)?;
    check_magic(&bytes, LABELS_MAGIC, path)?;
    let n = be_u32(&bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            detail: format!("expected {n} label bytes, found {}", body.len()),
        });
    }
    Ok(body[..n].iter().map(|&b| b as usize).collect())
}

/// Reads a matching pair of IDX image and label files.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<(Matrix, Vec<usize>)> {
    let (images, _) = read_idx_images(images_path)?;
    let labels = read_idx_labels(labels_path)?;
    if images.rows() != labels.len() {
        return Err(Error::CountMismatch {
            images: images.rows(),
            labels: labels.len(),
        });
    }
    Ok((images, labels))
}

/// Writes images with values in `[0, 1]`, quantized to bytes.
pub fn write_idx_images(path: &Path, images: &Matrix, rows: usize, cols: usize) -> Result<()> {
    if rows * cols != images.cols() {
        return Err(Error::InvalidArgument(format!(
            "{rows}x{cols} images do not match {} columns",
            images.cols()
        )));
    }
    let mut buf = Vec::with_capacity(16 + images.len());
    buf.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for d in [images.rows(), rows, cols] {
        buf.extend_from_slice(&(d as u32).to_be_bytes());
    }
    buf.extend(images.as_slice().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, buf)?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + labels.len());
    buf.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    buf.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        let b = u8::try_from(l).map_err(|_| Error::InvalidArgument(format!("label {l} does not fit a byte")))?;
        buf.push(b);
    }
    fs::write(path, buf)?;
    Ok(())
}
