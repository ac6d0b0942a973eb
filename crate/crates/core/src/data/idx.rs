//! IDX (MNIST) reader and writer, optionally gzip-compressed.

use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use super::{DataError, DatasetMeta, SequenceDataset};
use crate::tensor::Tensor3;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
const MAX_ITEMS: usize = 10_000_000;

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    let raw = std::fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    maybe_gunzip(raw)
}

/// Inflates gzip data (detected by its magic), passing raw IDX through.
pub fn maybe_gunzip(raw: Vec<u8>) -> Result<Vec<u8>, DataError> {
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| DataError::TruncatedFile(format!("gzip stream: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32, DataError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| DataError::TruncatedFile(format!("{what} header")))
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<(), DataError> {
    let found = be_u32(bytes, 0, "magic")?;
    if found != expected {
        return Err(DataError::BadMagic { expected, found });
    }
    Ok(())
}

/// Returns `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>), DataError> {
    check_magic(bytes, IMAGES_MAGIC)?;
    let count = be_u32(bytes, 4, "images")? as usize;
    let rows = be_u32(bytes, 8, "images")? as usize;
    let cols = be_u32(bytes, 12, "images")? as usize;
    if count > MAX_ITEMS || rows > 4096 || cols > 4096 {
        return Err(DataError::Invalid(format!("implausible image header {count}x{rows}x{cols}")));
    }
    let need = count * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(DataError::TruncatedFile(format!("image data: {} of {need} bytes", body.len())));
    }
    Ok((count, rows, cols, body[..need].to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>, DataError> {
    check_magic(bytes, LABELS_MAGIC)?;
    let count = be_u32(bytes, 4, "labels")? as usize;
    if count > MAX_ITEMS {
        return Err(DataError::Invalid(format!("implausible label count {count}")));
    }
    let body = &bytes[8..];
    if body.len() < count {
        return Err(DataError::TruncatedFile(format!("label data: {} of {count} bytes", body.len())));
    }
    Ok(body[..count].to_vec())
}

pub fn write_idx_images(count: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), count * rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, count as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn write_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Builds a dataset from decoded IDX bytes: pixels scaled to `[0, 1]`, row-major, one feature.
pub fn mnist_from_bytes(images: &[u8], labels: &[u8]) -> Result<SequenceDataset, DataError> {
    let (count, rows, cols, pixels) = parse_idx_images(images)?;
    let labels = parse_idx_labels(labels)?;
    if labels.len() != count {
        return Err(DataError::CountMismatch {
            images: count,
            labels: labels.len(),
        });
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 9) {
        return Err(DataError::Invalid(format!("label {bad} outside 0..10")));
    }
    let len = rows * cols;
    let data = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let ds = SequenceDataset {
        inputs: Tensor3::from_vec(count, len, 1, data),
        labels: labels.iter().map(|&l| i64::from(l)).collect(),
        label_len: 1,
        ids: (0..count as u64).collect(),
        meta: DatasetMeta {
            name: "mnist".into(),
            num_classes: 10,
            permutation_seed: None,
            permutation: None,
            params: serde_json::json!({ "rows": rows, "cols": cols }),
        },
    };
    ds.validate()?;
    Ok(ds)
}

pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<SequenceDataset, DataError> {
    let images = read_file(images_path)?;
    let labels = read_file(labels_path)?;
    mnist_from_bytes(&images, &labels)
}
