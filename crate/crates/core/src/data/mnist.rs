use std::path::Path;

use super::{DatasetSplit, SplitTag};
use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            offset,
            message: "header truncated".into(),
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

/// Parses an IDX3 image file: magic, count, rows, cols (big-endian u32),
/// then unsigned bytes. Returns `[0, 1]` pixels and `(count, rows, cols)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(Vec<f32>, [usize; 3])> {
    check_magic(bytes, IDX_IMAGES_MAGIC, path)?;
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let body = &bytes[16..];
    if body.len() != n * rows * cols {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: 16 + body.len().min(n * rows * cols),
            message: format!("expected {} pixel bytes, found {}", n * rows * cols, body.len()),
        });
    }
    Ok((body.iter().map(|&b| b as f32 / 255.0).collect(), [n, rows, cols]))
}

/// Parses an IDX1 label file.
pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    check_magic(bytes, IDX_LABELS_MAGIC, path)?;
    let n = be_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: 8 + body.len().min(n),
            message: format!("expected {n} label bytes, found {}", body.len()),
        });
    }
    Ok(body.iter().map(|&b| b as usize).collect())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn load_pair(dir: &Path, prefix: &str, tag: SplitTag) -> Result<DatasetSplit> {
    let ipath = dir.join(format!("{prefix}-images-idx3-ubyte"));
    let lpath = dir.join(format!("{prefix}-labels-idx1-ubyte"));
    let (images, [n, rows, cols]) = parse_idx_images(&read(&ipath)?, &ipath)?;
    let labels = parse_idx_labels(&read(&lpath)?, &lpath)?;
    if labels.len() != n {
        return Err(Error::Parse {
            path: lpath,
            offset: 4,
            message: format!("{} labels for {n} images", labels.len()),
        });
    }
    DatasetSplit::new(images, labels, [1, rows, cols], 10, tag)
}

/// Loads `train-*` and `t10k-*` IDX files (uncompressed) from `dir`.
pub fn load_mnist_idx(dir: &Path) -> Result<(DatasetSplit, DatasetSplit)> {
    Ok((
        load_pair(dir, "train", SplitTag::Train)?,
        load_pair(dir, "t10k", SplitTag::Test)?,
    ))
}
