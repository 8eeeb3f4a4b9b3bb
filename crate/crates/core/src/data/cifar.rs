use std::path::Path;

use super::{DatasetSplit, SplitTag};
use crate::error::{Error, Result};

/// One label byte followed by 32×32 pixels for each of R, G, B (row-major).
pub const CIFAR10_RECORD_BYTES: usize = 1 + 3 * 32 * 32;

const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
const TEST_FILE: &str = "test_batch.bin";

/// Parses CIFAR-10 binary records into `[0, 1]` pixels and labels.
/// `path` is only used in error messages.
pub fn parse_cifar10(bytes: &[u8], path: &Path) -> Result<(Vec<f32>, Vec<usize>)> {
    let rem = bytes.len() % CIFAR10_RECORD_BYTES;
    if rem != 0 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: bytes.len() - rem,
            message: format!(
                "truncated record: {rem} trailing bytes, records are {CIFAR10_RECORD_BYTES} bytes"
            ),
        });
    }
    let n = bytes.len() / CIFAR10_RECORD_BYTES;
    let mut images = Vec::with_capacity(n * (CIFAR10_RECORD_BYTES - 1));
    let mut labels = Vec::with_capacity(n);
    for (r, rec) in bytes.chunks_exact(CIFAR10_RECORD_BYTES).enumerate() {
        if rec[0] > 9 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                offset: r * CIFAR10_RECORD_BYTES,
                message: format!("label {} outside 0..=9", rec[0]),
            });
        }
        labels.push(rec[0] as usize);
        images.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((images, labels))
}

fn load_files(dir: &Path, files: &[&str], tag: SplitTag) -> Result<DatasetSplit> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        let path = dir.join(f);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let (i, l) = parse_cifar10(&bytes, &path)?;
        images.extend(i);
        labels.extend(l);
    }
    DatasetSplit::new(images, labels, [3, 32, 32], 10, tag)
}

/// Loads the canonical CIFAR-10 binary distribution (`data_batch_{1..5}.bin`
/// and `test_batch.bin`) from `dir`.
pub fn load_cifar10(dir: &Path) -> Result<(DatasetSplit, DatasetSplit)> {
    let train = load_files(dir, &TRAIN_FILES, SplitTag::Train)?;
    let test = load_files(dir, &[TEST_FILE], SplitTag::Test)?;
    Ok((train, test))
}
