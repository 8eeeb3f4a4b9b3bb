//! Datasets, augmentation and seeded batching.
//!
//! Images are stored as `f32` in `[0, 1]`, channel-planar (`[C, H, W]` per
//! image). Attack budgets are expressed on the same scale.

mod augment;
mod batch;
mod cifar;
mod mnist;
mod synthetic;

pub use augment::{augment, flip_horizontal, AugmentConfig};
pub use batch::BatchIter;
pub use cifar::{load_cifar10, parse_cifar10, CIFAR10_RECORD_BYTES};
pub use mnist::{load_mnist_idx, parse_idx_images, parse_idx_labels, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use synthetic::{gaussian_blobs, BlobSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Test,
}

/// A labelled image batch `[N, C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// An in-memory dataset split in canonical (file) order.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub images: Vec<f32>,
    pub labels: Vec<usize>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub tag: SplitTag,
}

impl DatasetSplit {
    pub fn new(
        images: Vec<f32>,
        labels: Vec<usize>,
        [channels, height, width]: [usize; 3],
        num_classes: usize,
        tag: SplitTag,
    ) -> Result<Self> {
        let per = channels * height * width;
        if per == 0 || images.len() != per * labels.len() {
            return Err(Error::InvalidShape(format!(
                "{} pixel values for {} images of {channels}×{height}×{width}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: num_classes,
            });
        }
        if images.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidShape("pixel values outside [0, 1]".into()));
        }
        Ok(DatasetSplit {
            images,
            labels,
            channels,
            height,
            width,
            num_classes,
            tag,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Gathers the given examples into a batch.
    pub fn batch(&self, indices: &[usize]) -> LabeledBatch {
        let mut images = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        let shape = vec![indices.len(), self.channels, self.height, self.width];
        LabeledBatch {
            images: Tensor::new(shape, images).expect("non-empty batch"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// The first `n` examples in canonical order.
    pub fn take_first(&self, n: usize) -> DatasetSplit {
        let n = n.min(self.len());
        DatasetSplit {
            images: self.images[..n * self.image_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            channels: self.channels,
            height: self.height,
            width: self.width,
            num_classes: self.num_classes,
            tag: self.tag,
        }
    }

    pub fn label_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        self.labels.iter().for_each(|&y| h[y] += 1);
        h
    }
}
