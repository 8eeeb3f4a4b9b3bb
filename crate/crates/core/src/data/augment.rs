use rand::Rng;
use serde::{Deserialize, Serialize};

use super::LabeledBatch;
use crate::tensor::Tensor;

/// Random crop after zero padding, plus an optional horizontal flip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub pad: usize,
    pub flip: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { pad: 4, flip: true }
    }
}

/// Per-image augmentation choice: crop offsets into the padded image and
/// whether to mirror.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentDraw {
    pub dy: usize,
    pub dx: usize,
    pub flip: bool,
}

impl AugmentConfig {
    /// Offsets uniform over `{0, …, 2·pad}²`, flip with probability ½.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> AugmentDraw {
        AugmentDraw {
            dy: rng.random_range(0..=2 * self.pad),
            dx: rng.random_range(0..=2 * self.pad),
            flip: self.flip && rng.random_bool(0.5),
        }
    }
}

/// Mirrors every row of a `[C, H, W]` image in place.
pub fn flip_horizontal(image: &mut [f32], width: usize) {
    for row in image.chunks_mut(width) {
        row.reverse();
    }
}

fn crop(src: &[f32], [c, h, w]: [usize; 3], pad: usize, d: AugmentDraw, dst: &mut [f32]) {
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                // position in the padded image minus the padding
                let sy = (y + d.dy) as isize - pad as isize;
                let sx = (x + d.dx) as isize - pad as isize;
                dst[(ch * h + y) * w + x] = if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                    src[(ch * h + sy as usize) * w + sx as usize]
                } else {
                    0.0
                };
            }
        }
    }
    if d.flip {
        flip_horizontal(dst, w);
    }
}

/// Applies an independent random crop/flip to every image; labels unchanged.
pub fn augment<R: Rng + ?Sized>(batch: &LabeledBatch, cfg: &AugmentConfig, rng: &mut R) -> LabeledBatch {
    let s = batch.images.shape();
    let dims = [s[1], s[2], s[3]];
    let per = dims.iter().product::<usize>();
    let mut out = vec![0.0; batch.images.numel()];
    for (src, dst) in batch.images.data().chunks(per).zip(out.chunks_mut(per)) {
        let d = cfg.draw(rng);
        crop(src, dims, cfg.pad, d, dst);
    }
    LabeledBatch {
        images: Tensor::new(s.to_vec(), out).expect("same shape"),
        labels: batch.labels.clone(),
    }
}
