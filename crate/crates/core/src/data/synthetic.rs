use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DatasetSplit, SplitTag};
use crate::error::{Error, Result};

/// Gaussian blobs in pixel space.
///
/// Each class centre is `0.5 ± separation/2` per pixel with a random sign
/// pattern drawn from `center_seed`, so any two distinct centres are exactly
/// `separation` apart in L∞. Samples add isotropic Gaussian noise and are
/// clipped to `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub num_classes: usize,
    pub shape: [usize; 3],
    pub separation: f32,
    pub noise_std: f32,
    pub center_seed: u64,
}

impl BlobSpec {
    pub fn centers(&self) -> Vec<Vec<f32>> {
        let d: usize = self.shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(self.center_seed);
        let mut centers: Vec<Vec<f32>> = Vec::with_capacity(self.num_classes);
        while centers.len() < self.num_classes {
            let c: Vec<f32> = (0..d)
                .map(|_| {
                    let s = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    0.5 + s * self.separation / 2.0
                })
                .collect();
            if !centers.contains(&c) {
                centers.push(c);
            }
        }
        centers
    }
}

/// `per_class` samples of each class, classes interleaved (`label = i mod K`).
pub fn gaussian_blobs(spec: &BlobSpec, per_class: usize, seed: u64, tag: SplitTag) -> Result<DatasetSplit> {
    if spec.num_classes < 2 || !(0.0..=1.0).contains(&spec.separation) || spec.noise_std < 0.0 {
        return Err(Error::InvalidConfig(format!("invalid blob spec {spec:?}")));
    }
    let d: usize = spec.shape.iter().product();
    if d == 0 || (d < 63 && spec.num_classes as u64 > 1u64 << d) {
        return Err(Error::InvalidConfig("too few pixels for distinct class centres".into()));
    }
    let centers = spec.centers();
    let noise = Normal::new(0.0, spec.noise_std as f64)
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = per_class * spec.num_classes;
    let mut images = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % spec.num_classes;
        labels.push(y);
        images.extend(
            centers[y]
                .iter()
                .map(|&c| (c + noise.sample(&mut rng) as f32).clamp(0.0, 1.0)),
        );
    }
    DatasetSplit::new(images, labels, spec.shape, spec.num_classes, tag)
}
