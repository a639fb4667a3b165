use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, Split, IMAGE_LEN};
use crate::error::{Error, Result};
use crate::models::{CHANNELS, IMAGE_SIZE, NUM_CLASSES};
use crate::tensor::{Prng, Purpose, Tensor};

/// Standard deviation of the per-pixel noise around each prototype.
pub const SYNTHETIC_NOISE: f32 = 0.1;
const BLOCK: usize = 4;

/// One fixed image per class: 4×4 pixel blocks set independently to 0 or 1 per channel.
pub fn prototypes(classes: usize, seed: u64) -> Vec<Vec<f32>> {
    let prng = Prng::new(seed);
    let cells = IMAGE_SIZE / BLOCK;
    (0..classes)
        .map(|c| {
            let mut rng = prng.substream(Purpose::Prototype, 0, c as u64);
            let bits: Vec<f32> = (0..cells * cells * CHANNELS)
                .map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 })
                .collect();
            let mut img = vec![0.0; IMAGE_LEN];
            for y in 0..IMAGE_SIZE {
                for x in 0..IMAGE_SIZE {
                    for ch in 0..CHANNELS {
                        let cell = ((y / BLOCK) * cells + x / BLOCK) * CHANNELS + ch;
                        img[(y * IMAGE_SIZE + x) * CHANNELS + ch] = bits[cell];
                    }
                }
            }
            img
        })
        .collect()
}

/// Training split of [`make_synthetic_split`].
pub fn make_synthetic(n_per_class: usize, classes: usize, seed: u64) -> Result<Dataset> {
    make_synthetic_split(n_per_class, classes, seed, Split::Train)
}

/// `n_per_class` noisy copies of each class prototype, clipped to `[0, 1]`.
/// Splits share prototypes and draw independent noise; samples are ordered
/// class by class.
pub fn make_synthetic_split(n_per_class: usize, classes: usize, seed: u64, split: Split) -> Result<Dataset> {
    if n_per_class == 0 {
        return Err(Error::invalid("n_per_class must be at least 1"));
    }
    if classes == 0 || classes > NUM_CLASSES {
        return Err(Error::invalid(format!("classes must be in 1..={NUM_CLASSES}")));
    }
    let protos = prototypes(classes, seed);
    let prng = Prng::new(seed);
    let noise = Normal::new(0.0f32, SYNTHETIC_NOISE).expect("positive sigma");
    let n = n_per_class * classes;
    let mut images = Vec::with_capacity(n * IMAGE_LEN);
    let mut labels = Vec::with_capacity(n);
    for (c, proto) in protos.iter().enumerate() {
        for k in 0..n_per_class {
            let i = c * n_per_class + k;
            let mut rng = prng.substream(Purpose::Noise, split.key(), i as u64);
            images.extend(proto.iter().map(|&p| (p + noise.sample(&mut rng)).clamp(0.0, 1.0)));
            labels.push(c as u8);
        }
    }
    Dataset::new(Tensor::new([n, IMAGE_SIZE, IMAGE_SIZE, CHANNELS], images)?, labels, split)
}
