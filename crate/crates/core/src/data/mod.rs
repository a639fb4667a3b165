//! Image datasets, augmentation and mini-batching.
//!
//! Images are `[n, 32, 32, 3]` tensors with values in `[0, 1]`; labels are
//! class indices `0..10`.

mod augment;
mod cifar;
mod synthetic;

pub use augment::{augment, hflip, AugmentConfig};
pub use cifar::{load_cifar10, read_cifar_batch, write_cifar_batch, CIFAR_FILE_BYTES, CIFAR_RECORD_BYTES};
pub use synthetic::{make_synthetic, make_synthetic_split, prototypes, SYNTHETIC_NOISE};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{CHANNELS, IMAGE_SIZE, NUM_CLASSES};
use crate::tensor::{Prng, Purpose, Tensor};

pub const IMAGE_LEN: usize = IMAGE_SIZE * IMAGE_SIZE * CHANNELS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub(crate) fn key(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<u8>,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<u8>, split: Split) -> Result<Self> {
        let shape = images.shape();
        if shape.len() != 4 || shape[1..] != [IMAGE_SIZE, IMAGE_SIZE, CHANNELS] || shape[0] != labels.len() {
            return Err(Error::invalid(format!(
                "{} labels for images of shape {shape:?}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::invalid(format!("label {bad} out of range")));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("pixel values must lie in [0, 1]"));
        }
        Ok(Dataset { images, labels, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images.data()[i * IMAGE_LEN..(i + 1) * IMAGE_LEN]
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: Tensor::new([n, IMAGE_SIZE, IMAGE_SIZE, CHANNELS], self.images.data()[..n * IMAGE_LEN].to_vec())
                .expect("prefix keeps the layout"),
            labels: self.labels[..n].to_vec(),
            split: self.split,
        }
    }
}

/// `e_label` in `R^classes`.
pub fn one_hot(label: usize, classes: usize) -> Vec<f32> {
    let mut v = vec![0.0; classes];
    v[label] = 1.0;
    v
}

#[derive(Clone, Debug)]
pub struct Batch {
    /// `[b, 32, 32, 3]`.
    pub x: Tensor,
    /// One-hot targets `[b, 10]`.
    pub y: Tensor,
    pub labels: Vec<u8>,
}

/// Sample order for one epoch; a fresh permutation per epoch when shuffling.
pub fn epoch_order(n: usize, prng: Prng, epoch: u64, shuffle: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(&mut prng.substream(Purpose::Shuffle, epoch, 0));
    }
    order
}

/// Mini-batches over one epoch. The last batch may be short.
pub struct Batches<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
    prng: Prng,
    epoch: u64,
    augment: Option<AugmentConfig>,
}

pub fn batches(ds: &Dataset, batch_size: usize, prng: Prng, epoch: u64, shuffle: bool) -> Result<Batches<'_>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be at least 1"));
    }
    Ok(Batches {
        ds,
        order: epoch_order(ds.len(), prng, epoch, shuffle),
        batch_size,
        pos: 0,
        prng,
        epoch,
        augment: None,
    })
}

impl Batches<'_> {
    /// Augment every sample on the fly; the stream of sample `i` is keyed by `(epoch, i)`.
    pub fn with_augment(mut self, cfg: AugmentConfig) -> Self {
        self.augment = cfg.enabled.then_some(cfg);
        self
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        let mut x = Vec::with_capacity(idx.len() * IMAGE_LEN);
        let mut y = Vec::with_capacity(idx.len() * NUM_CLASSES);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            match &self.augment {
                Some(cfg) => {
                    let mut rng = self.prng.substream(Purpose::Augment, self.epoch, i as u64);
                    x.extend(augment(self.ds.image(i), cfg, &mut rng));
                }
                None => x.extend_from_slice(self.ds.image(i)),
            }
            let label = self.ds.labels[i];
            y.extend(one_hot(label as usize, NUM_CLASSES));
            labels.push(label);
        }
        let b = idx.len();
        Some(Batch {
            x: Tensor::new([b, IMAGE_SIZE, IMAGE_SIZE, CHANNELS], x).expect("batch layout"),
            y: Tensor::new([b, NUM_CLASSES], y).expect("batch layout"),
            labels,
        })
    }
}
