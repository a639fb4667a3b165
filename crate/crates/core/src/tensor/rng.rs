use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a random stream is used for. The discriminant is part of the stream key,
/// so adding a variant never perturbs the streams of existing ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    /// Parameter initialization; index = parameter slot.
    Init = 1,
    /// Per-epoch sample order; index unused.
    Shuffle = 2,
    /// Per-sample augmentation draws; index = sample position in the dataset.
    Augment = 3,
    /// Dropout masks; index = optimizer step within the epoch.
    Dropout = 4,
    /// Synthetic class prototypes; epoch unused, index = class.
    Prototype = 5,
    /// Synthetic per-sample noise; epoch = split tag, index = sample.
    Noise = 6,
    /// Free-form streams for tests and tools.
    Scratch = 7,
}

/// Seeded root of every random stream in a run.
///
/// Streams are derived from `(seed, purpose, epoch, index)` alone, so two runs
/// that request the same keys see the same numbers regardless of the order in
/// which the streams are created.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Prng {
    seed: u64,
}

impl Prng {
    pub fn new(seed: u64) -> Self {
        Prng { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn substream(&self, purpose: Purpose, epoch: u64, index: u64) -> ChaCha8Rng {
        let mut state = self.seed;
        let mut key = [0u8; 32];
        let words = [purpose as u64, epoch, index, 0x6c6f_7762_6974_7321];
        for (chunk, word) in key.chunks_exact_mut(8).zip(words) {
            state = splitmix64(state ^ word);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        ChaCha8Rng::from_seed(key)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
