//! Replayable randomness: a master seed plus a stream id per purpose.
//!
//! Every randomized step draws from its own ChaCha stream, so changing how
//! many noise draws one step consumes never shifts the indices another step
//! samples.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Stream {
    ColumnSampling = 1,
    ColumnNoise = 2,
    RowSampling = 3,
    EntryNoise = 4,
    EntrySampling = 5,
    CrossValidation = 6,
    Dataset = 7,
    Auxiliary = 8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedStreams {
    seed: u64,
}

impl SeedStreams {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn rng(&self, stream: Stream) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream as u64);
        rng
    }

    /// Child seed family keyed by `parts` (trial index, algorithm id, ...).
    pub fn child(&self, parts: &[u64]) -> SeedStreams {
        SeedStreams::new(derive_seed(self.seed, parts))
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(master), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}
