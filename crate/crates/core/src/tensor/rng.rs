//! Counter-based random streams keyed by purpose.
//!
//! Every stream is a ChaCha8 keystream selected by `(seed, stream id)`; its
//! position is the 128-bit word counter, so `(seed, stream, counter)` pins
//! the next draw exactly and can be checkpointed.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const ALGORITHM: &str = "chacha8";

/// What a stream is used for. Distinct purposes never share a keystream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamPurpose {
    DataOrder,
    WeightInit,
    Dropout,
    PoolSampling,
    Augmentation,
    Synthetic,
    Split,
}

impl StreamPurpose {
    pub const ALL: [StreamPurpose; 7] = [
        StreamPurpose::DataOrder,
        StreamPurpose::WeightInit,
        StreamPurpose::Dropout,
        StreamPurpose::PoolSampling,
        StreamPurpose::Augmentation,
        StreamPurpose::Synthetic,
        StreamPurpose::Split,
    ];

    fn id(self) -> u64 {
        match self {
            StreamPurpose::DataOrder => 1,
            StreamPurpose::WeightInit => 2,
            StreamPurpose::Dropout => 3,
            StreamPurpose::PoolSampling => 4,
            StreamPurpose::Augmentation => 5,
            StreamPurpose::Synthetic => 6,
            StreamPurpose::Split => 7,
        }
    }
}

/// Serializable position of a stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamState {
    pub seed: u64,
    pub stream: u64,
    pub counter: u128,
}

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn key_from_seed(seed: u64) -> [u8; 32] {
    let mut key = [0u8; 32];
    let mut z = seed;
    for chunk in key.chunks_mut(8) {
        z = splitmix64(z);
        chunk.copy_from_slice(&z.to_le_bytes());
    }
    key
}

impl RngStream {
    pub fn new(seed: u64, purpose: StreamPurpose) -> Self {
        Self::with_stream(seed, purpose.id() << 56)
    }

    fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::from_seed(key_from_seed(seed));
        rng.set_stream(stream);
        RngStream { seed, stream, rng }
    }

    pub fn restore(state: StreamState) -> Self {
        let mut s = Self::with_stream(state.seed, state.stream);
        s.rng.set_word_pos(state.counter);
        s
    }

    pub fn state(&self) -> StreamState {
        StreamState {
            seed: self.seed,
            stream: self.stream,
            counter: self.rng.get_word_pos(),
        }
    }

    pub fn counter(&self) -> u128 {
        self.rng.get_word_pos()
    }

    /// An independent child stream, fixed by this stream's identity and
    /// `key` but not by its current position.
    pub fn substream(&self, key: u64) -> RngStream {
        let mixed = splitmix64(self.stream ^ splitmix64(key.wrapping_add(1)));
        // keep the purpose byte so children of different purposes stay apart
        let stream = (self.stream & (0xFF << 56)) | (mixed & !(0xFF << 56));
        Self::with_stream(self.seed, stream)
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `k` distinct elements of `items`, in sampled order.
    pub fn sample<T: Clone>(&mut self, items: &[T], k: usize) -> Vec<T> {
        let mut idx: Vec<usize> = (0..items.len()).collect();
        let k = k.min(items.len());
        for i in 0..k {
            let j = i + self.below(items.len() - i);
            idx.swap(i, j);
        }
        idx[..k].iter().map(|&i| items[i].clone()).collect()
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.rng.try_fill_bytes(dest)
    }
}
