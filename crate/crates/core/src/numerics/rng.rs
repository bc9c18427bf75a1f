use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What a random stream is used for. Part of the stream key, so streams for
/// different purposes never overlap even with equal seeds and indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    DeviceVariation,
    Encoder,
    Init,
    Shuffle,
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::DeviceVariation => 0x6465_7669_6365,
            Purpose::Encoder => 0x656e_636f_6465,
            Purpose::Init => 0x696e_6974,
            Purpose::Shuffle => 0x7368_7566,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A reproducible random stream keyed by `(master_seed, purpose, index)`.
///
/// Parallel work never shares a stream; it derives one per tile or sample
/// through the index, which keeps results independent of scheduling.
#[derive(Debug, Clone)]
pub struct RandomStream {
    master_seed: u64,
    purpose: Purpose,
    index: u64,
    rng: ChaCha8Rng,
}

impl RandomStream {
    pub fn new(master_seed: u64, purpose: Purpose, index: u64) -> Self {
        let mut seed = [0u8; 32];
        let words = [
            splitmix64(master_seed),
            splitmix64(purpose.tag() ^ 0x5bd1_e995),
            splitmix64(index ^ 0xa076_1d64_78bd_642f),
            splitmix64(master_seed ^ index.rotate_left(29) ^ purpose.tag().rotate_left(7)),
        ];
        for (chunk, w) in seed.chunks_exact_mut(8).zip(words) {
            chunk.copy_from_slice(&w.to_le_bytes());
        }
        RandomStream {
            master_seed,
            purpose,
            index,
            rng: ChaCha8Rng::from_seed(seed),
        }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn purpose(&self) -> Purpose {
        self.purpose
    }

    pub fn index(&self) -> u64 {
        self.index
    }

    /// Uniform sample in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    /// Uniform sample in `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn gaussian(&mut self, n: usize, mean: f64, stddev: f64) -> Result<Vec<f64>> {
        if !(stddev >= 0.0) || !stddev.is_finite() || !mean.is_finite() {
            return Err(Error::invalid(format!(
                "gaussian needs finite mean and stddev >= 0, got mean {mean}, stddev {stddev}"
            )));
        }
        if stddev == 0.0 {
            return Ok(vec![mean; n]);
        }
        let dist = Normal::new(mean, stddev).map_err(|e| Error::invalid(e.to_string()))?;
        Ok((0..n).map(|_| dist.sample(&mut self.rng)).collect())
    }

    pub fn bernoulli(&mut self, p: f64) -> Result<u8> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::invalid(format!("bernoulli probability {p} outside [0, 1]")));
        }
        Ok(self.bernoulli_unchecked(p))
    }

    /// Bernoulli draw for a probability already known to lie in `[0, 1]`.
    /// `p = 0` never fires and `p = 1` always fires.
    #[inline]
    pub(crate) fn bernoulli_unchecked(&mut self, p: f64) -> u8 {
        u8::from(self.uniform() < p)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.rng.random_range(0..=i);
            items.swap(i, j);
        }
    }
}

/// `n` i.i.d. normal samples from the stream.
pub fn gaussian_sample(stream: &mut RandomStream, n: usize, mean: f64, stddev: f64) -> Result<Vec<f64>> {
    stream.gaussian(n, mean, stddev)
}

/// A single Bernoulli draw.
pub fn bernoulli_sample(stream: &mut RandomStream, p: f64) -> Result<u8> {
    stream.bernoulli(p)
}
