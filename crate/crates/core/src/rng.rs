//! Keyed, counter-based random streams.
//!
//! Every random draw in the crate comes from a [`Stream`]: ChaCha8 keyed by a
//! 64-bit seed mixed with a string tag. ChaCha is counter based, so a stream
//! can be positioned anywhere (see [`Stream::at_word`]) and the value at a
//! given position is the same on every platform. Conversions to floats and
//! bounded integers are done here rather than through `rand` so they are
//! pinned as well.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finaliser.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derives a child seed from `(seed, tag, index)`.
pub fn derive_seed(seed: u64, tag: &str, index: u64) -> u64 {
    mix64(mix64(seed ^ fnv1a(tag)) ^ mix64(index.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

/// Which side of a benchmark a trained model belongs to. Models trained for
/// attribution and models trained to produce ground truth draw their seeds
/// from disjoint tagged streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SeedRole {
    Attribution,
    Truth,
}

impl SeedRole {
    pub fn tag(self) -> &'static str {
        match self {
            SeedRole::Attribution => "role/attribution",
            SeedRole::Truth => "role/truth",
        }
    }

    pub fn seed(self, base: u64, index: u64) -> u64 {
        derive_seed(base, self.tag(), index)
    }
}

#[derive(Clone)]
pub struct Stream {
    rng: ChaCha8Rng,
}

impl Stream {
    pub fn new(seed: u64, tag: &str) -> Self {
        let mut key = [0u8; 32];
        let base = derive_seed(seed, tag, 0);
        for (i, chunk) in key.chunks_mut(8).enumerate() {
            chunk.copy_from_slice(&mix64(base.wrapping_add(i as u64)).to_le_bytes());
        }
        Stream {
            rng: ChaCha8Rng::from_seed(key),
        }
    }

    /// A stream positioned at 32-bit word `word` of sub-stream `stream`.
    pub fn at_word(seed: u64, tag: &str, stream: u64, word: u128) -> Self {
        let mut s = Stream::new(seed, tag);
        s.rng.set_stream(stream);
        s.rng.set_word_pos(word);
        s
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box–Muller; always consumes exactly two `u64`s.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in `[0, n)` by widening multiply.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Fisher–Yates.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `k` distinct indices from `[0, n)`, returned in ascending order.
    pub fn choose_sorted(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n);
        let mut idx: Vec<usize> = (0..n).collect();
        // Partial Fisher–Yates on the front k slots.
        for i in 0..k {
            let j = i + self.below(n - i);
            idx.swap(i, j);
        }
        idx.truncate(k);
        idx.sort_unstable();
        idx
    }
}
