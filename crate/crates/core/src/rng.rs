//! Named, counter-based random streams.
//!
//! A stream is a ChaCha8 keystream selected by `(seed, key)`. The key is a
//! short tuple of integers (for example `[domain, block, step]`) folded into
//! the 64-bit ChaCha stream id, so two workers that agree on the key draw the
//! same numbers no matter which thread runs first.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Well-known key domains. The first key element of every stream used by the
/// trainers is one of these.
pub mod domain {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const BLOCK: u64 = 3;
    pub const HEAD: u64 = 4;
    pub const INFER: u64 = 5;
    pub const DATA: u64 = 6;
    pub const CHECK: u64 = 7;
    pub const MODEL: u64 = 8;
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Folds a key tuple into a single stream id.
pub fn stream_id(key: &[u64]) -> u64 {
    key.iter()
        .fold(0x6E6F_7072_6F70_u64, |acc, &k| splitmix(acc ^ splitmix(k)))
}

/// Position of a stream, enough to resume it bit-exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamCursor {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, key: &[u64]) -> Self {
        Self::from_stream_id(seed, stream_id(key))
    }

    fn from_stream_id(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        rng.set_word_pos(0);
        Self { seed, stream, rng }
    }

    pub fn cursor(&self) -> StreamCursor {
        StreamCursor {
            seed: self.seed,
            stream: self.stream,
            word_pos: self.rng.get_word_pos(),
        }
    }

    pub fn from_cursor(cursor: StreamCursor) -> Self {
        let mut s = Self::from_stream_id(cursor.seed, cursor.stream);
        s.rng.set_word_pos(cursor.word_pos);
        s
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.rng);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_key_same_numbers() {
        let mut a = RngStream::new(7, &[domain::BLOCK, 3, 11]);
        let mut b = RngStream::new(7, &[domain::BLOCK, 3, 11]);
        assert_eq!(a.normals(16), b.normals(16));
    }

    #[test]
    fn different_keys_diverge() {
        let mut a = RngStream::new(7, &[domain::BLOCK, 3, 11]);
        let mut b = RngStream::new(7, &[domain::BLOCK, 11, 3]);
        assert_ne!(a.normals(4), b.normals(4));
    }

    #[test]
    fn cursor_resumes_exactly() {
        let mut a = RngStream::new(1, &[domain::HEAD]);
        a.normals(5);
        let mut b = RngStream::from_cursor(a.cursor());
        assert_eq!(a.normals(9), b.normals(9));
    }
}
