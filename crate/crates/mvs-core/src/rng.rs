//! Deterministic, addressable random streams.
//!
//! Every random decision in the pipeline draws from a stream keyed by
//! `(seed, domain, view, iteration, pixel, ...)`. Streams are independent of
//! scheduling, so parallel sweeps produce the same maps as sequential ones.

use rand::RngCore;

/// splitmix64 step; good avalanche, cheap enough to seed millions of streams.
#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A small keyed PRNG (xoshiro256**) usable with the `rand` distributions.
#[derive(Clone, Debug)]
pub struct StreamRng {
    s: [u64; 4],
}

impl StreamRng {
    /// Derives an independent stream from a master seed and a key path.
    ///
    /// Identical `(seed, key)` pairs always yield identical streams.
    pub fn from_key(seed: u64, key: &[u64]) -> Self {
        let mut state = seed ^ 0x6a09_e667_f3bc_c909;
        let mut s = [0u64; 4];
        for &part in key {
            state ^= part.wrapping_mul(0x9e37_79b9_7f4a_7c15);
            splitmix64(&mut state);
        }
        for slot in &mut s {
            *slot = splitmix64(&mut state);
        }
        // xoshiro forbids the all-zero state
        if s == [0; 4] {
            s[0] = 1;
        }
        Self { s }
    }

    #[inline]
    fn next(&mut self) -> u64 {
        let result = self.s[1]
            .wrapping_mul(5)
            .rotate_left(7)
            .wrapping_mul(9);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform draw in `[0, 1)`.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        // 53 mantissa bits
        (self.next() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in `[lo, hi)`.
    #[inline]
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform().max(1e-300);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}

impl RngCore for StreamRng {
    fn next_u32(&mut self) -> u32 {
        (self.next() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        self.next()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        let mut chunks = dest.chunks_exact_mut(8);
        for chunk in &mut chunks {
            chunk.copy_from_slice(&self.next().to_le_bytes());
        }
        let rem = chunks.into_remainder();
        if !rem.is_empty() {
            let bytes = self.next().to_le_bytes();
            rem.copy_from_slice(&bytes[..rem.len()]);
        }
    }
}

/// Key-path domains, kept distinct so streams never collide across stages.
pub mod domain {
    pub const INIT: u64 = 1;
    pub const HYPOTHESES: u64 = 2;
    pub const VIEW_SAMPLING: u64 = 3;
    pub const PRIOR_DRAW: u64 = 4;
    pub const RANSAC: u64 = 5;
    pub const NOISE: u64 = 6;
}
