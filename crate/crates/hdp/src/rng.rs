//! Self-contained deterministic random number generation.
//!
//! Everything downstream (data synthesis, weight init, shuffles, UAP batching)
//! draws from seeded streams derived here, so a run is a pure function of its
//! seeds. The generator is xoshiro256**, seeded through splitmix64; both are
//! fixed algorithms, so streams are stable across builds and platforms.

/// splitmix64 step; also used as the mixing function for seed derivation.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Collapses a list of integers into one well-mixed 64-bit seed.
///
/// Used for the per-sample / per-purpose seed discipline: independent
/// streams are derived as `seed_hash(&[TAG, global_seed, ...indices])`.
pub fn seed_hash(parts: &[u64]) -> u64 {
    let mut state = 0x243f_6a88_85a3_08d3; // arbitrary nonzero constant
    let mut acc = 0u64;
    for &p in parts {
        state ^= p;
        acc = acc.rotate_left(23) ^ splitmix64(&mut state);
    }
    // final stir so short part-lists are still well mixed
    let mut s = acc ^ state;
    splitmix64(&mut s)
}

/// Stream tags keeping unrelated consumers of the same user seed independent.
pub mod tag {
    pub const DATA: u64 = 0x4441_5441; // "DATA"
    pub const PALETTE: u64 = 0x50_414c; // "PAL"
    pub const MANIP: u64 = 0x4d41_4e50; // "MANP"
    pub const INIT: u64 = 0x494e_4954; // "INIT"
    pub const SHUFFLE: u64 = 0x5348_4646; // "SHFF"
    pub const UAP: u64 = 0x5541_5000; // "UAP"
    pub const SUBSET: u64 = 0x5355_4253; // "SUBS"
    pub const BUFFER: u64 = 0x4255_4646; // "BUFF"
}

/// xoshiro256** generator.
#[derive(Debug, Clone)]
pub struct Rng {
    s: [u64; 4],
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let s = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Rng { s }
    }

    /// Stream derived from hashed parts; see module docs.
    pub fn from_parts(parts: &[u64]) -> Self {
        Rng::new(seed_hash(parts))
    }

    pub fn next_u64(&mut self) -> u64 {
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

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [0, 1) as f32.
    pub fn next_f32(&mut self) -> f32 {
        (self.next_u64() >> 40) as f32 * (1.0 / (1u64 << 24) as f32)
    }

    /// Uniform in [lo, hi).
    pub fn range_f64(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n). n must be > 0.
    pub fn below(&mut self, n: usize) -> usize {
        // Multiply-shift bound; bias is negligible for the n used here.
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Standard normal via Box-Muller (uses two uniform draws per pair).
    pub fn normal(&mut self) -> f64 {
        loop {
            let u1 = self.next_f64();
            if u1 > 1e-300 {
                let u2 = self.next_f64();
                let r = (-2.0 * u1.ln()).sqrt();
                return r * (2.0 * std::f64::consts::PI * u2).cos();
            }
        }
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    /// k distinct indices from 0..n, seeded-uniform without replacement.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx.truncate(k);
        idx
    }
}
