//! Stable 64-bit hashing used for seed derivation and output digests.
//!
//! `std::hash` makes no cross-release stability promise, so everything that
//! must reproduce bit-identically across builds (mock logits, per-record RNG
//! streams, config digests) goes through these fixed functions instead.

/// FNV-1a over a byte slice.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// SplitMix64 finalizer; decorrelates structured inputs.
pub fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Combines two words into one well-mixed word.
pub fn combine(a: u64, b: u64) -> u64 {
    mix(a ^ mix(b))
}

/// Maps a hash word to a uniform f64 in [0, 1).
pub fn unit_f64(h: u64) -> f64 {
    // 53 high bits -> [0, 1)
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Hex digest of a byte stream, for embedding in output files.
pub fn hex_digest(bytes: &[u8]) -> String {
    format!("{:016x}", mix(fnv1a(bytes)))
}

/// Incremental FNV-1a for hashing large inputs piecewise.
pub struct Hasher64 {
    state: u64,
}

impl Hasher64 {
    #[allow(clippy::new_without_default)]
    pub fn new() -> Hasher64 {
        Hasher64 {
            state: 0xcbf29ce484222325,
        }
    }

    pub fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.state ^= u64::from(b);
            self.state = self.state.wrapping_mul(0x100000001b3);
        }
    }

    pub fn finish(&self) -> u64 {
        mix(self.state)
    }
}
