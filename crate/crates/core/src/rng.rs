//! Counter-based random streams.
//!
//! Every draw in the simulator is addressed by a key path such as
//! `(seed, purpose, auction, candidate)` rather than by its position in a
//! single sequence. Output `i` of a stream is `splitmix64(key + i * γ)`, so
//! streams can be evaluated in any order, on any thread, and adding a new
//! policy never shifts the draws of an existing one.

use rand::RngCore;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable 64-bit FNV-1a hash, used to turn policy names into stream keys.
pub fn name_key(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A node in the key tree. Children are derived deterministically.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamKey(u64);

impl StreamKey {
    pub fn root(seed: u64) -> Self {
        StreamKey(mix64(seed ^ 0x6A09_E667_F3BC_C908))
    }

    #[inline]
    pub fn child(self, label: u64) -> Self {
        StreamKey(mix64(
            self.0 ^ mix64(label.wrapping_add(GOLDEN_GAMMA)).rotate_left(17),
        ))
    }

    #[inline]
    pub fn stream(self) -> CounterRng {
        CounterRng {
            key: self.0,
            counter: 0,
        }
    }
}

/// The generator attached to one [`StreamKey`].
#[derive(Debug, Clone)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    /// Uniform draw on `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

impl RngCore for CounterRng {
    #[inline]
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    #[inline]
    fn next_u64(&mut self) -> u64 {
        let out = mix64(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN_GAMMA)));
        self.counter = self.counter.wrapping_add(1);
        out
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let bytes = self.next_u64().to_le_bytes();
            chunk.copy_from_slice(&bytes[..chunk.len()]);
        }
    }
}
