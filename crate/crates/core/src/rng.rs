//! Seedable, splittable random streams.
//!
//! Each stream is a ChaCha8 generator keyed by
//! `SHA-256("chainend/rng/v1" || seed:u64le || node:u32le || len:u32le || purpose)`
//! where `node` is `0xFFFF_FFFF` for streams not tied to a node. ChaCha is
//! counter-based, so a stream is fully described by its key. Integer draws
//! use the 128-bit multiply-shift reduction `(x * n) >> 64`; unit draws use
//! the top 53 bits.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::codec::Encoder;
use crate::digest::Digest;
use crate::ids::NodeId;

#[derive(Clone, Debug)]
pub struct RngStream(ChaCha8Rng);

impl RngStream {
    pub fn derive(seed: u64, node: Option<NodeId>, purpose: &str) -> Self {
        let mut enc = Encoder::new();
        enc.raw(b"chainend/rng/v1")
            .u64(seed)
            .u32(node.map_or(u32::MAX, |n| n.0))
            .str(purpose);
        let key = Digest::of(&enc.finish());
        RngStream(ChaCha8Rng::from_seed(key.0))
    }

    /// Uniform integer in `0..n`; `n` must be positive.
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        ((self.0.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// Uniform float in `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Realizes an expected count: `floor(rate)` plus one more with
    /// probability `fract(rate)`. Integer rates consume no draw.
    pub fn realize_rate(&mut self, rate: f64) -> u64 {
        let whole = rate.floor();
        let frac = rate - whole;
        let extra = if frac > 0.0 && self.unit() < frac { 1 } else { 0 };
        whole as u64 + extra
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.0.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.0.fill_bytes(dst)
    }
}
