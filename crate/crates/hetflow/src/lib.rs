//! Mini-batch heterogeneous GNN training engine.
//!
//! Implements two execution paths over an emulated device with a
//! configurable per-kernel launch overhead: a baseline that builds and
//! aggregates every semantic graph with its own kernels, and an optimized
//! path that reorganizes features by vertex type, merges per-relation
//! aggregation inputs into a single kernel, offloads edge index selection
//! to parallel host workers, and pipelines host and device work.

pub mod aggregate;
pub mod bench;
pub mod device;
pub mod executor;
pub mod features;
pub mod graph;
pub mod model;
pub mod sampler;
pub mod semantic;

use ndarray::NdFloat;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Floating point element type for features and parameters.
///
/// Implemented for `f32` (the default) and `f64` (the `--fp64` path).
pub trait Scalar: NdFloat + std::iter::Sum + Default + serde::Serialize {
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn sample_normal<R: Rng>(rng: &mut R) -> Self;
    fn sample_uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> Self;
    fn bits64(self) -> u64;
    fn from_le_slice(bytes: &[u8]) -> Self;
    fn write_le(self, out: &mut Vec<u8>);
    const BYTES: usize;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn sample_normal<R: Rng>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
    fn sample_uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> Self {
        rng.gen_range(lo as f32..hi as f32)
    }
    fn bits64(self) -> u64 {
        self.to_bits() as u64
    }
    fn from_le_slice(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte slice"))
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    const BYTES: usize = 4;
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn sample_normal<R: Rng>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
    fn sample_uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> Self {
        rng.gen_range(lo..hi)
    }
    fn bits64(self) -> u64 {
        self.to_bits()
    }
    fn from_le_slice(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte slice"))
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    const BYTES: usize = 8;
}

/// Splitmix64 step, used to derive independent rng streams from
/// (seed, epoch, batch) so execution strategy cannot change results.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut z: u64 = 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        z = z.wrapping_add(p).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z ^= z >> 31;
        z = z.wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 27;
    }
    z
}
