//! Seeded randomness.
//!
//! Every random draw in the crate comes from ChaCha8 (`rand_chacha`) seeded
//! with `seed_from_u64(seed)`. Independent consumers of the same seed are
//! separated by the ChaCha stream id: `(purpose << 32) | epoch`. Shuffles are
//! the classic Fisher–Yates walk from the last index down, drawing
//! `next_u64() % (i + 1)` for position `i`. Together these fix the sample
//! order, augmentation and dropout masks bit-for-bit across machines.

use alloc::vec::Vec;
use rand::{RngCore, SeedableRng};
pub use rand_chacha::ChaCha8Rng as SeededRng;

/// Stream purposes.
pub mod purpose {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const AUGMENT: u64 = 3;
    pub const DROPOUT: u64 = 4;
    pub const SYNTH: u64 = 5;
    pub const SPLIT: u64 = 6;
}

pub fn stream(seed: u64, purpose: u64, epoch: u64) -> SeededRng {
    let mut rng = SeededRng::seed_from_u64(seed);
    rng.set_stream((purpose << 32) | (epoch & 0xffff_ffff));
    rng
}

/// Uniform draw in `[0, 1)` with 24 bits of resolution.
#[inline]
pub fn unit_f32(rng: &mut SeededRng) -> f32 {
    (rng.next_u32() >> 8) as f32 * (1.0 / (1u32 << 24) as f32)
}

/// Uniform draw in `[0, 1)` with 53 bits of resolution.
#[inline]
pub fn unit_f64(rng: &mut SeededRng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal via Box–Muller.
pub fn normal_f64(rng: &mut SeededRng) -> f64 {
    let u1 = 1.0 - unit_f64(rng);
    let u2 = unit_f64(rng);
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)
}

pub fn shuffle<T>(items: &mut [T], rng: &mut SeededRng) {
    for i in (1..items.len()).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        items.swap(i, j);
    }
}

/// Seeded permutation of `0..n` for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = stream(seed, purpose::SHUFFLE, epoch as u64);
    shuffle(&mut order, &mut rng);
    order
}
