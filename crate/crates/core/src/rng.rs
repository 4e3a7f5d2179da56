//! Counter-based seeded randomness.
//!
//! The generator is a SplitMix64 stream indexed by a monotonically increasing
//! counter, so its full state is two u64s and serializes into checkpoints
//! trivially. Identical seeds give identical sequences across runs.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    seed: u64,
    counter: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed, counter: 0 }
    }

    pub fn state(&self) -> (u64, u64) {
        (self.seed, self.counter)
    }

    pub fn restore(seed: u64, counter: u64) -> Self {
        Rng { seed, counter }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        let mut z = self
            .seed
            .wrapping_add(self.counter.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform draw in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n). n = 0 is rejected.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "Rng::below(0)");
        (self.next_u64() % n as u64) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Standard normal via Box-Muller. Consumes two draws per call; nothing is
    /// cached, so the state stays a plain counter.
    pub fn normal(&mut self) -> f64 {
        // u1 in (0, 1] so the log is finite
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Seeded permutation of 0..n.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx
    }
}

/// I.i.d. zero-mean normal draws with the given standard deviation.
pub fn seeded_normal<E: Element>(rng: &mut Rng, shape: &[usize], std: f64) -> Result<Tensor<E>> {
    if !(std > 0.0) {
        return Err(Error::invalid(
            "seeded_normal",
            format!("std must be positive, got {std}"),
        ));
    }
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| E::from_f64(rng.normal() * std)).collect();
    Tensor::from_vec(shape, data)
}
