//! Seeded, stream-stable random number generation.
//!
//! All randomness in the crate (weight initialization, the toy trainer,
//! randomized verification suites) flows through [`SeededRng`], a ChaCha8
//! generator, so identical seeds give bit-identical results everywhere.

use rand_core::{RngCore, SeedableRng};

use crate::math;
use crate::tensor::{Matrix, Tensor3};

/// Deterministic random source; a thin wrapper over ChaCha8.
pub struct SeededRng {
    inner: rand_chacha::ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: rand_chacha::ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1) with 53 bits of mantissa.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let mut u = self.uniform();
        if u <= f64::MIN_POSITIVE {
            u = f64::MIN_POSITIVE;
        }
        let v = self.uniform();
        math::sqrt(-2.0 * math::ln(u)) * math::cos(2.0 * core::f64::consts::PI * v)
    }

    /// Matrix with i.i.d. standard normal entries.
    pub fn normal_matrix(&mut self, rows: usize, cols: usize) -> Matrix {
        let mut m = Matrix::zeros(rows, cols);
        for v in m.data_mut() {
            *v = self.normal();
        }
        m
    }

    /// Order-3 tensor with i.i.d. standard normal entries.
    pub fn normal_tensor(&mut self, dims: (usize, usize, usize)) -> Tensor3 {
        let mut t = Tensor3::zeros(dims);
        for v in t.data_mut() {
            *v = self.normal();
        }
        t
    }
}
