use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::matrix::Matrix;
use crate::error::{invalid, Result};

/// Deterministic random source identified by `(seed, stream)`. Distinct
/// streams under one seed give independent sequences.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Fresh generator on another stream of the same seed.
    pub fn substream(&self, stream: u64) -> Self {
        Self::new(self.seed, stream)
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn normal(&mut self, std: f64) -> f64 {
        std * self.standard_normal()
    }

    pub fn normal_vec(&mut self, len: usize, std: f64) -> Vec<f64> {
        (0..len).map(|_| self.normal(std)).collect()
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform direction on the unit sphere of R^dim.
    pub fn unit_vector(&mut self, dim: usize) -> Vec<f64> {
        loop {
            let v = self.normal_vec(dim, 1.0);
            let norm = super::matrix::norm2(&v);
            if norm > 1e-12 {
                return v.into_iter().map(|x| x / norm).collect();
            }
        }
    }
}

/// Matrix with i.i.d. `N(0, std²)` entries.
pub fn gaussian_matrix(rows: usize, cols: usize, std: f64, rng: &mut SeededRng) -> Result<Matrix> {
    if !(std > 0.0) || !std.is_finite() {
        return invalid(format!("gaussian std must be positive and finite, got {std}"));
    }
    Ok(Matrix::from_fn(rows, cols, |_, _| rng.normal(std)))
}
