use super::Matrix;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Seeded random stream. Same seed gives the same stream on every platform.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream `stream` under `seed`; used to give each trial or
    /// worker its own generator regardless of scheduling.
    pub fn derived(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal_matrix(&mut self, rows: usize, cols: usize, std: f64) -> Matrix {
        let data = (0..rows * cols).map(|_| std * self.standard_normal()).collect();
        Matrix::from_vec(rows, cols, data).expect("length matches by construction")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_fill() {
        let a = Rng::new(42).normal_matrix(5, 7, 1.0);
        let b = Rng::new(42).normal_matrix(5, 7, 1.0);
        assert_eq!(a.data(), b.data());
        let c = Rng::new(43).normal_matrix(5, 7, 1.0);
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn derived_streams_differ() {
        let a = Rng::derived(1, 0).normal_matrix(2, 2, 1.0);
        let b = Rng::derived(1, 1).normal_matrix(2, 2, 1.0);
        assert_ne!(a, b);
        assert_eq!(a, Rng::derived(1, 0).normal_matrix(2, 2, 1.0));
    }

    #[test]
    fn normal_fill_has_unit_scale() {
        let m = Rng::new(9).normal_matrix(200, 200, 1.0);
        let n = m.len() as f64;
        let mean = m.sum() / n;
        let var = m.sum_of_squares() / n - mean * mean;
        assert!(mean.abs() < 0.02);
        assert!((var - 1.0).abs() < 0.03);
    }
}
