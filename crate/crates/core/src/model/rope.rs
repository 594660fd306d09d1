//! Rotary position tables.
//!
//! A table holds one frequency per 2-dim rotation block. Position `t` maps to
//! the block-diagonal matrix `P_t` with blocks
//! `[[cos tθ, sin tθ], [-sin tθ, cos tθ]]`, applied on the right of row
//! vectors: `RoPE(x)_t = x_t P_t`. Blocks removed by sparsification take
//! their frequency with them, so the surviving blocks keep rotating exactly
//! as before.

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;

#[derive(Clone, Debug, PartialEq)]
pub struct RopeTable {
    freqs: Vec<f64>,
}

impl RopeTable {
    /// `θ_j = base^(-2j/d)` for `j = 1..=d/2`.
    pub fn standard(head_dim: usize, base: f64) -> Result<Self> {
        if head_dim == 0 || head_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "rotary embedding needs an even, nonzero dimension, got {head_dim}"
            )));
        }
        let d = head_dim as f64;
        let freqs = (1..=head_dim / 2)
            .map(|j| base.powf(-2.0 * j as f64 / d))
            .collect();
        Ok(Self { freqs })
    }

    pub fn from_freqs(freqs: Vec<f64>) -> Self {
        Self { freqs }
    }

    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }

    pub fn blocks(&self) -> usize {
        self.freqs.len()
    }

    pub fn dims(&self) -> usize {
        2 * self.freqs.len()
    }

    pub fn remove_block(&mut self, block: usize) -> Result<()> {
        if block >= self.freqs.len() {
            return Err(Error::IndexOutOfRange {
                op: "rope remove_block",
                index: block,
                len: self.freqs.len(),
            });
        }
        self.freqs.remove(block);
        Ok(())
    }

    /// Dense `P_t`.
    pub fn rotation(&self, position: usize) -> Matrix {
        let d = self.dims();
        let mut p = Matrix::zeros(d, d);
        for (b, &theta) in self.freqs.iter().enumerate() {
            let (s, c) = (position as f64 * theta).sin_cos();
            let i = 2 * b;
            p.set(i, i, c);
            p.set(i, i + 1, s);
            p.set(i + 1, i, -s);
            p.set(i + 1, i + 1, c);
        }
        p
    }

    fn check(&self, m: &Matrix, positions: &[usize], op: &'static str) -> Result<()> {
        if m.cols() != self.dims() || m.rows() != positions.len() {
            return Err(Error::Shape {
                op,
                left: m.shape(),
                right: (positions.len(), self.dims()),
            });
        }
        Ok(())
    }

    /// Row `t` of the result is `m_t P_{positions[t]}`.
    pub fn rotate_rows(&self, m: &Matrix, positions: &[usize]) -> Result<Matrix> {
        self.check(m, positions, "rotate_rows")?;
        Ok(self.apply(m, positions, 1.0))
    }

    /// Row `t` of the result is `m_t P_{positions[t]}ᵀ`.
    pub fn rotate_rows_transposed(&self, m: &Matrix, positions: &[usize]) -> Result<Matrix> {
        self.check(m, positions, "rotate_rows_transposed")?;
        Ok(self.apply(m, positions, -1.0))
    }

    fn apply(&self, m: &Matrix, positions: &[usize], sign: f64) -> Matrix {
        let mut out = m.clone();
        for (t, &pos) in positions.iter().enumerate() {
            let row = out.row_mut(t);
            for (b, &theta) in self.freqs.iter().enumerate() {
                let (s, c) = (pos as f64 * theta).sin_cos();
                let s = sign * s;
                let (x0, x1) = (row[2 * b], row[2 * b + 1]);
                row[2 * b] = x0 * c - x1 * s;
                row[2 * b + 1] = x0 * s + x1 * c;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn frequencies_follow_base_power() {
        let t = RopeTable::standard(8, DEFAULT_ROPE_BASE).unwrap();
        assert_eq!(t.blocks(), 4);
        for (j, &f) in t.freqs().iter().enumerate() {
            let expected = 1.0 / 10_000f64.powf(2.0 * (j + 1) as f64 / 8.0);
            assert!((f - expected).abs() < 1e-18);
        }
        assert!(RopeTable::standard(7, DEFAULT_ROPE_BASE).is_err());
    }

    #[test]
    fn blocks_are_rotations() {
        let t = RopeTable::standard(8, DEFAULT_ROPE_BASE).unwrap();
        for pos in [0, 1, 5, 63] {
            let p = t.rotation(pos);
            let ptp = p.transpose().matmul(&p).unwrap();
            assert!(ptp.max_abs_diff(&Matrix::identity(8)).unwrap() <= 1e-12);
            for b in 0..4 {
                let i = 2 * b;
                let det = p.get(i, i) * p.get(i + 1, i + 1) - p.get(i, i + 1) * p.get(i + 1, i);
                assert!((det - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn row_rotation_matches_dense_product() {
        let t = RopeTable::standard(6, DEFAULT_ROPE_BASE).unwrap();
        let m = Rng::new(1).normal_matrix(4, 6, 1.0);
        let positions = [0, 3, 1, 7];
        let fast = t.rotate_rows(&m, &positions).unwrap();
        let back = t.rotate_rows_transposed(&fast, &positions).unwrap();
        assert!(back.max_abs_diff(&m).unwrap() < 1e-12);
        for (r, &pos) in positions.iter().enumerate() {
            let row = Matrix::row_vector(m.row(r));
            let dense = row.matmul(&t.rotation(pos)).unwrap();
            for j in 0..6 {
                assert!((dense.get(0, j) - fast.get(r, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn removing_a_block_keeps_the_others() {
        let mut t = RopeTable::standard(8, DEFAULT_ROPE_BASE).unwrap();
        let before = t.freqs().to_vec();
        t.remove_block(1).unwrap();
        assert_eq!(t.freqs(), &[before[0], before[2], before[3]]);
        assert!(t.remove_block(3).is_err());
    }
}
