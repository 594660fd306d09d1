use crate::error::{Error, Result};
use crate::numerics::{gelu, silu, Matrix};

/// Feed-forward block weights.
#[derive(Clone, Debug, PartialEq)]
pub enum FfnWeights {
    /// `GELU(x W_in + b_in) W_out + b_out`
    Gelu {
        w_in: Matrix,
        b_in: Matrix,
        w_out: Matrix,
        b_out: Matrix,
    },
    /// `(silu(x W_gate) ⊙ (x W_up)) W_down`
    SwiGlu {
        w_gate: Matrix,
        w_up: Matrix,
        w_down: Matrix,
    },
}

impl FfnWeights {
    pub fn hidden_dim(&self) -> usize {
        match self {
            FfnWeights::Gelu { w_in, .. } => w_in.cols(),
            FfnWeights::SwiGlu { w_gate, .. } => w_gate.cols(),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            FfnWeights::Gelu {
                w_in,
                b_in,
                w_out,
                b_out,
            } => w_in.len() + b_in.len() + w_out.len() + b_out.len(),
            FfnWeights::SwiGlu {
                w_gate,
                w_up,
                w_down,
            } => w_gate.len() + w_up.len() + w_down.len(),
        }
    }

    /// Drops hidden unit `j` from every matrix and bias it touches.
    pub fn remove_hidden(&mut self, j: usize) -> Result<()> {
        match self {
            FfnWeights::Gelu {
                w_in, b_in, w_out, ..
            } => {
                *w_in = w_in.remove_column(j)?;
                *b_in = b_in.remove_column(j)?;
                *w_out = w_out.remove_row(j)?;
            }
            FfnWeights::SwiGlu {
                w_gate,
                w_up,
                w_down,
            } => {
                *w_gate = w_gate.remove_column(j)?;
                *w_up = w_up.remove_column(j)?;
                *w_down = w_down.remove_row(j)?;
            }
        }
        Ok(())
    }
}

pub fn forward_ffn(x: &Matrix, w: &FfnWeights) -> Result<Matrix> {
    match w {
        FfnWeights::Gelu {
            w_in,
            b_in,
            w_out,
            b_out,
        } => {
            if b_in.shape() != (1, w_in.cols()) {
                return Err(Error::Shape {
                    op: "forward_ffn b_in",
                    left: w_in.shape(),
                    right: b_in.shape(),
                });
            }
            let h = x.matmul(w_in)?.add_row_broadcast(b_in)?.map(gelu);
            h.matmul(w_out)?.add_row_broadcast(b_out)
        }
        FfnWeights::SwiGlu {
            w_gate,
            w_up,
            w_down,
        } => {
            let g = x.matmul(w_gate)?.map(silu);
            let u = x.matmul(w_up)?;
            g.hadamard(&u)?.matmul(w_down)
        }
    }
}
