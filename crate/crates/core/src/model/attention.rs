//! Reference (non-differentiable) attention forwards.
//!
//! Three formulations of the same layer are kept side by side: the usual
//! concat-then-project form, the per-head sum over explicit `W^QK = W^Q W^Kᵀ`
//! and `W^VO = W^V W^O` products, and its grouped-query generalisation. The
//! training path lives on the tape in `transformer.rs`.

use crate::error::{Error, Result};
use crate::model::rope::RopeTable;
use crate::numerics::{softmax_rows, Matrix};

/// Additive mask entry for disallowed positions.
pub const MASK_VALUE: f64 = -1e9;

/// `l × l` additive causal mask: 0 on and below the diagonal, [`MASK_VALUE`] above.
pub fn causal_mask(l: usize) -> Matrix {
    let mut m = Matrix::zeros(l, l);
    for t in 0..l {
        for s in t + 1..l {
            m.set(t, s, MASK_VALUE);
        }
    }
    m
}

/// One attention layer. `q[i]`, `o[i]` are per query head; `k[g]`, `v[g]` per
/// key/value group. Rotary tables follow the same indexing.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    pub q: Vec<Matrix>,
    pub k: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub o: Vec<Matrix>,
    pub rope_q: Option<Vec<RopeTable>>,
    pub rope_k: Option<Vec<RopeTable>>,
}

impl AttentionWeights {
    pub fn heads(&self) -> usize {
        self.q.len()
    }

    pub fn groups(&self) -> usize {
        self.k.len()
    }

    pub fn group_of(&self, head: usize) -> usize {
        head / (self.heads() / self.groups())
    }

    pub fn validate(&self) -> Result<()> {
        let (h, g) = (self.heads(), self.groups());
        if h == 0 || g == 0 || h % g != 0 || self.v.len() != g || self.o.len() != h {
            return Err(Error::Config(format!(
                "invalid grouping: {h} query heads, {g} key groups, {} value groups, {} output blocks",
                self.v.len(),
                self.o.len()
            )));
        }
        for i in 0..h {
            let gi = self.group_of(i);
            let (q, k, v, o) = (&self.q[i], &self.k[gi], &self.v[gi], &self.o[i]);
            if q.shape() != k.shape() {
                return Err(Error::Shape {
                    op: "attention q/k",
                    left: q.shape(),
                    right: k.shape(),
                });
            }
            if v.cols() != o.rows() || v.rows() != o.cols() {
                return Err(Error::Shape {
                    op: "attention v/o",
                    left: v.shape(),
                    right: o.shape(),
                });
            }
            if let (Some(rq), Some(rk)) = (&self.rope_q, &self.rope_k) {
                if q.cols() % 2 != 0 {
                    return Err(Error::Config(format!(
                        "head {i} has odd inner dimension {} with rope on",
                        q.cols()
                    )));
                }
                if rq[i].dims() != q.cols() || rk[gi].dims() != k.cols() {
                    return Err(Error::Shape {
                        op: "attention rope tables",
                        left: (rq[i].dims(), rk[gi].dims()),
                        right: (q.cols(), k.cols()),
                    });
                }
            }
        }
        Ok(())
    }

    fn tables(&self, head: usize) -> Option<(&RopeTable, &RopeTable)> {
        match (&self.rope_q, &self.rope_k) {
            (Some(rq), Some(rk)) => Some((&rq[head], &rk[self.group_of(head)])),
            _ => None,
        }
    }
}

fn check_inputs(xq: &Matrix, xk: &Matrix, xv: &Matrix, w: &AttentionWeights) -> Result<()> {
    let d_m = w.q[0].rows();
    for x in [xq, xk, xv] {
        if x.cols() != d_m {
            return Err(Error::Shape {
                op: "attention input",
                left: x.shape(),
                right: w.q[0].shape(),
            });
        }
    }
    if xk.rows() != xv.rows() {
        return Err(Error::Shape {
            op: "attention keys/values",
            left: xk.shape(),
            right: xv.shape(),
        });
    }
    Ok(())
}

fn attend(scores: Matrix, inner: usize, mask: Option<&Matrix>) -> Result<Matrix> {
    let mut s = scores.scale(1.0 / (inner as f64).sqrt());
    if let Some(m) = mask {
        s = s.add(m)?;
    }
    Ok(softmax_rows(&s))
}

fn positions(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// `RoPE(X_Q W^Q) · RoPE(X_K W^K)ᵀ`, positions counted from 0 in each input.
pub fn rope_scores_rotated(
    xq: &Matrix,
    xk: &Matrix,
    wq: &Matrix,
    wk: &Matrix,
    table_q: &RopeTable,
    table_k: &RopeTable,
) -> Result<Matrix> {
    check_rope(wq, wk, table_q, table_k)?;
    let q = table_q.rotate_rows(&xq.matmul(wq)?, &positions(xq.rows()))?;
    let k = table_k.rotate_rows(&xk.matmul(wk)?, &positions(xk.rows()))?;
    q.matmul_transposed(&k)
}

/// Entry `(t, s)` is `x_t (W^Q P_t)(W^K P_s)ᵀ x_sᵀ`, with the position-dependent
/// coupled matrix formed explicitly for every pair of positions.
pub fn rope_scores_coupled(
    xq: &Matrix,
    xk: &Matrix,
    wq: &Matrix,
    wk: &Matrix,
    table_q: &RopeTable,
    table_k: &RopeTable,
) -> Result<Matrix> {
    check_rope(wq, wk, table_q, table_k)?;
    let rotated_k: Vec<Matrix> = (0..xk.rows())
        .map(|s| wk.matmul(&table_k.rotation(s)))
        .collect::<Result<_>>()?;
    let mut out = Matrix::zeros(xq.rows(), xk.rows());
    for t in 0..xq.rows() {
        let wq_t = wq.matmul(&table_q.rotation(t))?;
        let x_t = Matrix::row_vector(xq.row(t));
        for (s, wk_s) in rotated_k.iter().enumerate() {
            let w_qk = wq_t.matmul_transposed(wk_s)?;
            let x_s = Matrix::row_vector(xk.row(s));
            out.set(t, s, x_t.matmul(&w_qk)?.matmul_transposed(&x_s)?.get(0, 0));
        }
    }
    Ok(out)
}

fn check_rope(wq: &Matrix, wk: &Matrix, tq: &RopeTable, tk: &RopeTable) -> Result<()> {
    if wq.cols() % 2 != 0 || wk.cols() % 2 != 0 {
        return Err(Error::Config(format!(
            "odd inner dimension {} with rope on",
            if wq.cols() % 2 != 0 { wq.cols() } else { wk.cols() }
        )));
    }
    if wq.shape() != wk.shape() || tq.dims() != wq.cols() || tk.dims() != wk.cols() {
        return Err(Error::Shape {
            op: "rope scores",
            left: wq.shape(),
            right: (wk.rows(), tk.dims()),
        });
    }
    Ok(())
}

fn head_scores(xq: &Matrix, xk: &Matrix, w: &AttentionWeights, i: usize) -> Result<Matrix> {
    let g = w.group_of(i);
    match w.tables(i) {
        Some((tq, tk)) => rope_scores_rotated(xq, xk, &w.q[i], &w.k[g], tq, tk),
        None => xq.matmul(&w.q[i])?.matmul_transposed(&xk.matmul(&w.k[g])?),
    }
}

/// `Concat(head_1, …, head_h) W^O` with `W^O` the row-stack of the per-head blocks.
pub fn forward_mha_standard(
    xq: &Matrix,
    xk: &Matrix,
    xv: &Matrix,
    w: &AttentionWeights,
    mask: Option<&Matrix>,
) -> Result<Matrix> {
    w.validate()?;
    check_inputs(xq, xk, xv, w)?;
    let mut heads = Vec::with_capacity(w.heads());
    for i in 0..w.heads() {
        let a = attend(head_scores(xq, xk, w, i)?, w.q[i].cols(), mask)?;
        heads.push(a.matmul(&xv.matmul(&w.v[w.group_of(i)])?)?);
    }
    let concat = Matrix::concat_cols(&heads.iter().collect::<Vec<_>>())?;
    let w_o = Matrix::concat_rows(&w.o.iter().collect::<Vec<_>>())?;
    concat.matmul(&w_o)
}

/// `Σ_i softmax(X_Q W_i^QK X_Kᵀ / √d_i) X_V W_i^VO`; requires one key group per head.
pub fn forward_mha_coupled(
    xq: &Matrix,
    xk: &Matrix,
    xv: &Matrix,
    w: &AttentionWeights,
    mask: Option<&Matrix>,
) -> Result<Matrix> {
    if w.groups() != w.heads() {
        return Err(Error::Config(format!(
            "multi-head form needs one key group per head, got {} groups for {} heads",
            w.groups(),
            w.heads()
        )));
    }
    coupled_sum(xq, xk, xv, w, mask)
}

/// Coupled form with head `i` reading keys and values from group `g(i)`.
pub fn forward_gqa(
    xq: &Matrix,
    xk: &Matrix,
    xv: &Matrix,
    w: &AttentionWeights,
    mask: Option<&Matrix>,
) -> Result<Matrix> {
    coupled_sum(xq, xk, xv, w, mask)
}

fn coupled_sum(
    xq: &Matrix,
    xk: &Matrix,
    xv: &Matrix,
    w: &AttentionWeights,
    mask: Option<&Matrix>,
) -> Result<Matrix> {
    w.validate()?;
    check_inputs(xq, xk, xv, w)?;
    let mut out = Matrix::zeros(xq.rows(), w.o[0].cols());
    for i in 0..w.heads() {
        let g = w.group_of(i);
        let scores = match w.tables(i) {
            Some((tq, tk)) => rope_scores_coupled(xq, xk, &w.q[i], &w.k[g], tq, tk)?,
            None => {
                let w_qk = w.q[i].matmul_transposed(&w.k[g])?;
                xq.matmul(&w_qk)?.matmul_transposed(xk)?
            }
        };
        let a = attend(scores, w.q[i].cols(), mask)?;
        let w_vo = w.v[g].matmul(&w.o[i])?;
        out.add_assign(&a.matmul(&xv.matmul(&w_vo)?)?)?;
    }
    Ok(out)
}
