//! Reverse-mode differentiation over the closed operator set of the model.
//!
//! Forward operations evaluate eagerly and append a node to the [`Tape`];
//! [`Tape::backward`] walks the nodes in reverse recording order, which is a
//! topological order by construction. Gradients accumulate additively where a
//! node feeds several consumers.

use crate::error::{Error, Result};
use crate::model::rope::RopeTable;
use crate::numerics::{self, Matrix};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Softmax(Var),
    Gelu(Var),
    Silu(Var),
    Hadamard(Var, Var),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    RowGather {
        table: Var,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Matrix,
    },
    Rope {
        x: Var,
        table: RopeTable,
        positions: Vec<usize>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    differentiated: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of `v`, or `None` when no path connects it to the loss.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zero-filled when `v` does not reach the loss.
    pub fn get_or_zeros(&self, v: Var) -> Matrix {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, v: Var) -> Matrix {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// `x + 1·row`, broadcasting a `1 × n` row over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let value = self.value(x).add_row_broadcast(self.value(row))?;
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(value, Op::AddRow(x, row), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).scale(s);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, s), rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let value = numerics::softmax_rows(self.value(x));
        let rg = self.rg(x);
        self.push(value, Op::Softmax(x), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(numerics::gelu);
        let rg = self.rg(x);
        self.push(value, Op::Gelu(x), rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(numerics::silu);
        let rg = self.rg(x);
        self.push(value, Op::Silu(x), rg)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Hadamard(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).transpose();
        let rg = self.rg(x);
        self.push(value, Op::Transpose(x), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mats: Vec<&Matrix> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Matrix::concat_cols(&mats)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Embedding lookup: row `t` of the result is row `ids[t]` of `table`.
    pub fn row_gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let mut value = Matrix::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            if id >= t.rows() {
                return Err(Error::IndexOutOfRange {
                    op: "row_gather",
                    index: id,
                    len: t.rows(),
                });
            }
            value.row_mut(r).copy_from_slice(t.row(id));
        }
        let rg = self.rg(table);
        Ok(self.push(
            value,
            Op::RowGather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Per-row normalisation with a `1 × n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        let (g, b) = (self.value(gain), self.value(bias));
        if g.shape() != (1, n) || b.shape() != (1, n) {
            return Err(Error::Shape {
                op: "layer_norm",
                left: xv.shape(),
                right: g.shape(),
            });
        }
        let mut xhat = Matrix::zeros(xv.rows(), n);
        let mut inv_std = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let mut value = xhat.clone();
        for r in 0..value.rows() {
            for ((o, gi), bi) in value.row_mut(r).iter_mut().zip(g.data()).zip(b.data()) {
                *o = *o * gi + bi;
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Mean next-token cross-entropy over the rows of `logits`; yields a 1×1 node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rows() != targets.len() || lv.rows() == 0 {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: lv.shape(),
                right: (targets.len(), 1),
            });
        }
        let vocab = lv.cols();
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::TargetOutOfRange { target: bad, vocab });
        }
        let probs = numerics::softmax_rows(lv);
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
        }
        loss /= targets.len() as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Matrix::filled(1, 1, loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Rotary embedding: row `t` becomes `x_t P_{positions[t]}`.
    pub fn rope(&mut self, x: Var, table: &RopeTable, positions: &[usize]) -> Result<Var> {
        let value = table.rotate_rows(self.value(x), positions)?;
        let rg = self.rg(x);
        Ok(self.push(
            value,
            Op::Rope {
                x,
                table: table.clone(),
                positions: positions.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Matrix::filled(1, 1, self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum(x), rg)
    }

    /// Back-propagates from the scalar node `loss`. A tape can be
    /// differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::UnknownNode);
        }
        if self.differentiated {
            return Err(Error::AlreadyDifferentiated);
        }
        let (r, c) = self.value(loss).shape();
        if (r, c) != (1, 1) {
            return Err(Error::NonScalarLoss(r, c));
        }
        self.differentiated = true;

        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let push = |v: Var, g: Matrix, grads: &mut Vec<Option<Matrix>>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&g).expect("gradient shape tracks value shape"),
                    slot @ None => *slot = Some(g),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(upstream);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.rg(*a) {
                        push(*a, upstream.matmul_transposed(bv)?, &mut grads);
                    }
                    if self.rg(*b) {
                        push(*b, av.transposed_matmul(&upstream)?, &mut grads);
                    }
                }
                Op::Add(a, b) => {
                    push(*a, upstream.clone(), &mut grads);
                    push(*b, upstream, &mut grads);
                }
                Op::AddRow(x, row) => {
                    if self.rg(*row) {
                        let mut acc = Matrix::zeros(1, upstream.cols());
                        for r in 0..upstream.rows() {
                            for (a, g) in acc.data_mut().iter_mut().zip(upstream.row(r)) {
                                *a += g;
                            }
                        }
                        push(*row, acc, &mut grads);
                    }
                    push(*x, upstream, &mut grads);
                }
                Op::Scale(x, s) => push(*x, upstream.scale(*s), &mut grads),
                Op::Softmax(x) => {
                    let y = &node.value;
                    let mut dx = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), upstream.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, &yi), &gi) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o = yi * (gi - dot);
                        }
                    }
                    push(*x, dx, &mut grads);
                }
                Op::Gelu(x) => {
                    let d = self.value(*x).map(numerics::gelu_prime);
                    push(*x, upstream.hadamard(&d)?, &mut grads);
                }
                Op::Silu(x) => {
                    let d = self.value(*x).map(numerics::silu_prime);
                    push(*x, upstream.hadamard(&d)?, &mut grads);
                }
                Op::Hadamard(a, b) => {
                    if self.rg(*a) {
                        push(*a, upstream.hadamard(self.value(*b))?, &mut grads);
                    }
                    if self.rg(*b) {
                        push(*b, upstream.hadamard(self.value(*a))?, &mut grads);
                    }
                }
                Op::Transpose(x) => push(*x, upstream.transpose(), &mut grads),
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.value(*p).cols();
                        if self.rg(*p) {
                            push(*p, upstream.column_block(start, w), &mut grads);
                        }
                        start += w;
                    }
                }
                Op::RowGather { table, ids } => {
                    let (tr, tc) = self.value(*table).shape();
                    let mut dt = Matrix::zeros(tr, tc);
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, g) in dt.row_mut(id).iter_mut().zip(upstream.row(r)) {
                            *o += g;
                        }
                    }
                    push(*table, dt, &mut grads);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let g = self.value(*gain);
                    let n = xhat.cols() as f64;
                    let mut dgain = Matrix::zeros(1, xhat.cols());
                    let mut dbias = Matrix::zeros(1, xhat.cols());
                    let mut dx = Matrix::zeros(xhat.rows(), xhat.cols());
                    for r in 0..xhat.rows() {
                        let (xh, up) = (xhat.row(r), upstream.row(r));
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for j in 0..xh.len() {
                            dgain.data_mut()[j] += up[j] * xh[j];
                            dbias.data_mut()[j] += up[j];
                            let d = up[j] * g.data()[j];
                            sum_d += d;
                            sum_dx += d * xh[j];
                        }
                        let is = inv_std[r];
                        let out = dx.row_mut(r);
                        for j in 0..xh.len() {
                            let d = up[j] * g.data()[j];
                            out[j] = is / n * (n * d - sum_d - xh[j] * sum_dx);
                        }
                    }
                    push(*gain, dgain, &mut grads);
                    push(*bias, dbias, &mut grads);
                    push(*x, dx, &mut grads);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let scale = upstream.get(0, 0) / targets.len() as f64;
                    let mut d = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        let row = d.row_mut(r);
                        row[t] -= 1.0;
                        for v in row.iter_mut() {
                            *v *= scale;
                        }
                    }
                    push(*logits, d, &mut grads);
                }
                Op::Rope {
                    x,
                    table,
                    positions,
                } => {
                    push(*x, table.rotate_rows_transposed(&upstream, positions)?, &mut grads);
                }
                Op::Sum(x) => {
                    let (r, c) = self.value(*x).shape();
                    push(*x, Matrix::filled(r, c, upstream.get(0, 0)), &mut grads);
                }
            }
        }

        // Only leaves keep their gradient; intermediates were consumed above.
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    /// Central finite difference of `f` at every entry of `x`, compared with `analytic`.
    fn check_grad(x: &Matrix, analytic: &Matrix, f: impl Fn(&Matrix) -> f64) {
        let h = 1e-5;
        for i in 0..x.len() {
            let mut plus = x.clone();
            plus.data_mut()[i] += h;
            let mut minus = x.clone();
            minus.data_mut()[i] -= h;
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = (a - fd).abs() / (a.abs() + fd.abs()).max(1e-8);
            assert!(rel <= 1e-4, "entry {i}: analytic {a}, fd {fd}");
        }
    }

    /// Builds `loss = Σ (op(x) ⊙ w)` for a fixed random weighting `w` so every
    /// output entry contributes to the scalar.
    fn probe(x: &Matrix, out_shape: (usize, usize), op: impl Fn(&mut Tape, Var) -> Var) -> (Matrix, f64) {
        let w = Rng::new(99).normal_matrix(out_shape.0, out_shape.1, 1.0);
        let mut tape = Tape::new();
        let xv = tape.param(x.clone());
        let y = op(&mut tape, xv);
        let wv = tape.constant(w);
        let prod = tape.hadamard(y, wv).unwrap();
        let loss = tape.sum(prod);
        let value = tape.value(loss).get(0, 0);
        let grads = tape.backward(loss).unwrap();
        (grads.get_or_zeros(xv), value)
    }

    fn probe_value(x: &Matrix, out_shape: (usize, usize), op: &impl Fn(&mut Tape, Var) -> Var) -> f64 {
        let w = Rng::new(99).normal_matrix(out_shape.0, out_shape.1, 1.0);
        let mut tape = Tape::new();
        let xv = tape.param(x.clone());
        let y = op(&mut tape, xv);
        let wv = tape.constant(w);
        let prod = tape.hadamard(y, wv).unwrap();
        let loss = tape.sum(prod);
        tape.value(loss).get(0, 0)
    }

    fn gradcheck_unary(x: Matrix, out_shape: (usize, usize), op: impl Fn(&mut Tape, Var) -> Var) {
        let (g, _) = probe(&x, out_shape, &op);
        check_grad(&x, &g, |m| probe_value(m, out_shape, &op));
    }

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::new();
        let w = tape.param(Matrix::from_rows(&[[1.0, -2.0], [3.0, 0.5]]));
        let loss = tape.sum(w);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get_or_zeros(w), Matrix::filled(2, 2, 1.0));
    }

    #[test]
    fn half_squared_norm_gives_w() {
        let wm = Rng::new(2).normal_matrix(3, 4, 1.0);
        let mut tape = Tape::new();
        let w = tape.param(wm.clone());
        let sq = tape.hadamard(w, w).unwrap();
        let s = tape.sum(sq);
        let loss = tape.scale(s, 0.5);
        let g = tape.backward(loss).unwrap();
        assert!(g.get_or_zeros(w).max_abs_diff(&wm).unwrap() < 1e-15);
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let mut tape = Tape::new();
        let logits = tape.param(Matrix::filled(3, 7, 0.3));
        let loss = tape.cross_entropy(logits, &[0, 4, 6]).unwrap();
        assert!((tape.value(loss).get(0, 0) - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_targets() {
        let mut tape = Tape::new();
        let logits = tape.param(Matrix::zeros(2, 3));
        assert!(matches!(
            tape.cross_entropy(logits, &[0, 3]),
            Err(Error::TargetOutOfRange { target: 3, vocab: 3 })
        ));
        assert!(matches!(tape.cross_entropy(logits, &[0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn gelu_on_tape_matches_numerics_exactly() {
        let x = Rng::new(4).normal_matrix(3, 3, 2.0);
        let mut tape = Tape::new();
        let v = tape.param(x.clone());
        let y = tape.gelu(v);
        assert_eq!(tape.value(y), &x.map(numerics::gelu));
    }

    #[test]
    fn errors_on_non_scalar_unknown_and_repeat() {
        let mut tape = Tape::new();
        let w = tape.param(Matrix::zeros(2, 2));
        assert!(matches!(tape.backward(w), Err(Error::NonScalarLoss(2, 2))));
        assert!(matches!(tape.backward(Var(10)), Err(Error::UnknownNode)));
        let s = tape.sum(w);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::AlreadyDifferentiated)));
    }

    #[test]
    fn unused_params_get_exact_zero() {
        let mut tape = Tape::new();
        let a = tape.param(Matrix::filled(2, 2, 1.0));
        let unused = tape.param(Matrix::filled(3, 1, 5.0));
        let loss = tape.sum(a);
        let g = tape.backward(loss).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(g.get_or_zeros(unused), Matrix::zeros(3, 1));
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let a = tape.param(Matrix::filled(1, 2, 3.0));
        let b = tape.add(a, a).unwrap();
        let c = tape.add(b, a).unwrap();
        let loss = tape.sum(c);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get_or_zeros(a), Matrix::filled(1, 2, 3.0));
    }

    #[test]
    fn primitives_pass_gradient_check() {
        let mut rng = Rng::new(31);
        let x = rng.normal_matrix(3, 4, 1.0);
        let other = rng.normal_matrix(4, 5, 1.0);
        let same = rng.normal_matrix(3, 4, 1.0);
        let row = rng.normal_matrix(1, 4, 1.0);
        let gain = rng.normal_matrix(1, 4, 1.0);

        gradcheck_unary(x.clone(), (3, 5), |t, v| {
            let o = t.constant(other.clone());
            t.matmul(v, o).unwrap()
        });
        gradcheck_unary(other.clone(), (3, 5), |t, v| {
            let o = t.constant(x.clone());
            t.matmul(o, v).unwrap()
        });
        gradcheck_unary(x.clone(), (3, 4), |t, v| {
            let o = t.constant(same.clone());
            t.add(v, o).unwrap()
        });
        gradcheck_unary(row.clone(), (3, 4), |t, v| {
            let o = t.constant(x.clone());
            t.add_row(o, v).unwrap()
        });
        gradcheck_unary(x.clone(), (3, 4), |t, v| t.scale(v, -1.7));
        gradcheck_unary(x.clone(), (3, 4), |t, v| t.softmax_rows(v));
        gradcheck_unary(x.clone(), (3, 4), |t, v| t.gelu(v));
        gradcheck_unary(x.clone(), (3, 4), |t, v| t.silu(v));
        gradcheck_unary(x.clone(), (3, 4), |t, v| {
            let o = t.constant(same.clone());
            t.hadamard(v, o).unwrap()
        });
        gradcheck_unary(x.clone(), (4, 3), |t, v| t.transpose(v));
        gradcheck_unary(x.clone(), (3, 9), |t, v| {
            let o = t.constant(Matrix::filled(3, 5, 0.5));
            t.concat_cols(&[v, o]).unwrap()
        });
        gradcheck_unary(x.clone(), (5, 4), |t, v| t.row_gather(v, &[2, 0, 2, 1, 0]).unwrap());
        gradcheck_unary(x.clone(), (3, 4), |t, v| {
            let g = t.constant(gain.clone());
            let b = t.constant(row.clone());
            t.layer_norm(v, g, b).unwrap()
        });
        gradcheck_unary(gain.clone(), (3, 4), |t, v| {
            let xx = t.constant(x.clone());
            let b = t.constant(row.clone());
            t.layer_norm(xx, v, b).unwrap()
        });
        gradcheck_unary(row.clone(), (3, 4), |t, v| {
            let xx = t.constant(x.clone());
            let g = t.constant(gain.clone());
            t.layer_norm(xx, g, v).unwrap()
        });
        let table = RopeTable::standard(4, 10_000.0).unwrap();
        gradcheck_unary(x.clone(), (3, 4), |t, v| t.rope(v, &table, &[0, 5, 2]).unwrap());
    }

    #[test]
    fn cross_entropy_gradient_check() {
        let logits = Rng::new(6).normal_matrix(4, 5, 1.0);
        let targets = [1, 4, 0, 4];
        let f = |m: &Matrix| {
            let mut t = Tape::new();
            let v = t.param(m.clone());
            let l = t.cross_entropy(v, &targets).unwrap();
            t.value(l).get(0, 0)
        };
        let mut t = Tape::new();
        let v = t.param(logits.clone());
        let l = t.cross_entropy(v, &targets).unwrap();
        let g = t.backward(l).unwrap().get_or_zeros(v);
        check_grad(&logits, &g, f);
    }

    #[test]
    fn two_layer_net_matches_hand_chain() {
        let mut rng = Rng::new(12);
        let x = rng.normal_matrix(4, 3, 1.0);
        let w1 = rng.normal_matrix(3, 6, 0.5);
        let w2 = rng.normal_matrix(6, 5, 0.5);
        let targets = [0, 2, 4, 1];

        let h = x.matmul(&w1).unwrap().map(numerics::gelu);
        let logits = h.matmul(&w2).unwrap();
        let p = numerics::softmax_rows(&logits);
        let expected: f64 =
            targets.iter().enumerate().map(|(r, &t)| -p.get(r, t).ln()).sum::<f64>() / 4.0;

        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let a = tape.param(w1);
        let b = tape.param(w2);
        let z = tape.matmul(xv, a).unwrap();
        let hz = tape.gelu(z);
        let lo = tape.matmul(hz, b).unwrap();
        let loss = tape.cross_entropy(lo, &targets).unwrap();
        assert!((tape.value(loss).get(0, 0) - expected).abs() <= 1e-12);
    }
}
