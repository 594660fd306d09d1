//! Feed-forward removal: the linearised bound and a coupled/uncoupled
//! comparison on a real model.

use crate::error::{Error, Result};
use crate::model::{Model, PairId, PairKind, Sample};
use crate::numerics::{gelu, gelu_prime, Matrix, Rng};
use crate::sparsifier::{coupled_remove_all, score_pair, uncoupled_remove};
use rayon::prelude::*;

/// Ranks with ties sharing their average rank.
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &o in &order[i..=j] {
            out[o] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation. `NaN` when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "paired samples");
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Both sides of the linearised bound for hidden unit `j`:
/// `(c‖X w_in,j‖‖w_out,j‖, c‖X‖_F‖w_in,j‖‖w_out,j‖)` with `c = GELU'(0)`.
pub fn linearized_bound(x: &Matrix, w_in_col: &[f64], w_out_row: &[f64]) -> Result<(f64, f64)> {
    let c = gelu_prime(0.0);
    let xw = x.matmul(&Matrix::column_vector(w_in_col))?;
    let out = norm(w_out_row);
    Ok((
        c * xw.frobenius_norm() * out,
        c * x.frobenius_norm() * norm(w_in_col) * out,
    ))
}

/// Exact output change from removing hidden unit `j` of a bias-free GELU block.
pub fn true_removal_error(x: &Matrix, w_in_col: &[f64], w_out_row: &[f64]) -> Result<f64> {
    let h = x.matmul(&Matrix::column_vector(w_in_col))?.map(gelu);
    Ok(h.frobenius_norm() * norm(w_out_row))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundReport {
    pub trials: usize,
    /// `(trial, hidden unit)` cases checked.
    pub cases: usize,
    pub violations: usize,
    pub mean_spearman: f64,
    pub min_spearman: f64,
}

/// Random blocks: `X` standard normal, `W_in ~ N(0, 1/d_m)`, `W_out ~ N(0, 1/d_ffn)`.
/// Hidden unit `j` additionally gets gains `e^{u₁}` on its input column and
/// `e^{u₂}` on its output row, `u ~ U(−unit_spread, unit_spread)`. With
/// `unit_spread = 0` all units are i.i.d. and their true errors differ only
/// by sampling noise.
pub fn ffn_bound_check(
    d_m: usize,
    d_ffn: usize,
    l: usize,
    trials: usize,
    seed: u64,
    unit_spread: f64,
) -> Result<BoundReport> {
    if d_m < 2 || d_ffn < 2 || l < 2 || trials == 0 {
        return Err(Error::Config(format!(
            "bound check needs dims >= 2 and trials >= 1, got d_m={d_m}, d_ffn={d_ffn}, l={l}, trials={trials}"
        )));
    }
    let per: Vec<(usize, f64)> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = Rng::derived(seed, t as u64);
            let x = rng.normal_matrix(l, d_m, 1.0);
            let mut w_in = rng.normal_matrix(d_m, d_ffn, 1.0 / (d_m as f64).sqrt());
            let mut w_out = rng.normal_matrix(d_ffn, d_m, 1.0 / (d_ffn as f64).sqrt());
            for j in 0..d_ffn {
                let g_in = rng.uniform_range(-unit_spread, unit_spread).exp();
                let g_out = rng.uniform_range(-unit_spread, unit_spread).exp();
                for r in 0..d_m {
                    w_in.set(r, j, w_in.get(r, j) * g_in);
                }
                for v in w_out.row_mut(j) {
                    *v *= g_out;
                }
            }
            let mut violations = 0;
            let mut metric = Vec::with_capacity(d_ffn);
            let mut truth = Vec::with_capacity(d_ffn);
            for j in 0..d_ffn {
                let col = w_in.col(j);
                let row = w_out.row(j);
                let (lhs, rhs) = linearized_bound(&x, &col, row)?;
                if lhs > rhs * (1.0 + 1e-12) {
                    violations += 1;
                }
                metric.push(norm(&col) * norm(row));
                truth.push(true_removal_error(&x, &col, row)?);
            }
            Ok((violations, spearman(&metric, &truth)))
        })
        .collect::<Result<_>>()?;
    let rhos: Vec<f64> = per.iter().map(|p| p.1).collect();
    Ok(BoundReport {
        trials,
        cases: trials * d_ffn,
        violations: per.iter().map(|p| p.0).sum(),
        mean_spearman: rhos.iter().sum::<f64>() / trials as f64,
        min_spearman: rhos.iter().copied().fold(f64::INFINITY, f64::min),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SparsityLoss {
    pub sparsity: f64,
    /// Feed-forward inner dimension kept in every layer.
    pub kept: usize,
    pub coupled_loss: f64,
    pub uncoupled_loss: f64,
}

/// Units kept out of `d` at `sparsity`: `⌈(1 − sparsity)·d⌉`.
pub fn kept_units(d: usize, sparsity: f64) -> usize {
    (((1.0 - sparsity) * d as f64) - 1e-9).ceil().max(0.0) as usize
}

/// One-shot feed-forward pruning of every layer to each sparsity level,
/// coupled (lowest-score units) versus uncoupled (lowest-norm input columns
/// and output rows chosen independently). Levels are relative to the
/// model's current feed-forward width.
pub fn ffn_coupled_vs_uncoupled(
    model: &Model,
    sparsity_levels: &[f64],
    eval_batch: &[Sample],
    min_inner_dim: usize,
) -> Result<Vec<SparsityLoss>> {
    let layers = model.config().layers;
    let mut out = Vec::with_capacity(sparsity_levels.len());
    for &s in sparsity_levels {
        if !(0.0..1.0).contains(&s) {
            return Err(Error::Config(format!("sparsity must lie in [0, 1), got {s}")));
        }
        let mut coupled = model.clone();
        let mut uncoupled = model.clone();
        let mut kept = usize::MAX;
        for layer in 0..layers {
            let id = PairId::new(layer, PairKind::Io, 0);
            let pair = model.pair(id)?;
            let d = pair.inner_dim();
            let keep = kept_units(d, s);
            if keep < min_inner_dim {
                return Err(Error::BelowFloor {
                    pair: id.to_string(),
                    floor: min_inner_dim,
                });
            }
            kept = kept.min(keep);
            let count = d - keep;
            if count == 0 {
                continue;
            }
            let scores = score_pair(&pair)?.scores;
            let mut order: Vec<usize> = (0..d).collect();
            order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
            coupled_remove_all(&mut coupled, id, &order[..count], min_inner_dim, &mut ())?;
            uncoupled_remove(&mut uncoupled, id, count, min_inner_dim, &mut ())?;
        }
        out.push(SparsityLoss {
            sparsity: s,
            kept,
            coupled_loss: coupled.eval_loss(eval_batch)?,
            uncoupled_loss: uncoupled.eval_loss(eval_batch)?,
        });
    }
    Ok(out)
}
