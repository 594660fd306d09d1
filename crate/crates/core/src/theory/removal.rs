//! Single-index removal error for a product `A B`, coupled versus individual.

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};
use rayon::prelude::*;
use std::io::Write;

fn check(a: &Matrix, b: &Matrix) -> Result<()> {
    if a.cols() != b.rows() {
        return Err(Error::Shape {
            op: "removal error",
            left: a.shape(),
            right: b.shape(),
        });
    }
    if a.cols() < 2 {
        return Err(Error::WouldEmpty("removal error"));
    }
    Ok(())
}

fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (j, v) in values.iter().enumerate() {
        if *v < values[best] {
            best = j;
        }
    }
    best
}

/// `j* = argmin_j ‖a_j‖‖b_j‖` and the Frobenius error of dropping it, which
/// is exactly that product.
pub fn coupled_removal_error(a: &Matrix, b: &Matrix) -> Result<(usize, f64)> {
    check(a, b)?;
    let products: Vec<f64> = a
        .column_norms()?
        .iter()
        .zip(b.row_norms()?)
        .map(|(x, y)| x * y)
        .collect();
    let j = argmin(&products);
    Ok((j, products[j]))
}

/// `AB − A'B'` where `A'` lacks column `k`, `B'` lacks row `l`, and the
/// survivors are paired by position. Only the band between `k` and `l`
/// contributes:
///
/// `k ≤ l`: `a_k b_kᵀ + Σ_{i=k+1..=l} a_i (b_i − b_{i−1})ᵀ`
/// `k > l`: `a_k b_kᵀ + Σ_{i=l..k} a_i (b_i − b_{i+1})ᵀ`
pub fn individual_delta(a: &Matrix, b: &Matrix, k: usize, l: usize) -> Result<Matrix> {
    check(a, b)?;
    let n = a.cols();
    if k >= n || l >= n {
        return Err(Error::IndexOutOfRange {
            op: "individual_delta",
            index: k.max(l),
            len: n,
        });
    }
    let mut left: Vec<Vec<f64>> = vec![a.col(k)];
    let mut right: Vec<Vec<f64>> = vec![b.row(k).to_vec()];
    let band: Vec<(usize, usize)> = if k <= l {
        (k + 1..=l).map(|i| (i, i - 1)).collect()
    } else {
        (l..k).map(|i| (i, i + 1)).collect()
    };
    for (i, other) in band {
        left.push(a.col(i));
        right.push(b.row(i).iter().zip(b.row(other)).map(|(x, y)| x - y).collect());
    }
    let m = left.len();
    let mut lm = Matrix::zeros(a.rows(), m);
    for (c, col) in left.iter().enumerate() {
        for (r, v) in col.iter().enumerate() {
            lm.set(r, c, *v);
        }
    }
    let rm = Matrix::from_rows(&right);
    lm.matmul(&rm)
}

/// `k*` = smallest column of `a`, `l*` = smallest row of `b` (independent
/// argmins), and the Frobenius error of dropping both.
pub fn individual_removal_error(a: &Matrix, b: &Matrix) -> Result<(usize, usize, f64)> {
    check(a, b)?;
    let na = a.column_norms()?;
    let nb = b.row_norms()?;
    let k = argmin(&na);
    let l = argmin(&nb);
    let err = if k == l {
        // Aligned by accident: the error is the single removed term.
        na[k] * nb[k]
    } else {
        individual_delta(a, b, k, l)?.frobenius_norm()
    };
    Ok((k, l, err))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrialResult {
    pub n: usize,
    pub err_coupled: f64,
    pub err_individual: f64,
    pub coupled_wins: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExperimentSummary {
    pub n: usize,
    pub trials: usize,
    pub seed: u64,
    pub avg_err_coupled: f64,
    pub avg_err_individual: f64,
    pub win_probability: f64,
}

/// One trial on a fresh pair of `n × n` standard-normal matrices.
pub fn run_trial(n: usize, rng: &mut Rng) -> Result<TrialResult> {
    let a = rng.normal_matrix(n, n, 1.0);
    let b = rng.normal_matrix(n, n, 1.0);
    let (_, err_coupled) = coupled_removal_error(&a, &b)?;
    let (_, _, err_individual) = individual_removal_error(&a, &b)?;
    Ok(TrialResult {
        n,
        err_coupled,
        err_individual,
        coupled_wins: err_coupled < err_individual,
    })
}

/// Trial `t` draws from stream `t` of `seed`, so the summary does not depend
/// on how trials are spread over threads.
pub fn run_comparison(n: usize, trials: usize, seed: u64) -> Result<ExperimentSummary> {
    if n < 2 || trials == 0 {
        return Err(Error::Config(format!(
            "comparison needs n >= 2 and at least one trial, got n={n}, trials={trials}"
        )));
    }
    let results: Vec<TrialResult> = (0..trials)
        .into_par_iter()
        .map(|t| run_trial(n, &mut Rng::derived(seed, t as u64)))
        .collect::<Result<_>>()?;
    Ok(summarize(n, seed, &results))
}

pub fn summarize(n: usize, seed: u64, results: &[TrialResult]) -> ExperimentSummary {
    let t = results.len() as f64;
    ExperimentSummary {
        n,
        trials: results.len(),
        seed,
        avg_err_coupled: results.iter().map(|r| r.err_coupled).sum::<f64>() / t,
        avg_err_individual: results.iter().map(|r| r.err_individual).sum::<f64>() / t,
        win_probability: results.iter().filter(|r| r.coupled_wins).count() as f64 / t,
    }
}

/// CSV with header `size,avg_coupled,avg_individual,win_probability,trials,seed`.
pub fn write_summary_csv<W: Write>(summaries: &[ExperimentSummary], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["size", "avg_coupled", "avg_individual", "win_probability", "trials", "seed"])?;
    for s in summaries {
        w.write_record([
            s.n.to_string(),
            format!("{:.6}", s.avg_err_coupled),
            format!("{:.6}", s.avg_err_individual),
            format!("{:.6}", s.win_probability),
            s.trials.to_string(),
            s.seed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
