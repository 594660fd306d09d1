//! Inner-dimension scoring, aligned removal and the gradual schedule.
//!
//! A pair's inner index `j` is scored by `‖col_j(W1)‖ · ‖axis_j(W2)‖`, the
//! exact Frobenius norm of the outer-product term it contributes to the
//! pair's product. Scores are ℓ2-normalised per pair.

mod schedule;
mod tsvd;

pub use schedule::{
    min_achievable_params, run_schedule_step, write_report_csv, Cadence, PairRemoval, Scope, SkippedPair,
    SparsifySchedule, StepReport, Strategy,
};
pub use tsvd::tsvd_reference;

use crate::error::{Error, Result};
use crate::model::{CoupledPair, Model, MomentSlicer, PairId, Side};

/// Default fraction of pairs visited per step.
pub const DEFAULT_TOP_K: f64 = 0.30;
/// Default retained score mass per visit.
pub const DEFAULT_THETA: f64 = 0.90;
pub const DEFAULT_MIN_INNER_DIM: usize = 2;

/// Slack on the cumulative-mass comparison so that exact fractions such as
/// `k/d == 1 − θ` are not lost to rounding.
const MASS_SLACK: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreVector {
    pub pair_id: PairId,
    /// One entry per removable unit: per dimension, or per 2-dim block for
    /// rotary QK pairs.
    pub scores: Vec<f64>,
}

/// Root-sum-square of consecutive groups of `size` entries.
pub fn unit_norms(per_dim: &[f64], size: usize) -> Vec<f64> {
    if size == 1 {
        return per_dim.to_vec();
    }
    per_dim
        .chunks(size)
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

/// Scores every unit of `pair`. Rotations are orthogonal per block, so block
/// norms of the rotated matrices equal those of the stored ones.
pub fn score_pair(pair: &CoupledPair) -> Result<ScoreVector> {
    let n1 = pair.w1_norms()?;
    let n2 = pair.w2_norms()?;
    if n1.len() != n2.len() {
        return Err(Error::Shape {
            op: "score_pair",
            left: pair.w1.shape(),
            right: pair.w2.shape(),
        });
    }
    let products: Vec<f64> = n1.iter().zip(&n2).map(|(a, b)| a * b).collect();
    let raw = unit_norms(&products, pair.unit_size());
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(Error::DegeneratePair(pair.id.to_string()));
    }
    Ok(ScoreVector {
        pair_id: pair.id,
        scores: raw.into_iter().map(|v| v / norm).collect(),
    })
}

/// Units to drop, ascending by score (ties by lower index). The selection
/// is the longest ascending prefix whose share of the total score mass is at
/// most `1 − θ`, capped so that at least `floor_units` remain.
pub fn select_removals(scores: &ScoreVector, theta: f64, floor_units: usize) -> Vec<usize> {
    let s = &scores.scores;
    let total: f64 = s.iter().sum();
    let cap = s.len().saturating_sub(floor_units);
    if !(total > 0.0) || cap == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[a].total_cmp(&s[b]).then(a.cmp(&b)));
    let budget = (1.0 - theta) + MASS_SLACK;
    let mut mass = 0.0;
    let mut out = Vec::new();
    for j in order {
        if out.len() == cap {
            break;
        }
        mass += s[j] / total;
        if mass > budget {
            break;
        }
        out.push(j);
    }
    out
}

/// Floor in units for pair `id`: `⌈min_inner_dim / unit_size⌉`.
pub fn floor_units(model: &Model, id: PairId, min_inner_dim: usize) -> usize {
    min_inner_dim.div_ceil(model.pair_unit_size(id))
}

fn check_floor(model: &Model, id: PairId, count: usize, min_inner_dim: usize) -> Result<()> {
    let size = model.pair_unit_size(id);
    let floor = floor_units(model, id, min_inner_dim) * size;
    for side in [Side::W1, Side::W2] {
        let inner = model.side_inner_dim(id, side)?;
        if inner < count * size + floor {
            return Err(Error::BelowFloor {
                pair: id.to_string(),
                floor,
            });
        }
    }
    Ok(())
}

/// Removes unit `j` from both sides of pair `id`, slicing optimizer moments
/// through `slicer`. Returns the number of parameters removed.
pub fn coupled_remove(
    model: &mut Model,
    id: PairId,
    j: usize,
    min_inner_dim: usize,
    slicer: &mut dyn MomentSlicer,
) -> Result<usize> {
    check_floor(model, id, 1, min_inner_dim)?;
    model.remove_coupled_unit(id, j, slicer)
}

/// Removes several units of pair `id` from both sides. Indices refer to the
/// current layout and are applied from highest to lowest.
pub fn coupled_remove_all(
    model: &mut Model,
    id: PairId,
    units: &[usize],
    min_inner_dim: usize,
    slicer: &mut dyn MomentSlicer,
) -> Result<usize> {
    check_floor(model, id, units.len(), min_inner_dim)?;
    let mut sorted = units.to_vec();
    sorted.sort_unstable_by(|a, b| b.cmp(a));
    sorted.dedup();
    let mut removed = 0;
    for j in sorted {
        removed += model.remove_coupled_unit(id, j, slicer)?;
    }
    Ok(removed)
}

/// Lowest `count` entries of `norms`, ties by lower index.
fn lowest(norms: &[f64], count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..norms.len()).collect();
    order.sort_by(|&a, &b| norms[a].total_cmp(&norms[b]).then(a.cmp(&b)));
    order.truncate(count);
    order
}

/// Ablation: removes `count` units from each side of pair `id`, choosing the
/// lowest-norm `W1` columns and the lowest-norm `W2` axes independently.
pub fn uncoupled_remove(
    model: &mut Model,
    id: PairId,
    count: usize,
    min_inner_dim: usize,
    slicer: &mut dyn MomentSlicer,
) -> Result<usize> {
    check_floor(model, id, count, min_inner_dim)?;
    let pair = model.pair(id)?;
    let size = model.pair_unit_size(id);
    let picks = [
        (Side::W1, lowest(&unit_norms(&pair.w1_norms()?, size), count)),
        (Side::W2, lowest(&unit_norms(&pair.w2_norms()?, size), count)),
    ];
    let mut removed = 0;
    for (side, mut units) in picks {
        units.sort_unstable_by(|a, b| b.cmp(a));
        for j in units {
            removed += model.remove_pair_unit(id, side, j, slicer)?;
        }
    }
    Ok(removed)
}
