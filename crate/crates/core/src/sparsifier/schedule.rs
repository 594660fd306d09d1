use super::{
    coupled_remove_all, floor_units, score_pair, select_removals, uncoupled_remove, DEFAULT_MIN_INNER_DIM,
    DEFAULT_THETA, DEFAULT_TOP_K,
};
use crate::error::{Error, Result};
use crate::importance::{estimate_importance, rank_pairs, CalibrationBatch};
use crate::model::{pair_ids, Model, MomentSlicer, PairId, PairKind, Side};
use std::io::Write;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    /// Remove the same inner index from both matrices of a pair.
    Coupled,
    /// Remove the same number of indices, but pick each side by its own norms.
    Uncoupled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    All,
    FfnOnly,
    AttentionOnly,
}

impl Scope {
    pub fn contains(self, kind: PairKind) -> bool {
        match self {
            Scope::All => true,
            Scope::FfnOnly => kind == PairKind::Io,
            Scope::AttentionOnly => kind.is_attention(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cadence {
    /// Once per epoch.
    Epoch,
    /// Every `n` optimizer steps.
    Steps(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparsifySchedule {
    pub target_params: usize,
    pub top_k_fraction: f64,
    pub theta: f64,
    pub min_inner_dim: usize,
    pub cadence: Cadence,
    pub strategy: Strategy,
    pub scope: Scope,
}

impl SparsifySchedule {
    pub fn new(target_params: usize) -> Self {
        Self {
            target_params,
            top_k_fraction: DEFAULT_TOP_K,
            theta: DEFAULT_THETA,
            min_inner_dim: DEFAULT_MIN_INNER_DIM,
            cadence: Cadence::Epoch,
            strategy: Strategy::Coupled,
            scope: Scope::All,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_params == 0 {
            return Err(Error::Config("target_params must be positive".into()));
        }
        if !(self.top_k_fraction > 0.0 && self.top_k_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "top_k_fraction must lie in (0, 1], got {}",
                self.top_k_fraction
            )));
        }
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return Err(Error::Config(format!("theta must lie in (0, 1], got {}", self.theta)));
        }
        if self.min_inner_dim == 0 {
            return Err(Error::Config("min_inner_dim must be positive".into()));
        }
        if self.cadence == Cadence::Steps(0) {
            return Err(Error::Config("cadence must be at least one step".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairRemoval {
    pub pair_id: PairId,
    pub dims_removed: usize,
    pub params_before: usize,
    pub params_after: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkippedPair {
    pub pair_id: PairId,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub params_before: usize,
    pub params_after: usize,
    pub removals: Vec<PairRemoval>,
    pub skipped: Vec<SkippedPair>,
}

impl StepReport {
    pub fn dims_removed(&self) -> usize {
        self.removals.iter().map(|r| r.dims_removed).sum()
    }

    pub fn is_noop(&self) -> bool {
        self.removals.is_empty()
    }
}

/// One sparsification step.
///
/// When the model is above budget: estimate Î on `batch`, take the top-K
/// least important in-scope pairs that can still shrink and visit them in
/// ascending Î order. Each visit scores the pair's current weights, selects
/// removals by the mass rule and deletes them. The step ends at the first
/// pair boundary where the parameter count is within budget.
pub fn run_schedule_step(
    model: &mut Model,
    slicer: &mut dyn MomentSlicer,
    batch: &CalibrationBatch,
    schedule: &SparsifySchedule,
    step: usize,
) -> Result<StepReport> {
    schedule.validate()?;
    let params_before = model.param_count();
    let mut report = StepReport {
        step,
        params_before,
        params_after: params_before,
        removals: Vec::new(),
        skipped: Vec::new(),
    };
    if params_before <= schedule.target_params {
        return Ok(report);
    }
    let records: Vec<_> = estimate_importance(model, batch)?
        .into_iter()
        .filter(|r| schedule.scope.contains(r.pair_id.kind) && can_shrink(model, r.pair_id, schedule))
        .collect();
    if records.is_empty() {
        return Ok(report);
    }
    for id in rank_pairs(&records, schedule.top_k_fraction)? {
        if model.param_count() <= schedule.target_params {
            break;
        }
        let pair = model.pair(id)?;
        let scores = match score_pair(&pair) {
            Ok(s) => s,
            Err(e @ Error::DegeneratePair(_)) => {
                report.skipped.push(SkippedPair {
                    pair_id: id,
                    reason: e.to_string(),
                });
                continue;
            }
            Err(e) => return Err(e),
        };
        let units = select_removals(&scores, schedule.theta, floor_units(model, id, schedule.min_inner_dim));
        if units.is_empty() {
            continue;
        }
        let before = model.param_count();
        match schedule.strategy {
            Strategy::Coupled => coupled_remove_all(model, id, &units, schedule.min_inner_dim, slicer)?,
            Strategy::Uncoupled => uncoupled_remove(model, id, units.len(), schedule.min_inner_dim, slicer)?,
        };
        report.removals.push(PairRemoval {
            pair_id: id,
            dims_removed: units.len() * model.pair_unit_size(id),
            params_before: before,
            params_after: model.param_count(),
        });
    }
    report.params_after = model.param_count();
    Ok(report)
}

/// Whether a visit to `id` would remove anything. Degenerate pairs count as
/// candidates so that they are visited and reported.
fn can_shrink(model: &Model, id: PairId, schedule: &SparsifySchedule) -> bool {
    let Ok(pair) = model.pair(id) else {
        return false;
    };
    match score_pair(&pair) {
        Ok(scores) => {
            let floor = floor_units(model, id, schedule.min_inner_dim);
            !select_removals(&scores, schedule.theta, floor).is_empty()
        }
        Err(_) => true,
    }
}

/// Smallest parameter count reachable by shrinking every in-scope pair to
/// its floor.
pub fn min_achievable_params(model: &Model, scope: Scope, min_inner_dim: usize) -> Result<usize> {
    let mut m = model.clone();
    for id in pair_ids(&m) {
        if !scope.contains(id.kind) {
            continue;
        }
        let size = m.pair_unit_size(id);
        let floor = floor_units(&m, id, min_inner_dim);
        let units = m.side_inner_dim(id, Side::W1)? / size;
        if units > floor {
            let drop: Vec<usize> = (floor..units).collect();
            coupled_remove_all(&mut m, id, &drop, min_inner_dim, &mut ())?;
        }
    }
    Ok(m.param_count())
}

/// CSV with header `step,pair_id,kind,dims_removed,params_before,params_after`.
pub fn write_report_csv<W: Write>(reports: &[StepReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "pair_id", "kind", "dims_removed", "params_before", "params_after"])?;
    for rep in reports {
        for r in &rep.removals {
            w.write_record([
                rep.step.to_string(),
                r.pair_id.to_string(),
                r.pair_id.kind.as_str().to_string(),
                r.dims_removed.to_string(),
                r.params_before.to_string(),
                r.params_after.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
