//! Numerical checks of the removal-error analysis.

mod ffn;
mod removal;

pub use ffn::{
    ffn_bound_check, ffn_coupled_vs_uncoupled, kept_units, linearized_bound, spearman, true_removal_error,
    BoundReport, SparsityLoss,
};
pub use removal::{
    coupled_removal_error, individual_delta, individual_removal_error, run_comparison, run_trial, summarize,
    write_summary_csv, ExperimentSummary, TrialResult,
};
