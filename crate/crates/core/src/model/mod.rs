//! Toy decoder-only transformer and its coupled-pair views.

pub mod attention;
pub mod config;
pub mod ffn;
pub mod pairs;
pub mod params;
pub mod rope;
pub mod transformer;

pub use attention::{causal_mask, AttentionWeights};
pub use config::{Activation, ModelConfig};
pub use ffn::{forward_ffn, FfnWeights};
pub use pairs::{coupled_pairs, pair_ids, Axis, CoupledPair, GroupBinding, MomentSlicer, PairId, PairKind, PairSlots, Side, Slot};
pub use params::{names, GradMap, ParamStore};
pub use rope::{RopeTable, DEFAULT_ROPE_BASE};
pub use transformer::{Model, Sample};
