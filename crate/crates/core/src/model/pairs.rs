//! Coupled weight pairs.
//!
//! Every attention head contributes a query-key pair and a value-output pair,
//! and every feed-forward block one input-output pair. Within a pair the two
//! matrices share an inner dimension, and removing index `j` from both drops
//! exactly one outer-product term of their product.

use crate::error::{Error, Result};
use crate::model::config::Activation;
use crate::model::params::names;
use crate::model::rope::RopeTable;
use crate::model::transformer::Model;
use crate::numerics::Matrix;
use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PairKind {
    Qk,
    Vo,
    Io,
}

impl PairKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PairKind::Qk => "qk",
            PairKind::Vo => "vo",
            PairKind::Io => "io",
        }
    }

    pub fn is_attention(self) -> bool {
        !matches!(self, PairKind::Io)
    }
}

/// Stable identifier; the derived order is layer, then kind, then head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PairId {
    pub layer: usize,
    pub kind: PairKind,
    /// Query head for attention pairs, 0 for the feed-forward pair.
    pub index: usize,
}

impl PairId {
    pub fn new(layer: usize, kind: PairKind, index: usize) -> Self {
        Self { layer, kind, index }
    }
}

impl fmt::Display for PairId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "l{}.{}.{}", self.layer, self.kind.as_str(), self.index)
    }
}

/// Query heads that share one key/value group.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupBinding {
    pub group: usize,
    pub heads: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoupledPair {
    pub id: PairId,
    pub w1: Matrix,
    pub w2: Matrix,
    /// Rotary table of the query side, present for QK pairs of rotary models.
    pub rope: Option<RopeTable>,
    pub group: Option<GroupBinding>,
}

impl CoupledPair {
    pub fn new(id: PairId, w1: Matrix, w2: Matrix) -> Result<Self> {
        let p = Self {
            id,
            w1,
            w2,
            rope: None,
            group: None,
        };
        p.check()?;
        Ok(p)
    }

    pub fn with_rope(mut self, table: RopeTable) -> Result<Self> {
        self.rope = Some(table);
        self.check()?;
        Ok(self)
    }

    pub fn kind(&self) -> PairKind {
        self.id.kind
    }

    pub fn inner_dim(&self) -> usize {
        self.w1.cols()
    }

    fn w2_inner(&self) -> usize {
        match self.kind() {
            PairKind::Qk => self.w2.cols(),
            _ => self.w2.rows(),
        }
    }

    /// Dimensions removed together: 2 for rotary blocks, otherwise 1.
    pub fn unit_size(&self) -> usize {
        if self.rope.is_some() {
            2
        } else {
            1
        }
    }

    pub fn units(&self) -> usize {
        self.inner_dim() / self.unit_size()
    }

    pub fn check(&self) -> Result<()> {
        if self.inner_dim() != self.w2_inner() {
            return Err(Error::Shape {
                op: "coupled pair",
                left: self.w1.shape(),
                right: self.w2.shape(),
            });
        }
        if let Some(t) = &self.rope {
            if self.kind() != PairKind::Qk {
                return Err(Error::Config(format!("rotary table on non-QK pair {}", self.id)));
            }
            if self.inner_dim() % 2 != 0 || t.dims() != self.inner_dim() {
                return Err(Error::Config(format!(
                    "pair {} has inner dimension {} but a rotary table of {}",
                    self.id,
                    self.inner_dim(),
                    t.dims()
                )));
            }
        }
        Ok(())
    }

    /// `w1 w2ᵀ` for QK, `w1 w2` otherwise.
    pub fn product(&self) -> Result<Matrix> {
        match self.kind() {
            PairKind::Qk => self.w1.matmul_transposed(&self.w2),
            _ => self.w1.matmul(&self.w2),
        }
    }

    /// Column `j` of `w1`.
    pub fn w1_axis(&self, j: usize) -> Vec<f64> {
        self.w1.col(j)
    }

    /// Column `j` of `w2` for QK, row `j` otherwise.
    pub fn w2_axis(&self, j: usize) -> Vec<f64> {
        match self.kind() {
            PairKind::Qk => self.w2.col(j),
            _ => self.w2.row(j).to_vec(),
        }
    }

    pub fn w1_norms(&self) -> Result<Vec<f64>> {
        self.w1.column_norms()
    }

    pub fn w2_norms(&self) -> Result<Vec<f64>> {
        match self.kind() {
            PairKind::Qk => self.w2.column_norms(),
            _ => self.w2.row_norms(),
        }
    }

    /// Removes inner dimension `j` from both matrices (and its rotary block
    /// when there is one, in which case `j` indexes blocks).
    pub fn remove_unit(&mut self, j: usize) -> Result<()> {
        let size = self.unit_size();
        if j >= self.units() {
            return Err(Error::IndexOutOfRange {
                op: "coupled pair remove",
                index: j,
                len: self.units(),
            });
        }
        if self.inner_dim() <= size {
            return Err(Error::WouldEmpty("coupled pair remove"));
        }
        for d in (j * size..(j + 1) * size).rev() {
            self.w1 = self.w1.remove_column(d)?;
            self.w2 = match self.kind() {
                PairKind::Qk => self.w2.remove_column(d)?,
                _ => self.w2.remove_row(d)?,
            };
        }
        if let Some(t) = &mut self.rope {
            t.remove_block(j)?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Row,
    Col,
}

/// Receives every row/column deletion applied to a named parameter so that
/// optimizer state can be sliced alongside it.
pub trait MomentSlicer {
    fn remove(&mut self, name: &str, axis: Axis, index: usize);
}

impl MomentSlicer for () {
    fn remove(&mut self, _: &str, _: Axis, _: usize) {}
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Slot {
    pub name: String,
    pub axis: Axis,
}

impl Slot {
    fn col(name: String) -> Self {
        Self { name, axis: Axis::Col }
    }

    fn row(name: String) -> Self {
        Self { name, axis: Axis::Row }
    }
}

/// Every tensor touched when one side of a pair loses an inner index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairSlots {
    pub w1: Vec<Slot>,
    pub w2: Vec<Slot>,
    pub rope_w1: Vec<String>,
    pub rope_w2: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    W1,
    W2,
}

/// All pair ids in layer / kind / head order.
pub fn pair_ids(model: &Model) -> Vec<PairId> {
    let c = model.config();
    let mut ids = Vec::with_capacity(c.layers * (2 * c.heads + 1));
    for l in 0..c.layers {
        ids.extend((0..c.heads).map(|i| PairId::new(l, PairKind::Qk, i)));
        ids.extend((0..c.heads).map(|i| PairId::new(l, PairKind::Vo, i)));
        ids.push(PairId::new(l, PairKind::Io, 0));
    }
    ids
}

pub fn coupled_pairs(model: &Model) -> impl Iterator<Item = CoupledPair> + '_ {
    pair_ids(model)
        .into_iter()
        .map(|id| model.pair(id).expect("pair ids come from the model"))
}

impl Model {
    fn check_pair_id(&self, id: PairId) -> Result<()> {
        let c = self.config();
        let limit = if id.kind.is_attention() { c.heads } else { 1 };
        if id.layer >= c.layers || id.index >= limit {
            return Err(Error::UnknownParam(id.to_string()));
        }
        Ok(())
    }

    fn group_binding(&self, head: usize) -> GroupBinding {
        let g = self.config().group_of(head);
        GroupBinding {
            group: g,
            heads: self.config().heads_in_group(g).collect(),
        }
    }

    /// Current view of one pair. For SwiGLU the input side is `W_gate ⊙ W_up`.
    pub fn pair(&self, id: PairId) -> Result<CoupledPair> {
        self.check_pair_id(id)?;
        let c = self.config();
        let (l, i) = (id.layer, id.index);
        let g = c.group_of(i);
        let grouped = c.kv_groups != c.heads;
        let (w1, w2, rope, group) = match id.kind {
            PairKind::Qk => (
                self.param(&names::q(l, i))?.clone(),
                self.param(&names::k(l, g))?.clone(),
                if c.rope {
                    Some(self.buffer(&names::rope_q(l, i))?.clone())
                } else {
                    None
                },
                grouped.then(|| self.group_binding(i)),
            ),
            PairKind::Vo => (
                self.param(&names::v(l, g))?.clone(),
                self.param(&names::o(l, i))?.clone(),
                None,
                grouped.then(|| self.group_binding(i)),
            ),
            PairKind::Io => match c.activation {
                Activation::Gelu => (
                    self.param(&names::ffn_in(l))?.clone(),
                    self.param(&names::ffn_out(l))?.clone(),
                    None,
                    None,
                ),
                Activation::SwiGlu => (
                    self.param(&names::ffn_gate(l))?
                        .hadamard(self.param(&names::ffn_up(l))?)?,
                    self.param(&names::ffn_down(l))?.clone(),
                    None,
                    None,
                ),
            },
        };
        let pair = CoupledPair {
            id,
            w1,
            w2,
            rope,
            group,
        };
        // Uncoupled removal may leave the rotary tables of the two sides out
        // of step, so only the shape relation is enforced here.
        if pair.inner_dim() != pair.w2_inner() {
            return Err(Error::Shape {
                op: "coupled pair",
                left: pair.w1.shape(),
                right: pair.w2.shape(),
            });
        }
        Ok(pair)
    }

    pub fn pair_slots(&self, id: PairId) -> Result<PairSlots> {
        self.check_pair_id(id)?;
        let c = self.config();
        let (l, i) = (id.layer, id.index);
        let g = c.group_of(i);
        let group: Vec<usize> = c.heads_in_group(g).collect();
        Ok(match id.kind {
            PairKind::Qk => PairSlots {
                w1: group.iter().map(|&h| Slot::col(names::q(l, h))).collect(),
                w2: vec![Slot::col(names::k(l, g))],
                rope_w1: if c.rope {
                    group.iter().map(|&h| names::rope_q(l, h)).collect()
                } else {
                    vec![]
                },
                rope_w2: if c.rope { vec![names::rope_k(l, g)] } else { vec![] },
            },
            PairKind::Vo => PairSlots {
                w1: vec![Slot::col(names::v(l, g))],
                w2: group.iter().map(|&h| Slot::row(names::o(l, h))).collect(),
                rope_w1: vec![],
                rope_w2: vec![],
            },
            PairKind::Io => match c.activation {
                Activation::Gelu => PairSlots {
                    w1: vec![Slot::col(names::ffn_in(l)), Slot::col(names::ffn_b_in(l))],
                    w2: vec![Slot::row(names::ffn_out(l))],
                    rope_w1: vec![],
                    rope_w2: vec![],
                },
                Activation::SwiGlu => PairSlots {
                    w1: vec![Slot::col(names::ffn_gate(l)), Slot::col(names::ffn_up(l))],
                    w2: vec![Slot::row(names::ffn_down(l))],
                    rope_w1: vec![],
                    rope_w2: vec![],
                },
            },
        })
    }

    /// Dimensions removed per unit of pair `id`.
    pub fn pair_unit_size(&self, id: PairId) -> usize {
        if self.config().rope && id.kind == PairKind::Qk {
            2
        } else {
            1
        }
    }

    /// Inner dimension seen from one side of the pair.
    pub fn side_inner_dim(&self, id: PairId, side: Side) -> Result<usize> {
        let slots = self.pair_slots(id)?;
        let slot = match side {
            Side::W1 => &slots.w1[0],
            Side::W2 => &slots.w2[0],
        };
        let m = self.param(&slot.name)?;
        Ok(match slot.axis {
            Axis::Col => m.cols(),
            Axis::Row => m.rows(),
        })
    }

    /// Deletes unit `unit` from one side of pair `id`: every tensor in that
    /// side's slots, plus its rotary tables. Returns the number of scalar
    /// parameters removed.
    pub fn remove_pair_unit(
        &mut self,
        id: PairId,
        side: Side,
        unit: usize,
        slicer: &mut dyn MomentSlicer,
    ) -> Result<usize> {
        let slots = self.pair_slots(id)?;
        let size = self.pair_unit_size(id);
        let inner = self.side_inner_dim(id, side)?;
        if unit >= inner / size {
            return Err(Error::IndexOutOfRange {
                op: "remove_pair_unit",
                index: unit,
                len: inner / size,
            });
        }
        if inner <= size {
            return Err(Error::WouldEmpty("remove_pair_unit"));
        }
        let (targets, tables) = match side {
            Side::W1 => (&slots.w1, &slots.rope_w1),
            Side::W2 => (&slots.w2, &slots.rope_w2),
        };
        let before = self.param_count();
        for slot in targets {
            for d in (unit * size..(unit + 1) * size).rev() {
                let m = self.params_mut().get_mut(&slot.name)?;
                *m = match slot.axis {
                    Axis::Col => m.remove_column(d)?,
                    Axis::Row => m.remove_row(d)?,
                };
                slicer.remove(&slot.name, slot.axis, d);
            }
        }
        for name in tables {
            self.buffer_mut(name)?.remove_block(unit)?;
        }
        Ok(before - self.param_count())
    }

    /// Removes unit `unit` from both sides of pair `id`.
    pub fn remove_coupled_unit(
        &mut self,
        id: PairId,
        unit: usize,
        slicer: &mut dyn MomentSlicer,
    ) -> Result<usize> {
        let inner1 = self.side_inner_dim(id, Side::W1)?;
        let inner2 = self.side_inner_dim(id, Side::W2)?;
        let size = self.pair_unit_size(id);
        // Validate both sides before mutating either one.
        for inner in [inner1, inner2] {
            if unit >= inner / size {
                return Err(Error::IndexOutOfRange {
                    op: "remove_coupled_unit",
                    index: unit,
                    len: inner / size,
                });
            }
            if inner <= size {
                return Err(Error::WouldEmpty("remove_coupled_unit"));
            }
        }
        Ok(self.remove_pair_unit(id, Side::W1, unit, slicer)?
            + self.remove_pair_unit(id, Side::W2, unit, slicer)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::ModelConfig;
    use crate::numerics::Rng;
    use std::collections::HashMap;

    fn config(kv_groups: usize, activation: Activation, rope: bool) -> ModelConfig {
        ModelConfig {
            vocab: 7,
            d_model: 16,
            layers: 2,
            heads: 4,
            kv_groups,
            head_dim: 4,
            d_ffn: 10,
            activation,
            rope,
            max_seq_len: 8,
            ..Default::default()
        }
    }

    #[test]
    fn counts_pairs() {
        let m = Model::new(config(4, Activation::Gelu, false), 1).unwrap();
        assert_eq!(coupled_pairs(&m).count(), 18);
        let g = Model::new(config(2, Activation::Gelu, false), 1).unwrap();
        let pairs: Vec<_> = coupled_pairs(&g).collect();
        for l in 0..2 {
            let of = |k| pairs.iter().filter(|p| p.id.layer == l && p.kind() == k).count();
            assert_eq!((of(PairKind::Qk), of(PairKind::Vo), of(PairKind::Io)), (4, 4, 1));
        }
        let b = pairs[1].group.as_ref().unwrap();
        assert_eq!((b.group, b.heads.clone()), (0, vec![0, 1]));
    }

    #[test]
    fn pairs_partition_the_weight_matrices() {
        for act in [Activation::Gelu, Activation::SwiGlu] {
            let m = Model::new(config(4, act, false), 2).unwrap();
            let mut seen: HashMap<String, usize> = HashMap::new();
            for id in pair_ids(&m) {
                let s = m.pair_slots(id).unwrap();
                for slot in s.w1.iter().chain(&s.w2) {
                    *seen.entry(slot.name.clone()).or_default() += 1;
                }
            }
            let weights: Vec<&str> = m
                .params()
                .names()
                .filter(|n| n.contains(".attn.") || n.contains(".ffn.w") || n.contains(".ffn.b_in"))
                .collect();
            assert_eq!(seen.len(), weights.len());
            for n in weights {
                assert_eq!(seen.get(n), Some(&1), "{n}");
            }
        }
    }

    #[test]
    fn removal_drops_one_outer_product() {
        let mut rng = Rng::new(3);
        for kind in [PairKind::Qk, PairKind::Vo] {
            let w1 = rng.normal_matrix(6, 5, 1.0);
            let w2 = match kind {
                PairKind::Qk => rng.normal_matrix(6, 5, 1.0),
                _ => rng.normal_matrix(5, 6, 1.0),
            };
            let pair = CoupledPair::new(PairId::new(0, kind, 0), w1, w2).unwrap();
            for j in 0..5 {
                let mut after = pair.clone();
                after.remove_unit(j).unwrap();
                let diff = pair.product().unwrap().sub(&after.product().unwrap()).unwrap();
                let term = Matrix::outer(&pair.w1_axis(j), &pair.w2_axis(j));
                assert!(diff.max_abs_diff(&term).unwrap() < 1e-12);
                assert_eq!(after.inner_dim(), 4);
            }
        }
    }

    #[test]
    fn standalone_pair_checks() {
        let bad = CoupledPair::new(PairId::new(0, PairKind::Vo, 0), Matrix::zeros(3, 2), Matrix::zeros(3, 3));
        assert!(bad.is_err());
        let mut p = CoupledPair::new(PairId::new(0, PairKind::Qk, 0), Matrix::filled(3, 1, 1.0), Matrix::filled(3, 1, 1.0)).unwrap();
        assert!(matches!(p.remove_unit(0), Err(Error::WouldEmpty(_))));
        assert!(p.remove_unit(1).is_err());
    }

    #[test]
    fn model_removal_updates_counts_and_shapes() {
        let mut m = Model::new(config(4, Activation::Gelu, false), 4).unwrap();
        let d = 16;
        let x = Rng::new(5).normal_matrix(5, d, 1.0);
        for (id, expected) in [
            (PairId::new(0, PairKind::Qk, 1), d + d),
            (PairId::new(1, PairKind::Vo, 3), d + d),
            (PairId::new(0, PairKind::Io, 0), d + 1 + d),
        ] {
            let before = m.param_count();
            let removed = m.remove_coupled_unit(id, 2, &mut ()).unwrap();
            assert_eq!(removed, expected);
            assert_eq!(before - m.param_count(), expected);
            let p = m.pair(id).unwrap();
            p.check().unwrap();
            assert_eq!(m.forward_mha_coupled(&x, &x, &x, id.layer).unwrap().shape(), (5, d));
            assert_eq!(m.forward_ffn(&x, id.layer).unwrap().shape(), (5, d));
        }
        m.check_consistency().unwrap();
        assert_eq!(m.pair(PairId::new(0, PairKind::Io, 0)).unwrap().inner_dim(), 9);
    }

    #[test]
    fn rope_removal_takes_whole_blocks() {
        let mut m = Model::new(config(4, Activation::SwiGlu, true), 6).unwrap();
        let id = PairId::new(1, PairKind::Qk, 0);
        let freqs = m.buffer(&names::rope_q(1, 0)).unwrap().freqs().to_vec();
        m.remove_coupled_unit(id, 0, &mut ()).unwrap();
        let p = m.pair(id).unwrap();
        assert_eq!(p.inner_dim(), 2);
        assert_eq!(p.rope.as_ref().unwrap().freqs(), &freqs[1..]);
        assert_eq!(m.buffer(&names::rope_k(1, 0)).unwrap().freqs(), &freqs[1..]);
        assert!(m.remove_coupled_unit(id, 0, &mut ()).is_err());
        m.check_consistency().unwrap();
        assert!(m.logits(&[1, 2, 3]).unwrap().is_finite());
    }

    #[test]
    fn swiglu_view_is_gate_times_up() {
        let m = Model::new(config(4, Activation::SwiGlu, false), 7).unwrap();
        let p = m.pair(PairId::new(0, PairKind::Io, 0)).unwrap();
        let expected = m
            .param(&names::ffn_gate(0))
            .unwrap()
            .hadamard(m.param(&names::ffn_up(0)).unwrap())
            .unwrap();
        assert_eq!(p.w1, expected);
    }

    #[test]
    fn grouped_removal_spans_the_group() {
        let mut m = Model::new(config(2, Activation::Gelu, false), 8).unwrap();
        m.remove_coupled_unit(PairId::new(0, PairKind::Qk, 3), 1, &mut ()).unwrap();
        for h in 0..4 {
            let expected = if h >= 2 { 3 } else { 4 };
            assert_eq!(m.param(&names::q(0, h)).unwrap().cols(), expected);
        }
        m.remove_coupled_unit(PairId::new(0, PairKind::Vo, 0), 0, &mut ()).unwrap();
        assert_eq!(m.param(&names::o(0, 1)).unwrap().rows(), 3);
        assert_eq!(m.param(&names::o(0, 2)).unwrap().rows(), 4);
        m.check_consistency().unwrap();
    }

    #[derive(Default)]
    struct Log(Vec<(String, Axis, usize)>);

    impl MomentSlicer for Log {
        fn remove(&mut self, name: &str, axis: Axis, index: usize) {
            self.0.push((name.to_string(), axis, index));
        }
    }

    #[test]
    fn slicer_sees_every_deletion() {
        let mut m = Model::new(config(4, Activation::Gelu, false), 9).unwrap();
        let mut log = Log::default();
        m.remove_coupled_unit(PairId::new(1, PairKind::Io, 0), 4, &mut log).unwrap();
        assert_eq!(
            log.0,
            vec![
                (names::ffn_in(1), Axis::Col, 4),
                (names::ffn_b_in(1), Axis::Col, 4),
                (names::ffn_out(1), Axis::Row, 4),
            ]
        );
    }
}
