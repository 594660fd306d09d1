//! Pair-level importance from the empirical Fisher information.
//!
//! For a pair `{W1, W2}` and calibration set `D`:
//!
//! `Î = ½ Σ_k (1/|W_k|) (1/|D|) Σ_{d∈D} Σ_ij (∂L_d/∂W_k)²_ij`
//!
//! Each calibration sequence is differentiated on its own and squared before
//! averaging. For SwiGLU the input side is `W_gate ⊙ W_up`; its gradient is
//! taken as the product-rule image `∂G ⊙ U + G ⊙ ∂U` of the two underlying
//! gradients.

use crate::error::{Error, Result};
use crate::model::{names, Activation, GradMap, Model, PairId, PairKind, Sample};
use crate::numerics::Matrix;
use rayon::prelude::*;
use std::io::Write;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImportanceRecord {
    pub pair_id: PairId,
    pub value: f64,
}

/// Token sequences used only for importance estimation.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationBatch {
    samples: Vec<Sample>,
}

impl CalibrationBatch {
    pub fn new(samples: Vec<Sample>, vocab: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyBatch);
        }
        for s in &samples {
            if s.input.len() != s.target.len() || s.input.is_empty() {
                return Err(Error::Config(format!(
                    "calibration sample has {} inputs and {} targets",
                    s.input.len(),
                    s.target.len()
                )));
            }
            if let Some(&t) = s.input.iter().chain(&s.target).find(|&&t| t >= vocab) {
                return Err(Error::TargetOutOfRange { target: t, vocab });
            }
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// `½ (mean_d ‖G1_d‖² / |W1| + mean_d ‖G2_d‖² / |W2|)` from per-sample
/// gradient matrices of the two sides.
pub fn coupled_fisher(grads_w1: &[Matrix], grads_w2: &[Matrix]) -> Result<f64> {
    if grads_w1.is_empty() || grads_w1.len() != grads_w2.len() {
        return Err(Error::EmptyBatch);
    }
    let mut acc = FisherAccumulator::new(1);
    for (g1, g2) in grads_w1.iter().zip(grads_w2) {
        acc.add_sample(&[(g1.sum_of_squares(), g2.sum_of_squares())]);
    }
    Ok(acc.values(&[(grads_w1[0].len(), grads_w2[0].len())])?[0])
}

/// Running per-pair sums of squared gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct FisherAccumulator {
    sums: Vec<(f64, f64)>,
    count: usize,
}

impl FisherAccumulator {
    pub fn new(pairs: usize) -> Self {
        Self {
            sums: vec![(0.0, 0.0); pairs],
            count: 0,
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Adds one sample's `(Σ g1², Σ g2²)` for every pair.
    pub fn add_sample(&mut self, squares: &[(f64, f64)]) {
        assert_eq!(squares.len(), self.sums.len(), "one entry per pair");
        for (acc, (a, b)) in self.sums.iter_mut().zip(squares) {
            acc.0 += a;
            acc.1 += b;
        }
        self.count += 1;
    }

    pub fn merge(&mut self, other: &FisherAccumulator) {
        assert_eq!(self.sums.len(), other.sums.len(), "one entry per pair");
        for (a, b) in self.sums.iter_mut().zip(&other.sums) {
            a.0 += b.0;
            a.1 += b.1;
        }
        self.count += other.count;
    }

    /// Î per pair given each pair's `(|W1|, |W2|)`.
    pub fn values(&self, sizes: &[(usize, usize)]) -> Result<Vec<f64>> {
        if self.count == 0 {
            return Err(Error::EmptyBatch);
        }
        let n = self.count as f64;
        Ok(self
            .sums
            .iter()
            .zip(sizes)
            .map(|(&(s1, s2), &(n1, n2))| 0.5 * (s1 / n1 as f64 / n + s2 / n2 as f64 / n))
            .collect())
    }
}

fn grad<'a>(grads: &'a GradMap, name: &str) -> Result<&'a Matrix> {
    grads
        .get(name)
        .ok_or_else(|| Error::UnknownParam(name.to_string()))
}

/// `(Σ g1², Σ g2²)` for one pair from one sample's gradients.
fn pair_squares(model: &Model, id: PairId, grads: &GradMap) -> Result<(f64, f64)> {
    let c = model.config();
    let (l, i) = (id.layer, id.index);
    let g = c.group_of(i);
    Ok(match id.kind {
        PairKind::Qk => (
            grad(grads, &names::q(l, i))?.sum_of_squares(),
            grad(grads, &names::k(l, g))?.sum_of_squares(),
        ),
        PairKind::Vo => (
            grad(grads, &names::v(l, g))?.sum_of_squares(),
            grad(grads, &names::o(l, i))?.sum_of_squares(),
        ),
        PairKind::Io => match c.activation {
            Activation::Gelu => (
                grad(grads, &names::ffn_in(l))?.sum_of_squares(),
                grad(grads, &names::ffn_out(l))?.sum_of_squares(),
            ),
            Activation::SwiGlu => {
                let (gate, up) = (names::ffn_gate(l), names::ffn_up(l));
                let d_gate = grad(grads, &gate)?.hadamard(model.param(&up)?)?;
                let d_up = model.param(&gate)?.hadamard(grad(grads, &up)?)?;
                (
                    d_gate.add(&d_up)?.sum_of_squares(),
                    grad(grads, &names::ffn_down(l))?.sum_of_squares(),
                )
            }
        },
    })
}

/// One record per coupled pair, in pair order.
pub fn estimate_importance(model: &Model, batch: &CalibrationBatch) -> Result<Vec<ImportanceRecord>> {
    let ids = crate::model::pair_ids(model);
    let per_sample: Vec<Vec<(f64, f64)>> = batch
        .samples()
        .par_iter()
        .map(|s| {
            let (_, grads) = model.loss_and_grads(s)?;
            ids.iter().map(|&id| pair_squares(model, id, &grads)).collect()
        })
        .collect::<Result<_>>()?;
    let mut acc = FisherAccumulator::new(ids.len());
    for squares in &per_sample {
        acc.add_sample(squares);
    }
    let sizes = ids
        .iter()
        .map(|&id| {
            let p = model.pair(id)?;
            Ok((p.w1.len(), p.w2.len()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ids
        .into_iter()
        .zip(acc.values(&sizes)?)
        .map(|(pair_id, value)| ImportanceRecord { pair_id, value })
        .collect())
}

/// The `⌈fraction · n⌉` pairs with smallest Î, ties broken by pair order.
pub fn rank_pairs(records: &[ImportanceRecord], top_k_fraction: f64) -> Result<Vec<PairId>> {
    if records.is_empty() {
        return Err(Error::EmptyRecords);
    }
    if !(top_k_fraction > 0.0 && top_k_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "top_k_fraction must lie in (0, 1], got {top_k_fraction}"
        )));
    }
    let n = records.len();
    // Guard so that e.g. 0.3 * 10 does not round up to 4.
    let k = ((top_k_fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    let mut sorted: Vec<&ImportanceRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.value.total_cmp(&b.value).then(a.pair_id.cmp(&b.pair_id)));
    Ok(sorted.into_iter().take(k).map(|r| r.pair_id).collect())
}

/// CSV with header `pair_id,layer,kind,index,value`.
pub fn write_importance_csv<W: Write>(records: &[ImportanceRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["pair_id", "layer", "kind", "index", "value"])?;
    for r in records {
        w.write_record([
            r.pair_id.to_string(),
            r.pair_id.layer.to_string(),
            r.pair_id.kind.as_str().to_string(),
            r.pair_id.index.to_string(),
            format!("{:e}", r.value),
        ])?;
    }
    w.flush()?;
    Ok(())
}
