use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::attention::{self, causal_mask, AttentionWeights};
use crate::model::config::{Activation, ModelConfig};
use crate::model::ffn::{self, FfnWeights};
use crate::model::params::{names, GradMap, ParamStore};
use crate::model::rope::RopeTable;
use crate::numerics::{Matrix, Rng};
use indexmap::IndexMap;
use rayon::prelude::*;

/// One training sequence: `target[t]` is the token following `input[t]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
}

/// Pre-norm decoder-only transformer with tied input/output embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    buffers: IndexMap<String, RopeTable>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::init(config, &mut Rng::new(seed))
    }

    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let (d, std) = (c.d_model, c.init_std);
        let mut p = ParamStore::new();
        p.insert(names::TOK_EMB, rng.normal_matrix(c.vocab, d, std));
        if !c.rope {
            p.insert(names::POS_EMB, rng.normal_matrix(c.max_seq_len, d, std));
        }
        for l in 0..c.layers {
            p.insert(names::ln1_gain(l), Matrix::filled(1, d, 1.0));
            p.insert(names::ln1_bias(l), Matrix::zeros(1, d));
            for i in 0..c.heads {
                p.insert(names::q(l, i), rng.normal_matrix(d, c.head_dim, std));
            }
            for g in 0..c.kv_groups {
                p.insert(names::k(l, g), rng.normal_matrix(d, c.head_dim, std));
            }
            for g in 0..c.kv_groups {
                p.insert(names::v(l, g), rng.normal_matrix(d, c.head_dim, std));
            }
            for i in 0..c.heads {
                p.insert(names::o(l, i), rng.normal_matrix(c.head_dim, d, std));
            }
            p.insert(names::ln2_gain(l), Matrix::filled(1, d, 1.0));
            p.insert(names::ln2_bias(l), Matrix::zeros(1, d));
            match c.activation {
                Activation::Gelu => {
                    p.insert(names::ffn_in(l), rng.normal_matrix(d, c.d_ffn, std));
                    p.insert(names::ffn_b_in(l), Matrix::zeros(1, c.d_ffn));
                    p.insert(names::ffn_out(l), rng.normal_matrix(c.d_ffn, d, std));
                    p.insert(names::ffn_b_out(l), Matrix::zeros(1, d));
                }
                Activation::SwiGlu => {
                    p.insert(names::ffn_gate(l), rng.normal_matrix(d, c.d_ffn, std));
                    p.insert(names::ffn_up(l), rng.normal_matrix(d, c.d_ffn, std));
                    p.insert(names::ffn_down(l), rng.normal_matrix(c.d_ffn, d, std));
                }
            }
        }
        p.insert(names::LN_F_GAIN, Matrix::filled(1, d, 1.0));
        p.insert(names::LN_F_BIAS, Matrix::zeros(1, d));

        let mut buffers = IndexMap::new();
        if c.rope {
            let table = RopeTable::standard(c.head_dim, c.rope_base)?;
            for l in 0..c.layers {
                for i in 0..c.heads {
                    buffers.insert(names::rope_q(l, i), table.clone());
                }
                for g in 0..c.kv_groups {
                    buffers.insert(names::rope_k(l, g), table.clone());
                }
            }
        }
        Ok(Self {
            config,
            params: p,
            buffers,
        })
    }

    /// Reassembles a model from stored tensors, checking that every
    /// expected tensor is present and the per-pair shapes agree.
    pub fn from_parts(
        config: ModelConfig,
        params: ParamStore,
        buffers: IndexMap<String, RopeTable>,
    ) -> Result<Self> {
        config.validate()?;
        let m = Self {
            config,
            params,
            buffers,
        };
        m.check_consistency()?;
        Ok(m)
    }

    pub fn check_consistency(&self) -> Result<()> {
        let c = &self.config;
        let d = c.d_model;
        let expect = |name: &str, rows: Option<usize>, cols: Option<usize>| -> Result<(usize, usize)> {
            let m = self.params.get(name)?;
            let ok = rows.is_none_or(|r| r == m.rows()) && cols.is_none_or(|k| k == m.cols());
            if !ok || m.is_empty() {
                return Err(Error::Shape {
                    op: "model consistency",
                    left: m.shape(),
                    right: (rows.unwrap_or(0), cols.unwrap_or(0)),
                });
            }
            Ok(m.shape())
        };
        expect(names::TOK_EMB, Some(c.vocab), Some(d))?;
        if !c.rope {
            expect(names::POS_EMB, Some(c.max_seq_len), Some(d))?;
        }
        expect(names::LN_F_GAIN, Some(1), Some(d))?;
        expect(names::LN_F_BIAS, Some(1), Some(d))?;
        for l in 0..c.layers {
            for n in [
                names::ln1_gain(l),
                names::ln1_bias(l),
                names::ln2_gain(l),
                names::ln2_bias(l),
            ] {
                expect(&n, Some(1), Some(d))?;
            }
            self.attention_weights(l)?.validate()?;
            for i in 0..c.heads {
                expect(&names::q(l, i), Some(d), None)?;
                expect(&names::o(l, i), None, Some(d))?;
            }
            match c.activation {
                Activation::Gelu => {
                    let (_, f) = expect(&names::ffn_in(l), Some(d), None)?;
                    expect(&names::ffn_b_in(l), Some(1), Some(f))?;
                    expect(&names::ffn_out(l), Some(f), Some(d))?;
                    expect(&names::ffn_b_out(l), Some(1), Some(d))?;
                }
                Activation::SwiGlu => {
                    let (_, f) = expect(&names::ffn_gate(l), Some(d), None)?;
                    expect(&names::ffn_up(l), Some(d), Some(f))?;
                    expect(&names::ffn_down(l), Some(f), Some(d))?;
                }
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Result<&Matrix> {
        self.params.get(name)
    }

    pub fn buffers(&self) -> &IndexMap<String, RopeTable> {
        &self.buffers
    }

    pub fn buffer(&self, name: &str) -> Result<&RopeTable> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub(crate) fn buffer_mut(&mut self, name: &str) -> Result<&mut RopeTable> {
        self.buffers
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    /// Total scalar parameters; rotary tables are buffers and do not count.
    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    pub fn attention_weights(&self, layer: usize) -> Result<AttentionWeights> {
        let c = &self.config;
        let collect = |f: fn(usize, usize) -> String, n: usize| -> Result<Vec<Matrix>> {
            (0..n).map(|i| self.params.get(&f(layer, i)).cloned()).collect()
        };
        let tables = |f: fn(usize, usize) -> String, n: usize| -> Result<Option<Vec<RopeTable>>> {
            if !c.rope {
                return Ok(None);
            }
            (0..n)
                .map(|i| self.buffer(&f(layer, i)).cloned())
                .collect::<Result<Vec<_>>>()
                .map(Some)
        };
        Ok(AttentionWeights {
            q: collect(names::q, c.heads)?,
            k: collect(names::k, c.kv_groups)?,
            v: collect(names::v, c.kv_groups)?,
            o: collect(names::o, c.heads)?,
            rope_q: tables(names::rope_q, c.heads)?,
            rope_k: tables(names::rope_k, c.kv_groups)?,
        })
    }

    pub fn ffn_weights(&self, layer: usize) -> Result<FfnWeights> {
        let p = |n: String| self.params.get(&n).cloned();
        Ok(match self.config.activation {
            Activation::Gelu => FfnWeights::Gelu {
                w_in: p(names::ffn_in(layer))?,
                b_in: p(names::ffn_b_in(layer))?,
                w_out: p(names::ffn_out(layer))?,
                b_out: p(names::ffn_b_out(layer))?,
            },
            Activation::SwiGlu => FfnWeights::SwiGlu {
                w_gate: p(names::ffn_gate(layer))?,
                w_up: p(names::ffn_up(layer))?,
                w_down: p(names::ffn_down(layer))?,
            },
        })
    }

    fn layer_mask(&self, xq: &Matrix, xk: &Matrix) -> Result<Option<Matrix>> {
        if !self.config.causal {
            return Ok(None);
        }
        if xq.rows() != xk.rows() {
            return Err(Error::Shape {
                op: "causal attention",
                left: xq.shape(),
                right: xk.shape(),
            });
        }
        Ok(Some(causal_mask(xq.rows())))
    }

    /// Attention sub-layer of `layer` in concat-then-project form.
    pub fn forward_mha_standard(&self, xq: &Matrix, xk: &Matrix, xv: &Matrix, layer: usize) -> Result<Matrix> {
        let mask = self.layer_mask(xq, xk)?;
        attention::forward_mha_standard(xq, xk, xv, &self.attention_weights(layer)?, mask.as_ref())
    }

    /// Attention sub-layer of `layer` as a sum over coupled per-head products.
    pub fn forward_mha_coupled(&self, xq: &Matrix, xk: &Matrix, xv: &Matrix, layer: usize) -> Result<Matrix> {
        let mask = self.layer_mask(xq, xk)?;
        attention::forward_mha_coupled(xq, xk, xv, &self.attention_weights(layer)?, mask.as_ref())
    }

    pub fn forward_gqa(&self, xq: &Matrix, xk: &Matrix, xv: &Matrix, layer: usize) -> Result<Matrix> {
        let mask = self.layer_mask(xq, xk)?;
        attention::forward_gqa(xq, xk, xv, &self.attention_weights(layer)?, mask.as_ref())
    }

    /// Raw rotary scores of query head `head` in `layer`.
    pub fn forward_rope_attention(&self, xq: &Matrix, xk: &Matrix, layer: usize, head: usize) -> Result<Matrix> {
        if !self.config.rope {
            return Err(Error::Config("rotary attention requested on a model without rope".into()));
        }
        let g = self.config.group_of(head);
        attention::rope_scores_rotated(
            xq,
            xk,
            self.param(&names::q(layer, head))?,
            self.param(&names::k(layer, g))?,
            self.buffer(&names::rope_q(layer, head))?,
            self.buffer(&names::rope_k(layer, g))?,
        )
    }

    pub fn forward_ffn(&self, x: &Matrix, layer: usize) -> Result<Matrix> {
        ffn::forward_ffn(x, &self.ffn_weights(layer)?)
    }

    /// Records the full forward pass on `tape`. Returns the logits node and
    /// one leaf per parameter, in store order.
    pub fn build(&self, tape: &mut Tape, tokens: &[usize], trainable: bool) -> Result<(Var, Vec<Var>)> {
        let c = &self.config;
        let l = tokens.len();
        if l == 0 || l > c.max_seq_len {
            return Err(Error::Config(format!(
                "sequence length {l} outside 1..={}",
                c.max_seq_len
            )));
        }
        let vars: Vec<Var> = self
            .params
            .iter()
            .map(|(_, m)| {
                if trainable {
                    tape.param(m.clone())
                } else {
                    tape.constant(m.clone())
                }
            })
            .collect();
        let var = |name: &str| -> Result<Var> {
            self.params
                .index_of(name)
                .map(|i| vars[i])
                .ok_or_else(|| Error::UnknownParam(name.to_string()))
        };
        let pos: Vec<usize> = (0..l).collect();

        let tok = var(names::TOK_EMB)?;
        let mut x = tape.row_gather(tok, tokens)?;
        if !c.rope {
            let pe = tape.row_gather(var(names::POS_EMB)?, &pos)?;
            x = tape.add(x, pe)?;
        }
        let mask = c.causal.then(|| tape.constant(causal_mask(l)));

        for layer in 0..c.layers {
            let h = tape.layer_norm(x, var(&names::ln1_gain(layer))?, var(&names::ln1_bias(layer))?)?;
            let mut keys_t = Vec::with_capacity(c.kv_groups);
            let mut values = Vec::with_capacity(c.kv_groups);
            for g in 0..c.kv_groups {
                let mut k = tape.matmul(h, var(&names::k(layer, g))?)?;
                if c.rope {
                    k = tape.rope(k, self.buffer(&names::rope_k(layer, g))?, &pos)?;
                }
                keys_t.push(tape.transpose(k));
                values.push(tape.matmul(h, var(&names::v(layer, g))?)?);
            }
            let mut attn: Option<Var> = None;
            for i in 0..c.heads {
                let g = c.group_of(i);
                let q_name = names::q(layer, i);
                let inner = self.params.get(&q_name)?.cols();
                let mut q = tape.matmul(h, var(&q_name)?)?;
                if c.rope {
                    q = tape.rope(q, self.buffer(&names::rope_q(layer, i))?, &pos)?;
                }
                let s = tape.matmul(q, keys_t[g])?;
                let mut s = tape.scale(s, 1.0 / (inner as f64).sqrt());
                if let Some(m) = mask {
                    s = tape.add(s, m)?;
                }
                let a = tape.softmax_rows(s);
                let head = tape.matmul(a, values[g])?;
                let out = tape.matmul(head, var(&names::o(layer, i))?)?;
                attn = Some(match attn {
                    None => out,
                    Some(acc) => tape.add(acc, out)?,
                });
            }
            x = tape.add(x, attn.expect("config guarantees at least one head"))?;

            let h = tape.layer_norm(x, var(&names::ln2_gain(layer))?, var(&names::ln2_bias(layer))?)?;
            let y = match c.activation {
                Activation::Gelu => {
                    let z = tape.matmul(h, var(&names::ffn_in(layer))?)?;
                    let z = tape.add_row(z, var(&names::ffn_b_in(layer))?)?;
                    let a = tape.gelu(z);
                    let y = tape.matmul(a, var(&names::ffn_out(layer))?)?;
                    tape.add_row(y, var(&names::ffn_b_out(layer))?)?
                }
                Activation::SwiGlu => {
                    let g = tape.matmul(h, var(&names::ffn_gate(layer))?)?;
                    let g = tape.silu(g);
                    let u = tape.matmul(h, var(&names::ffn_up(layer))?)?;
                    let gu = tape.hadamard(g, u)?;
                    tape.matmul(gu, var(&names::ffn_down(layer))?)?
                }
            };
            x = tape.add(x, y)?;
        }
        let x = tape.layer_norm(x, var(names::LN_F_GAIN)?, var(names::LN_F_BIAS)?)?;
        let emb_t = tape.transpose(tok);
        let logits = tape.matmul(x, emb_t)?;
        Ok((logits, vars))
    }

    pub fn logits(&self, tokens: &[usize]) -> Result<Matrix> {
        let mut tape = Tape::new();
        let (logits, _) = self.build(&mut tape, tokens, false)?;
        Ok(tape.value(logits).clone())
    }

    /// Mean next-token cross-entropy over one sequence.
    pub fn loss(&self, sample: &Sample) -> Result<f64> {
        let mut tape = Tape::new();
        let (logits, _) = self.build(&mut tape, &sample.input, false)?;
        let loss = tape.cross_entropy(logits, &sample.target)?;
        Ok(tape.value(loss).get(0, 0))
    }

    /// Loss and gradient of every parameter for one sequence.
    pub fn loss_and_grads(&self, sample: &Sample) -> Result<(f64, GradMap)> {
        let mut tape = Tape::new();
        let (logits, vars) = self.build(&mut tape, &sample.input, true)?;
        let loss = tape.cross_entropy(logits, &sample.target)?;
        let value = tape.value(loss).get(0, 0);
        let mut grads = tape.backward(loss)?;
        let map = self
            .params
            .names()
            .zip(vars)
            .map(|(n, v)| (n.to_string(), grads.take(v)))
            .collect();
        Ok((value, map))
    }

    /// Per-sequence losses and gradients, computed in parallel and returned
    /// in batch order.
    pub fn sample_grads(&self, batch: &[Sample]) -> Result<Vec<(f64, GradMap)>> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        batch.par_iter().map(|s| self.loss_and_grads(s)).collect()
    }

    /// Mean loss and mean gradient over the batch. The reduction runs in
    /// batch order, so results do not depend on thread scheduling.
    pub fn batch_loss_and_grads(&self, batch: &[Sample]) -> Result<(f64, GradMap)> {
        let per = self.sample_grads(batch)?;
        let n = per.len() as f64;
        let mut iter = per.into_iter();
        let (mut loss, mut acc) = iter.next().expect("batch is non-empty");
        for (l, g) in iter {
            loss += l;
            for (name, m) in acc.iter_mut() {
                m.add_assign(&g[name.as_str()])?;
            }
        }
        for m in acc.values_mut() {
            *m = m.scale(1.0 / n);
        }
        Ok((loss / n, acc))
    }

    pub fn eval_loss(&self, batch: &[Sample]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let losses: Vec<f64> = batch.par_iter().map(|s| self.loss(s)).collect::<Result<_>>()?;
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    }
}
