use crate::error::{Error, Result};
use crate::numerics::Matrix;
use indexmap::IndexMap;

/// Named weight matrices in a fixed insertion order. Vectors (biases, norm
/// gains) are stored as `1 × n` matrices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, Matrix>,
}

/// Gradients or moments keyed like a [`ParamStore`].
pub type GradMap = IndexMap<String, Matrix>;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Matrix> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.get_index_of(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Matrix)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar parameter count.
    pub fn param_count(&self) -> usize {
        self.entries.values().map(Matrix::len).sum()
    }
}

/// Canonical parameter names.
pub mod names {
    pub const TOK_EMB: &str = "tok_emb";
    pub const POS_EMB: &str = "pos_emb";
    pub const LN_F_GAIN: &str = "ln_f.gain";
    pub const LN_F_BIAS: &str = "ln_f.bias";

    pub fn ln1_gain(l: usize) -> String {
        format!("layers.{l}.ln1.gain")
    }
    pub fn ln1_bias(l: usize) -> String {
        format!("layers.{l}.ln1.bias")
    }
    pub fn ln2_gain(l: usize) -> String {
        format!("layers.{l}.ln2.gain")
    }
    pub fn ln2_bias(l: usize) -> String {
        format!("layers.{l}.ln2.bias")
    }
    pub fn q(l: usize, head: usize) -> String {
        format!("layers.{l}.attn.q.{head}")
    }
    pub fn k(l: usize, group: usize) -> String {
        format!("layers.{l}.attn.k.{group}")
    }
    pub fn v(l: usize, group: usize) -> String {
        format!("layers.{l}.attn.v.{group}")
    }
    pub fn o(l: usize, head: usize) -> String {
        format!("layers.{l}.attn.o.{head}")
    }
    pub fn rope_q(l: usize, head: usize) -> String {
        format!("layers.{l}.attn.rope_q.{head}")
    }
    pub fn rope_k(l: usize, group: usize) -> String {
        format!("layers.{l}.attn.rope_k.{group}")
    }
    pub fn ffn_in(l: usize) -> String {
        format!("layers.{l}.ffn.w_in")
    }
    pub fn ffn_b_in(l: usize) -> String {
        format!("layers.{l}.ffn.b_in")
    }
    pub fn ffn_out(l: usize) -> String {
        format!("layers.{l}.ffn.w_out")
    }
    pub fn ffn_b_out(l: usize) -> String {
        format!("layers.{l}.ffn.b_out")
    }
    pub fn ffn_gate(l: usize) -> String {
        format!("layers.{l}.ffn.w_gate")
    }
    pub fn ffn_up(l: usize) -> String {
        format!("layers.{l}.ffn.w_up")
    }
    pub fn ffn_down(l: usize) -> String {
        format!("layers.{l}.ffn.w_down")
    }
}
