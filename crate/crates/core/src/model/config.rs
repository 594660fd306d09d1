use crate::error::{Error, Result};
use crate::model::rope::DEFAULT_ROPE_BASE;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    SwiGlu,
}

impl Activation {
    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Gelu => "gelu",
            Activation::SwiGlu => "swiglu",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gelu" => Some(Activation::Gelu),
            "swiglu" => Some(Activation::SwiGlu),
            _ => None,
        }
    }
}

/// Shape of a freshly initialised model. Inner dimensions of individual
/// pairs drift below `head_dim` / `d_ffn` once sparsification starts; those
/// live in the weight shapes, not here.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    /// Number of key/value groups; equal to `heads` for plain multi-head attention.
    pub kv_groups: usize,
    pub head_dim: usize,
    pub d_ffn: usize,
    pub activation: Activation,
    pub rope: bool,
    pub rope_base: f64,
    pub max_seq_len: usize,
    pub causal: bool,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab: 64,
            d_model: 64,
            layers: 2,
            heads: 4,
            kv_groups: 4,
            head_dim: 16,
            d_ffn: 128,
            activation: Activation::Gelu,
            rope: false,
            rope_base: DEFAULT_ROPE_BASE,
            max_seq_len: 64,
            causal: true,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab", self.vocab),
            ("d_model", self.d_model),
            ("layers", self.layers),
            ("heads", self.heads),
            ("kv_groups", self.kv_groups),
            ("head_dim", self.head_dim),
            ("d_ffn", self.d_ffn),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model != self.heads * self.head_dim {
            return Err(Error::Config(format!(
                "d_model ({}) must equal heads ({}) x head_dim ({})",
                self.d_model, self.heads, self.head_dim
            )));
        }
        if self.heads % self.kv_groups != 0 {
            return Err(Error::Config(format!(
                "heads ({}) must be divisible by kv_groups ({})",
                self.heads, self.kv_groups
            )));
        }
        if self.rope && self.head_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "rope needs an even head_dim, got {}",
                self.head_dim
            )));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::Config("init_std must be positive".into()));
        }
        Ok(())
    }

    pub fn heads_per_group(&self) -> usize {
        self.heads / self.kv_groups
    }

    /// Key/value group serving query head `head`.
    pub fn group_of(&self, head: usize) -> usize {
        head / self.heads_per_group()
    }

    pub fn heads_in_group(&self, group: usize) -> std::ops::Range<usize> {
        let per = self.heads_per_group();
        group * per..(group + 1) * per
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_bad_grouping_and_dims() {
        let c = ModelConfig {
            kv_groups: 3,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = ModelConfig {
            head_dim: 15,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = ModelConfig {
            d_model: 60,
            heads: 4,
            head_dim: 15,
            rope: true,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn grouping() {
        let c = ModelConfig {
            kv_groups: 2,
            ..Default::default()
        };
        assert_eq!((0..4).map(|h| c.group_of(h)).collect::<Vec<_>>(), vec![0, 0, 1, 1]);
        assert_eq!(c.heads_in_group(1), 2..4);
    }
}
