//! Sectioned `key = value` run configuration.
//!
//! ```text
//! [model]
//! d_model = 64
//! [train]
//! epochs = 20
//! [sparsify]
//! target_fraction = 0.75
//! ```
//!
//! `#` and `;` start comments. Every key is optional; unknown sections,
//! unknown keys and repeated keys are errors.

use cosparse::model::{Activation, ModelConfig};
use cosparse::sparsifier::{Cadence, Scope, SparsifySchedule, Strategy};
use cosparse::trainer::TrainConfig;
use std::fmt::{self, Write as _};

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
#[error("line {line}: {key}: {message}")]
pub struct ConfigError {
    pub line: usize,
    pub key: String,
    pub message: String,
}

fn err(line: usize, key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError {
        line,
        key: key.to_string(),
        message: message.into(),
    }
}

/// Parameter budget as written in the file, resolved against the model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Budget {
    Params(usize),
    Fraction(f64),
}

impl Budget {
    pub fn resolve(self, param_count: usize) -> usize {
        match self {
            Budget::Params(n) => n,
            Budget::Fraction(f) => (f * param_count as f64).floor() as usize,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparsifyConfig {
    pub budget: Budget,
    /// Template; `target_params` is filled in by [`SparsifyConfig::schedule`].
    pub template: SparsifySchedule,
}

impl SparsifyConfig {
    pub fn schedule(&self, param_count: usize) -> SparsifySchedule {
        SparsifySchedule {
            target_params: self.budget.resolve(param_count),
            ..self.template.clone()
        }
    }
}

impl Default for SparsifyConfig {
    fn default() -> Self {
        Self {
            budget: Budget::Fraction(0.75),
            template: SparsifySchedule::new(1),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TheoryConfig {
    pub sizes: Vec<usize>,
    pub trials: usize,
    pub seed: u64,
    /// `(d_m, d_ffn, l)` for the feed-forward bound check.
    pub bound_dims: (usize, usize, usize),
    pub bound_trials: usize,
    pub unit_spread: f64,
    pub sparsity_levels: Vec<f64>,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            sizes: vec![100],
            trials: 5000,
            seed: 7,
            bound_dims: (32, 128, 16),
            bound_trials: 100,
            unit_spread: 1.0,
            sparsity_levels: vec![0.3, 0.5],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// `vocab = 0` means "take it from the corpus".
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// `None` for the bundled corpus, else a path to a UTF-8 text file.
    pub corpus: Option<String>,
    pub sparsify: Option<SparsifyConfig>,
    pub theory: TheoryConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig {
                vocab: 0,
                ..ModelConfig::default()
            },
            train: TrainConfig::default(),
            corpus: None,
            sparsify: None,
            theory: TheoryConfig::default(),
        }
    }
}

struct Value<'a> {
    line: usize,
    key: &'a str,
    raw: &'a str,
}

impl Value<'_> {
    fn parse<T: std::str::FromStr>(&self, what: &str) -> Result<T, ConfigError> {
        self.raw
            .parse()
            .map_err(|_| err(self.line, self.key, format!("expected {what}, got {:?}", self.raw)))
    }

    fn usize(&self) -> Result<usize, ConfigError> {
        self.parse("a non-negative integer")
    }

    fn f64(&self) -> Result<f64, ConfigError> {
        let v: f64 = self.parse("a number")?;
        if !v.is_finite() {
            return Err(err(self.line, self.key, "must be finite"));
        }
        Ok(v)
    }

    fn bool(&self) -> Result<bool, ConfigError> {
        match self.raw {
            "true" | "yes" | "on" | "1" => Ok(true),
            "false" | "no" | "off" | "0" => Ok(false),
            _ => Err(err(self.line, self.key, format!("expected true or false, got {:?}", self.raw))),
        }
    }

    fn list<T: std::str::FromStr>(&self, what: &str) -> Result<Vec<T>, ConfigError> {
        self.raw
            .split(',')
            .map(|p| {
                p.trim()
                    .parse()
                    .map_err(|_| err(self.line, self.key, format!("expected a list of {what}, got {:?}", self.raw)))
            })
            .collect()
    }

    fn fail(&self, message: impl Into<String>) -> ConfigError {
        err(self.line, self.key, message)
    }
}

pub fn parse_cadence(s: &str) -> Option<Cadence> {
    if s == "epoch" {
        return Some(Cadence::Epoch);
    }
    s.strip_prefix("steps:")?.parse().ok().map(Cadence::Steps)
}

pub fn cadence_str(c: Cadence) -> String {
    match c {
        Cadence::Epoch => "epoch".into(),
        Cadence::Steps(n) => format!("steps:{n}"),
    }
}

pub fn parse_scope(s: &str) -> Option<Scope> {
    match s {
        "all" => Some(Scope::All),
        "ffn" => Some(Scope::FfnOnly),
        "attention" => Some(Scope::AttentionOnly),
        _ => None,
    }
}

pub fn scope_str(s: Scope) -> &'static str {
    match s {
        Scope::All => "all",
        Scope::FfnOnly => "ffn",
        Scope::AttentionOnly => "attention",
    }
}

fn parse_strategy(s: &str) -> Option<Strategy> {
    match s {
        "coupled" => Some(Strategy::Coupled),
        "uncoupled" => Some(Strategy::Uncoupled),
        _ => None,
    }
}

fn strategy_str(s: Strategy) -> &'static str {
    match s {
        Strategy::Coupled => "coupled",
        Strategy::Uncoupled => "uncoupled",
    }
}

fn set_model(m: &mut ModelConfig, v: &Value) -> Result<(), ConfigError> {
    match v.key {
        "vocab" => m.vocab = v.usize()?,
        "d_model" => m.d_model = v.usize()?,
        "layers" => m.layers = v.usize()?,
        "heads" => m.heads = v.usize()?,
        "kv_groups" => m.kv_groups = v.usize()?,
        "head_dim" => m.head_dim = v.usize()?,
        "d_ffn" => m.d_ffn = v.usize()?,
        "activation" => {
            m.activation = Activation::parse(v.raw).ok_or_else(|| v.fail("expected gelu or swiglu"))?
        }
        "rope" => m.rope = v.bool()?,
        "rope_base" => m.rope_base = v.f64()?,
        "max_seq_len" => m.max_seq_len = v.usize()?,
        "causal" => m.causal = v.bool()?,
        "init_std" => m.init_std = v.f64()?,
        _ => return Err(v.fail("unknown key in [model]")),
    }
    Ok(())
}

fn set_train(cfg: &mut RunConfig, v: &Value) -> Result<(), ConfigError> {
    let t = &mut cfg.train;
    match v.key {
        "epochs" => t.epochs = v.usize()?,
        "steps_per_epoch" => t.steps_per_epoch = v.usize()?,
        "batch_size" => t.batch_size = v.usize()?,
        "seq_len" => t.seq_len = v.usize()?,
        "lr" => t.lr = v.f64()?,
        "cosine" => t.cosine = v.bool()?,
        "weight_decay" => t.weight_decay = v.f64()?,
        "grad_clip" => {
            t.grad_clip = match v.raw {
                "none" => None,
                _ => Some(v.f64()?),
            }
        }
        "seed" => t.seed = v.parse("a non-negative integer")?,
        "eval_fraction" => t.eval_fraction = v.f64()?,
        "eval_sequences" => t.eval_sequences = v.usize()?,
        "calib_size" => t.calib_size = v.usize()?,
        "recovery_steps" => t.recovery_steps = v.usize()?,
        "max_rounds" => t.max_rounds = v.usize()?,
        "corpus" => {
            cfg.corpus = match v.raw {
                "bundled" => None,
                path => Some(path.to_string()),
            }
        }
        _ => return Err(v.fail("unknown key in [train]")),
    }
    Ok(())
}

fn set_sparsify(s: &mut SparsifyConfig, v: &Value) -> Result<(), ConfigError> {
    let t = &mut s.template;
    match v.key {
        "target_params" => s.budget = Budget::Params(v.usize()?),
        "target_fraction" => {
            let f = v.f64()?;
            if !(f > 0.0 && f <= 1.0) {
                return Err(v.fail("must lie in (0, 1]"));
            }
            s.budget = Budget::Fraction(f)
        }
        "top_k" => t.top_k_fraction = v.f64()?,
        "theta" => t.theta = v.f64()?,
        "min_inner_dim" => t.min_inner_dim = v.usize()?,
        "cadence" => t.cadence = parse_cadence(v.raw).ok_or_else(|| v.fail("expected epoch or steps:N"))?,
        "strategy" => t.strategy = parse_strategy(v.raw).ok_or_else(|| v.fail("expected coupled or uncoupled"))?,
        "scope" => t.scope = parse_scope(v.raw).ok_or_else(|| v.fail("expected all, ffn or attention"))?,
        _ => return Err(v.fail("unknown key in [sparsify]")),
    }
    Ok(())
}

fn set_theory(t: &mut TheoryConfig, v: &Value) -> Result<(), ConfigError> {
    match v.key {
        "sizes" => t.sizes = v.list("integers")?,
        "trials" => t.trials = v.usize()?,
        "seed" => t.seed = v.parse("a non-negative integer")?,
        "bound_dims" => {
            let d: Vec<usize> = v.list("integers")?;
            let [a, b, c] = d[..] else {
                return Err(v.fail("expected d_m,d_ffn,l"));
            };
            t.bound_dims = (a, b, c);
        }
        "bound_trials" => t.bound_trials = v.usize()?,
        "unit_spread" => t.unit_spread = v.f64()?,
        "sparsity_levels" => t.sparsity_levels = v.list("numbers")?,
        _ => return Err(v.fail("unknown key in [theory]")),
    }
    Ok(())
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Section {
    Model,
    Train,
    Sparsify,
    Theory,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut section = None;
        let mut seen: Vec<(Section, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split(['#', ';']).next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(name) = content.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
                let s = match name.trim() {
                    "model" => Section::Model,
                    "train" => Section::Train,
                    "sparsify" => Section::Sparsify,
                    "theory" => Section::Theory,
                    other => return Err(err(line, other, "unknown section")),
                };
                if s == Section::Sparsify && cfg.sparsify.is_none() {
                    cfg.sparsify = Some(SparsifyConfig::default());
                }
                section = Some(s);
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(err(line, content, "expected key = value"));
            };
            let (key, raw) = (key.trim(), value.trim());
            let Some(s) = section else {
                return Err(err(line, key, "key outside of any section"));
            };
            if seen.iter().any(|(ss, k)| *ss == s && k == key) {
                return Err(err(line, key, "repeated key"));
            }
            seen.push((s, key.to_string()));
            let v = Value { line, key, raw };
            match s {
                Section::Model => set_model(&mut cfg.model, &v)?,
                Section::Train => set_train(&mut cfg, &v)?,
                Section::Sparsify => set_sparsify(cfg.sparsify.as_mut().expect("created with section"), &v)?,
                Section::Theory => set_theory(&mut cfg.theory, &v)?,
            }
        }
        Ok(cfg)
    }
}

/// `[model]` block that [`RunConfig::parse`] reads back to the same config.
pub fn model_section(m: &ModelConfig) -> String {
    let mut s = String::from("[model]\n");
    let _ = write!(
        s,
        "vocab = {}\nd_model = {}\nlayers = {}\nheads = {}\nkv_groups = {}\nhead_dim = {}\nd_ffn = {}\n\
         activation = {}\nrope = {}\nrope_base = {:?}\nmax_seq_len = {}\ncausal = {}\ninit_std = {:?}\n",
        m.vocab,
        m.d_model,
        m.layers,
        m.heads,
        m.kv_groups,
        m.head_dim,
        m.d_ffn,
        m.activation.as_str(),
        m.rope,
        m.rope_base,
        m.max_seq_len,
        m.causal,
        m.init_std
    );
    s
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&model_section(&self.model))?;
        let t = &self.train;
        writeln!(f, "\n[train]")?;
        writeln!(f, "epochs = {}", t.epochs)?;
        writeln!(f, "steps_per_epoch = {}", t.steps_per_epoch)?;
        writeln!(f, "batch_size = {}", t.batch_size)?;
        writeln!(f, "seq_len = {}", t.seq_len)?;
        writeln!(f, "lr = {:?}", t.lr)?;
        writeln!(f, "cosine = {}", t.cosine)?;
        writeln!(f, "weight_decay = {:?}", t.weight_decay)?;
        match t.grad_clip {
            Some(c) => writeln!(f, "grad_clip = {c:?}")?,
            None => writeln!(f, "grad_clip = none")?,
        }
        writeln!(f, "seed = {}", t.seed)?;
        writeln!(f, "eval_fraction = {:?}", t.eval_fraction)?;
        writeln!(f, "eval_sequences = {}", t.eval_sequences)?;
        writeln!(f, "calib_size = {}", t.calib_size)?;
        writeln!(f, "recovery_steps = {}", t.recovery_steps)?;
        writeln!(f, "max_rounds = {}", t.max_rounds)?;
        writeln!(f, "corpus = {}", self.corpus.as_deref().unwrap_or("bundled"))?;
        if let Some(sp) = &self.sparsify {
            writeln!(f, "\n[sparsify]")?;
            match sp.budget {
                Budget::Params(n) => writeln!(f, "target_params = {n}")?,
                Budget::Fraction(x) => writeln!(f, "target_fraction = {x:?}")?,
            }
            let s = &sp.template;
            writeln!(f, "top_k = {:?}", s.top_k_fraction)?;
            writeln!(f, "theta = {:?}", s.theta)?;
            writeln!(f, "min_inner_dim = {}", s.min_inner_dim)?;
            writeln!(f, "cadence = {}", cadence_str(s.cadence))?;
            writeln!(f, "strategy = {}", strategy_str(s.strategy))?;
            writeln!(f, "scope = {}", scope_str(s.scope))?;
        }
        let th = &self.theory;
        let join = |v: Vec<String>| v.join(",");
        writeln!(f, "\n[theory]")?;
        writeln!(f, "sizes = {}", join(th.sizes.iter().map(|x| x.to_string()).collect()))?;
        writeln!(f, "trials = {}", th.trials)?;
        writeln!(f, "seed = {}", th.seed)?;
        let (a, b, c) = th.bound_dims;
        writeln!(f, "bound_dims = {a},{b},{c}")?;
        writeln!(f, "bound_trials = {}", th.bound_trials)?;
        writeln!(f, "unit_spread = {:?}", th.unit_spread)?;
        writeln!(
            f,
            "sparsity_levels = {}",
            join(th.sparsity_levels.iter().map(|x| format!("{x:?}")).collect())
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_defaults() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
        assert_eq!(RunConfig::parse("# nothing\n\n").unwrap(), RunConfig::default());
    }

    #[test]
    fn sections_and_values() {
        let cfg = RunConfig::parse(
            "[model]\nd_model = 32 # narrow\nactivation = swiglu\nrope = true\n\
             [train]\nepochs=3\ngrad_clip = 1.5\ncorpus = /tmp/x.txt\n\
             [sparsify]\ntarget_params = 5000\ncadence = steps:10\nscope = ffn\n\
             [theory]\nsizes = 100, 500\nbound_dims = 8,16,4\n",
        )
        .unwrap();
        assert_eq!(cfg.model.d_model, 32);
        assert_eq!(cfg.model.activation, Activation::SwiGlu);
        assert!(cfg.model.rope);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.grad_clip, Some(1.5));
        assert_eq!(cfg.corpus.as_deref(), Some("/tmp/x.txt"));
        let sp = cfg.sparsify.unwrap();
        assert_eq!(sp.budget, Budget::Params(5000));
        assert_eq!(sp.template.cadence, Cadence::Steps(10));
        assert_eq!(sp.template.scope, Scope::FfnOnly);
        assert_eq!(cfg.theory.sizes, vec![100, 500]);
        assert_eq!(cfg.theory.bound_dims, (8, 16, 4));
    }

    #[test]
    fn errors_name_key_and_line() {
        let e = RunConfig::parse("[model]\nd_model = 8\nwidth = 3\n").unwrap_err();
        assert_eq!((e.line, e.key.as_str()), (3, "width"));
        assert!(e.to_string().starts_with("line 3: width:"));
        let e = RunConfig::parse("[train]\nlr = fast\n").unwrap_err();
        assert_eq!((e.line, e.key.as_str()), (2, "lr"));
        assert!(RunConfig::parse("[model]\nlayers = 1\nlayers = 2\n").is_err());
        assert!(RunConfig::parse("d_model = 1\n").is_err());
        assert!(RunConfig::parse("[optim]\n").is_err());
        assert!(RunConfig::parse("[model]\njust words\n").is_err());
        assert!(RunConfig::parse("[sparsify]\ntarget_fraction = 1.5\n").is_err());
    }

    #[test]
    fn display_round_trips() {
        let mut cfg = RunConfig::parse("[model]\ninit_std = 0.013\n[train]\nlr = 0.0007\n[sparsify]\ntheta = 0.85\n")
            .unwrap();
        cfg.theory.sparsity_levels = vec![0.1, 0.25];
        assert_eq!(RunConfig::parse(&cfg.to_string()).unwrap(), cfg);
        let m = ModelConfig::default();
        assert_eq!(RunConfig::parse(&model_section(&m)).unwrap().model, m);
    }

    #[test]
    fn budget_resolution() {
        assert_eq!(Budget::Fraction(0.75).resolve(1000), 750);
        assert_eq!(Budget::Fraction(0.75).resolve(1001), 750);
        assert_eq!(Budget::Params(12).resolve(1000), 12);
    }
}
