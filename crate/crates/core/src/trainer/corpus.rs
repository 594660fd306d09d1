use crate::error::{Error, Result};
use crate::model::Sample;
use crate::numerics::Rng;

/// Moby-Dick, body text only (public domain).
pub const BUNDLED_TEXT: &str = include_str!("../../data/moby_dick.txt");

/// Character-level corpus with a contiguous train/eval split: the first
/// `1 − eval_fraction` of the text trains, the remainder evaluates.
#[derive(Clone, Debug, PartialEq)]
pub struct CharCorpus {
    alphabet: Vec<char>,
    ids: Vec<usize>,
    split: usize,
}

impl CharCorpus {
    pub fn bundled(eval_fraction: f64) -> Result<Self> {
        Self::from_text(BUNDLED_TEXT, eval_fraction)
    }

    /// The alphabet is the sorted set of distinct characters in `text`.
    pub fn from_text(text: &str, eval_fraction: f64) -> Result<Self> {
        if !(eval_fraction > 0.0 && eval_fraction < 1.0) {
            return Err(Error::Config(format!(
                "eval_fraction must lie in (0, 1), got {eval_fraction}"
            )));
        }
        let mut alphabet: Vec<char> = text.chars().collect();
        alphabet.sort_unstable();
        alphabet.dedup();
        let ids: Vec<usize> = text
            .chars()
            .map(|c| alphabet.binary_search(&c).expect("alphabet covers the text"))
            .collect();
        if ids.len() < 4 {
            return Err(Error::Config("corpus needs at least four characters".into()));
        }
        let split = ((ids.len() as f64) * (1.0 - eval_fraction)).round() as usize;
        let split = split.clamp(2, ids.len() - 2);
        Ok(Self { alphabet, ids, split })
    }

    pub fn vocab(&self) -> usize {
        self.alphabet.len()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn train_ids(&self) -> &[usize] {
        &self.ids[..self.split]
    }

    pub fn eval_ids(&self) -> &[usize] {
        &self.ids[self.split..]
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.alphabet
                    .binary_search(&c)
                    .map_err(|_| Error::Config(format!("character {c:?} not in corpus alphabet")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.alphabet.get(i).copied().unwrap_or('?')).collect()
    }

    fn window(ids: &[usize], start: usize, seq_len: usize) -> Sample {
        Sample {
            input: ids[start..start + seq_len].to_vec(),
            target: ids[start + 1..start + seq_len + 1].to_vec(),
        }
    }

    /// `count` windows from the training split at uniformly random offsets.
    pub fn sample_train(&self, rng: &mut Rng, count: usize, seq_len: usize) -> Result<Vec<Sample>> {
        let ids = self.train_ids();
        if seq_len == 0 || ids.len() <= seq_len {
            return Err(Error::Config(format!(
                "sequence length {seq_len} does not fit a training split of {}",
                ids.len()
            )));
        }
        let span = ids.len() - seq_len;
        Ok((0..count)
            .map(|_| Self::window(ids, rng.below(span), seq_len))
            .collect())
    }

    /// Up to `count` evenly spaced windows from the eval split.
    pub fn eval_samples(&self, count: usize, seq_len: usize) -> Result<Vec<Sample>> {
        let ids = self.eval_ids();
        if seq_len == 0 || ids.len() <= seq_len || count == 0 {
            return Err(Error::Config(format!(
                "cannot take {count} eval windows of length {seq_len} from {} characters",
                ids.len()
            )));
        }
        let span = ids.len() - seq_len;
        let stride = (span / count).max(1);
        Ok((0..count)
            .map(|k| k * stride)
            .take_while(|&s| s < span)
            .map(|s| Self::window(ids, s, seq_len))
            .collect())
    }
}
