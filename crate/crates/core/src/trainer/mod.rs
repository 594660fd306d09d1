//! Next-token training with scheduled coupled sparsification.

mod adam;
mod corpus;

pub use adam::{adam_step, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use corpus::{CharCorpus, BUNDLED_TEXT};

use crate::error::{Error, Result};
use crate::importance::CalibrationBatch;
use crate::model::{GradMap, Model, Sample};
use crate::numerics::Rng;
use crate::sparsifier::{min_achievable_params, run_schedule_step, Cadence, SparsifySchedule, StepReport};
use std::io::Write;

/// Consecutive no-op pruning rounds after which [`prune_pretrained`] gives up.
pub const STALL_ROUNDS: usize = 3;
pub const DEFAULT_MAX_ROUNDS: usize = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr: f64,
    /// Cosine decay from `lr` to zero over the run instead of a constant rate.
    pub cosine: bool,
    pub weight_decay: f64,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Used when the corpus is built for this config.
    pub eval_fraction: f64,
    pub eval_sequences: usize,
    pub calib_size: usize,
    pub schedule: Option<SparsifySchedule>,
    /// Fine-tuning steps after each pruning round in [`prune_pretrained`].
    pub recovery_steps: usize,
    pub max_rounds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            steps_per_epoch: 50,
            batch_size: 8,
            seq_len: 32,
            lr: 3e-3,
            cosine: false,
            weight_decay: 0.0,
            grad_clip: None,
            seed: 0,
            eval_fraction: 0.1,
            eval_sequences: 16,
            calib_size: 8,
            schedule: None,
            recovery_steps: 50,
            max_rounds: DEFAULT_MAX_ROUNDS,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &Model, corpus: &CharCorpus) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 || self.steps_per_epoch == 0 || self.seq_len == 0 {
            return fail("batch_size, steps_per_epoch and seq_len must be positive".into());
        }
        if self.seq_len > model.config().max_seq_len {
            return fail(format!(
                "seq_len {} exceeds model max_seq_len {}",
                self.seq_len,
                model.config().max_seq_len
            ));
        }
        if corpus.vocab() > model.config().vocab {
            return fail(format!(
                "corpus has {} symbols but the model vocabulary is {}",
                corpus.vocab(),
                model.config().vocab
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.weight_decay < 0.0 {
            return fail(format!("bad learning rate {} or weight decay {}", self.lr, self.weight_decay));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return fail(format!("grad_clip must be positive, got {c}"));
            }
        }
        if self.eval_sequences == 0 || self.calib_size == 0 {
            return fail("eval_sequences and calib_size must be positive".into());
        }
        if let Some(s) = &self.schedule {
            s.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub step: usize,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub param_count: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub optimizer: AdamState,
    /// One row per epoch (or pruning round), preceded by an epoch-0 row for
    /// the starting model.
    pub log: Vec<LogRow>,
    pub reports: Vec<StepReport>,
    /// Parameter count after every optimizer step and every schedule step.
    pub param_trajectory: Vec<usize>,
    /// Times a moment tensor was found out of shape with its weight.
    pub moment_mismatches: usize,
    /// `param_count <= target` at the end; true when no schedule is set.
    pub budget_met: bool,
}

struct Session<'a> {
    corpus: &'a CharCorpus,
    config: &'a TrainConfig,
    rng: Rng,
    calib_rng: Rng,
    eval: Vec<Sample>,
    total_steps: usize,
    out: TrainOutcome,
}

impl<'a> Session<'a> {
    fn start(model: Model, optimizer: AdamState, corpus: &'a CharCorpus, config: &'a TrainConfig, total_steps: usize) -> Result<Self> {
        config.validate(&model, corpus)?;
        if let Some(s) = &config.schedule {
            let floor = min_achievable_params(&model, s.scope, s.min_inner_dim)?;
            if floor > s.target_params {
                return Err(Error::BudgetInfeasible {
                    target: s.target_params,
                    min_achievable: floor,
                });
            }
        }
        let eval = corpus.eval_samples(config.eval_sequences, config.seq_len)?;
        let mut probe_rng = Rng::derived(config.seed, 2);
        let probe = corpus.sample_train(&mut probe_rng, config.eval_sequences, config.seq_len)?;
        let row = LogRow {
            epoch: 0,
            step: 0,
            train_loss: model.eval_loss(&probe)?,
            eval_loss: model.eval_loss(&eval)?,
            param_count: model.param_count(),
        };
        Ok(Self {
            corpus,
            config,
            rng: Rng::derived(config.seed, 0),
            calib_rng: Rng::derived(config.seed, 1),
            eval,
            total_steps,
            out: TrainOutcome {
                param_trajectory: vec![model.param_count()],
                model,
                optimizer,
                log: vec![row],
                reports: Vec::new(),
                moment_mismatches: 0,
                budget_met: false,
            },
        })
    }

    fn steps_done(&self) -> usize {
        self.out.optimizer.t() as usize
    }

    fn check_moments(&mut self) {
        if !self.out.optimizer.shapes_match(self.out.model.params()) {
            self.out.moment_mismatches += 1;
        }
        self.out.param_trajectory.push(self.out.model.param_count());
    }

    fn optimizer_step(&mut self) -> Result<f64> {
        let batch = self
            .corpus
            .sample_train(&mut self.rng, self.config.batch_size, self.config.seq_len)?;
        let (loss, mut grads) = self.out.model.batch_loss_and_grads(&batch)?;
        if let Some(c) = self.config.grad_clip {
            clip_grads(&mut grads, c);
        }
        if self.config.cosine && self.total_steps > 0 {
            let progress = (self.steps_done() as f64 / self.total_steps as f64).min(1.0);
            self.out.optimizer.lr = self.config.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        }
        self.out.optimizer.step(self.out.model.params_mut(), &grads)?;
        self.check_moments();
        Ok(loss)
    }

    fn above_budget(&self) -> bool {
        self.config
            .schedule
            .as_ref()
            .is_some_and(|s| self.out.model.param_count() > s.target_params)
    }

    fn sparsify(&mut self) -> Result<Option<&StepReport>> {
        let Some(schedule) = &self.config.schedule else {
            return Ok(None);
        };
        if self.out.model.param_count() <= schedule.target_params {
            return Ok(None);
        }
        let samples = self
            .corpus
            .sample_train(&mut self.calib_rng, self.config.calib_size, self.config.seq_len)?;
        let batch = CalibrationBatch::new(samples, self.out.model.config().vocab)?;
        let step = self.steps_done();
        let report = run_schedule_step(&mut self.out.model, &mut self.out.optimizer, &batch, schedule, step)?;
        self.out.reports.push(report);
        self.check_moments();
        Ok(self.out.reports.last())
    }

    fn log(&mut self, epoch: usize, train_loss: f64) -> Result<()> {
        let row = LogRow {
            epoch,
            step: self.steps_done(),
            train_loss,
            eval_loss: self.out.model.eval_loss(&self.eval)?,
            param_count: self.out.model.param_count(),
        };
        self.out.log.push(row);
        Ok(())
    }

    fn finish(mut self) -> TrainOutcome {
        self.out.budget_met = !self.above_budget();
        self.out
    }
}

/// Scales all gradients together so their global norm is at most `max_norm`.
pub fn clip_grads(grads: &mut GradMap, max_norm: f64) -> f64 {
    let norm = grads.values().map(|g| g.sum_of_squares()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            *g = g.scale(s);
        }
    }
    norm
}

/// Trains for `config.epochs × config.steps_per_epoch` Adam steps. With a
/// schedule, sparsification runs on its cadence while the model is above
/// budget; training always continues to the last epoch.
pub fn train(model: Model, corpus: &CharCorpus, config: &TrainConfig) -> Result<TrainOutcome> {
    let optimizer = AdamState::new(config.lr).with_weight_decay(config.weight_decay);
    let total = config.epochs * config.steps_per_epoch;
    let mut s = Session::start(model, optimizer, corpus, config, total)?;
    let cadence = config.schedule.as_ref().map(|s| s.cadence);
    for epoch in 1..=config.epochs {
        let mut loss_sum = 0.0;
        for _ in 0..config.steps_per_epoch {
            loss_sum += s.optimizer_step()?;
            if let Some(Cadence::Steps(n)) = cadence {
                if s.steps_done() % n == 0 {
                    s.sparsify()?;
                }
            }
        }
        if cadence == Some(Cadence::Epoch) {
            s.sparsify()?;
        }
        s.log(epoch, loss_sum / config.steps_per_epoch as f64)?;
    }
    Ok(s.finish())
}

/// Prunes an already trained model in rounds: one schedule step, then
/// `recovery_steps` of fine-tuning. Stops once within budget. Fails as
/// infeasible after [`STALL_ROUNDS`] consecutive rounds without removals or
/// after `max_rounds` rounds.
pub fn prune_pretrained(
    model: Model,
    optimizer: Option<AdamState>,
    corpus: &CharCorpus,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let schedule = config
        .schedule
        .as_ref()
        .ok_or_else(|| Error::Config("pruning needs a sparsify schedule".into()))?;
    let optimizer = match optimizer {
        Some(mut o) => {
            o.lr = config.lr;
            o.weight_decay = config.weight_decay;
            o
        }
        None => AdamState::new(config.lr).with_weight_decay(config.weight_decay),
    };
    let mut s = Session::start(model, optimizer, corpus, config, 0)?;
    let mut stalls = 0;
    let mut round = 0;
    while s.above_budget() {
        if round == config.max_rounds {
            return Err(Error::BudgetInfeasible {
                target: schedule.target_params,
                min_achievable: s.out.model.param_count(),
            });
        }
        round += 1;
        let noop = s.sparsify()?.is_some_and(|r| r.is_noop());
        stalls = if noop { stalls + 1 } else { 0 };
        if stalls >= STALL_ROUNDS {
            return Err(Error::BudgetInfeasible {
                target: schedule.target_params,
                min_achievable: s.out.model.param_count(),
            });
        }
        let mut loss_sum = 0.0;
        for _ in 0..config.recovery_steps {
            loss_sum += s.optimizer_step()?;
        }
        let train_loss = if config.recovery_steps == 0 {
            f64::NAN
        } else {
            loss_sum / config.recovery_steps as f64
        };
        s.log(round, train_loss)?;
    }
    Ok(s.finish())
}

/// CSV with header `epoch,step,train_loss,eval_loss,param_count`.
pub fn write_log_csv<W: Write>(rows: &[LogRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "step", "train_loss", "eval_loss", "param_count"])?;
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            r.step.to_string(),
            format!("{:.6}", r.train_loss),
            format!("{:.6}", r.eval_loss),
            r.param_count.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
