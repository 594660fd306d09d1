use crate::checkpoint::{checksum_hex, Checkpoint, CheckpointError};
use crate::config::{ConfigError, RunConfig};
use clap::{Parser, Subcommand};
use cosparse::model::{pair_ids, Model, PairKind, Side};
use cosparse::sparsifier::{write_report_csv, DEFAULT_MIN_INNER_DIM};
use cosparse::theory::{ffn_bound_check, ffn_coupled_vs_uncoupled, run_comparison, write_summary_csv};
use cosparse::trainer::{prune_pretrained, train, write_log_csv, CharCorpus, TrainConfig, TrainOutcome};
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INFEASIBLE: i32 = 3;
pub const EXIT_CORRUPT: i32 = 4;

pub const THREADS_ENV: &str = "ECOSPA_THREADS";

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "train_log.csv";
pub const REPORT_FILE: &str = "removals.csv";
pub const CONFIG_FILE: &str = "config.txt";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("{0}")]
    Core(#[from] cosparse::Error),
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
    #[error("budget of {target} parameters not reached; model still has {actual}")]
    BudgetNotMet { target: usize, actual: usize },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => EXIT_USAGE,
            CliError::Core(cosparse::Error::Config(_)) => EXIT_USAGE,
            CliError::Core(cosparse::Error::BudgetInfeasible { .. }) | CliError::BudgetNotMet { .. } => EXIT_INFEASIBLE,
            CliError::Checkpoint(_) => EXIT_CORRUPT,
            CliError::Core(_) | CliError::Io { .. } => EXIT_FAILURE,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
    let context = context.into();
    move |source| CliError::Io { context, source }
}

#[derive(Debug, Parser)]
#[command(name = "cosparse", version, about = "Coupled structural sparsification experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Coupled versus individual single-index removal on random products.
    ValidateTheory {
        /// Matrix sizes, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "100")]
        size: Vec<usize>,
        #[arg(long, default_value_t = 5000)]
        trials: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model from scratch, sparsifying on the configured schedule.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Prune a trained checkpoint down to the configured budget.
    Prune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Per-pair inner dimensions of a checkpoint.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also write the table as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the linearised feed-forward removal bound on random blocks.
    FfnBound {
        /// d_model,d_ffn,sequence length.
        #[arg(long, value_delimiter = ',', default_value = "32,128,16")]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        unit_spread: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One-shot feed-forward pruning, coupled versus uncoupled.
    FfnCompare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.3,0.5")]
        sparsity_list: Vec<f64>,
        /// Model to prune; trained densely from the config when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Caps the global rayon pool at `ECOSPA_THREADS` when set. Later calls are
/// no-ops once the pool exists.
pub fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got {raw:?}")))?;
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Parses `args` (including the program name) and runs the command. Returns
/// the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    match configure_threads().and_then(|_| execute(cli.command, out)) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::ValidateTheory { size, trials, seed, out: path } => validate_theory(&size, trials, seed, path.as_deref(), out),
        Command::Train { config, out_dir } => cmd_train(&config, &out_dir, out),
        Command::Prune { config, checkpoint, out_dir } => cmd_prune(&config, &checkpoint, &out_dir, out),
        Command::Inspect { checkpoint, out: path } => cmd_inspect(&checkpoint, path.as_deref(), out),
        Command::FfnBound {
            dims,
            trials,
            seed,
            unit_spread,
            out: path,
        } => cmd_ffn_bound(&dims, trials, seed, unit_spread, path.as_deref(), out),
        Command::FfnCompare {
            config,
            sparsity_list,
            checkpoint,
            out: path,
        } => cmd_ffn_compare(&config, &sparsity_list, checkpoint.as_deref(), path.as_deref(), out),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(io_err(format!("writing {}", path.display())))
}

fn emit(path: Option<&Path>, csv: &[u8], out: &mut dyn Write) -> Result<()> {
    match path {
        Some(p) => write_file(p, csv),
        None => out.write_all(csv).map_err(io_err("writing output")),
    }
}

fn say(out: &mut dyn Write, line: impl std::fmt::Display) -> Result<()> {
    writeln!(out, "{line}").map_err(io_err("writing output"))
}

pub fn validate_theory(sizes: &[usize], trials: usize, seed: u64, path: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    if sizes.is_empty() {
        return Err(CliError::Usage("--size needs at least one value".into()));
    }
    let summaries = sizes
        .iter()
        .map(|&n| run_comparison(n, trials, seed))
        .collect::<cosparse::Result<Vec<_>>>()?;
    let mut csv = Vec::new();
    write_summary_csv(&summaries, &mut csv)?;
    if let Some(p) = path {
        write_file(p, &csv)?;
    }
    for s in &summaries {
        say(
            out,
            format_args!(
                "n={} trials={} seed={} avg_coupled={:.4} avg_individual={:.4} win_probability={:.4}",
                s.n, s.trials, s.seed, s.avg_err_coupled, s.avg_err_individual, s.win_probability
            ),
        )?;
    }
    Ok(())
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(io_err(format!("reading {}", path.display())))?;
    Ok(RunConfig::parse(&text)?)
}

pub fn load_corpus(cfg: &RunConfig) -> Result<CharCorpus> {
    Ok(match &cfg.corpus {
        None => CharCorpus::bundled(cfg.train.eval_fraction)?,
        Some(p) => {
            let text = fs::read_to_string(p).map_err(io_err(format!("reading corpus {p}")))?;
            CharCorpus::from_text(&text, cfg.train.eval_fraction)?
        }
    })
}

/// A fresh model for `cfg`, with the vocabulary taken from the corpus when
/// the config leaves it at zero.
pub fn fresh_model(cfg: &RunConfig, corpus: &CharCorpus) -> Result<Model> {
    let mut mc = cfg.model.clone();
    if mc.vocab == 0 {
        mc.vocab = corpus.vocab();
    }
    Ok(Model::new(mc, cfg.train.seed)?)
}

fn train_config(cfg: &RunConfig, param_count: usize) -> TrainConfig {
    TrainConfig {
        schedule: cfg.sparsify.as_ref().map(|s| s.schedule(param_count)),
        ..cfg.train.clone()
    }
}

fn write_outcome(cfg: &RunConfig, outcome: &TrainOutcome, dir: &Path, out: &mut dyn Write) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(format!("creating {}", dir.display())))?;
    let mut log = Vec::new();
    write_log_csv(&outcome.log, &mut log)?;
    write_file(&dir.join(LOG_FILE), &log)?;
    let mut rep = Vec::new();
    write_report_csv(&outcome.reports, &mut rep)?;
    write_file(&dir.join(REPORT_FILE), &rep)?;
    write_file(&dir.join(CONFIG_FILE), cfg.to_string().as_bytes())?;
    let ck = Checkpoint::new(outcome.model.clone(), Some(outcome.optimizer.clone())).to_bytes();
    write_file(&dir.join(CHECKPOINT_FILE), &ck)?;
    let first = &outcome.log[0];
    let last = outcome.log.last().expect("log has an initial row");
    say(
        out,
        format_args!(
            "params {} -> {}  eval loss {:.4} -> {:.4}  steps {}",
            first.param_count, last.param_count, first.eval_loss, last.eval_loss, last.step
        ),
    )?;
    say(out, format_args!("checkpoint {} sha256 {}", dir.join(CHECKPOINT_FILE).display(), checksum_hex(&ck)))
}

fn check_budget(tc: &TrainConfig, outcome: &TrainOutcome) -> Result<()> {
    match &tc.schedule {
        Some(s) if !outcome.budget_met => Err(CliError::BudgetNotMet {
            target: s.target_params,
            actual: outcome.model.param_count(),
        }),
        _ => Ok(()),
    }
}

pub fn cmd_train(config: &Path, dir: &Path, out: &mut dyn Write) -> Result<()> {
    let cfg = load_config(config)?;
    let corpus = load_corpus(&cfg)?;
    let model = fresh_model(&cfg, &corpus)?;
    let tc = train_config(&cfg, model.param_count());
    if let Some(s) = &tc.schedule {
        say(out, format_args!("budget {} of {} parameters", s.target_params, model.param_count()))?;
    }
    let outcome = train(model, &corpus, &tc)?;
    write_outcome(&cfg, &outcome, dir, out)?;
    check_budget(&tc, &outcome)
}

pub fn cmd_prune(config: &Path, checkpoint: &Path, dir: &Path, out: &mut dyn Write) -> Result<()> {
    let cfg = load_config(config)?;
    let ck = Checkpoint::load(checkpoint)?;
    let corpus = load_corpus(&cfg)?;
    let tc = train_config(&cfg, ck.model.param_count());
    if tc.schedule.is_none() {
        return Err(CliError::Usage("prune needs a [sparsify] section".into()));
    }
    let outcome = prune_pretrained(ck.model, ck.optimizer, &corpus, &tc)?;
    write_outcome(&cfg, &outcome, dir, out)?;
    check_budget(&tc, &outcome)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DimRow {
    pub layer: usize,
    pub pair_id: String,
    pub kind: PairKind,
    pub original: usize,
    pub current: usize,
}

pub fn dimension_table(model: &Model) -> Result<Vec<DimRow>> {
    let c = model.config();
    pair_ids(model)
        .into_iter()
        .map(|id| {
            let original = match id.kind {
                PairKind::Qk | PairKind::Vo => c.head_dim,
                PairKind::Io => c.d_ffn,
            };
            Ok(DimRow {
                layer: id.layer,
                pair_id: id.to_string(),
                kind: id.kind,
                original,
                current: model.side_inner_dim(id, Side::W1)?,
            })
        })
        .collect()
}

pub fn cmd_inspect(checkpoint: &Path, path: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let rows = dimension_table(&ck.model)?;
    say(out, format_args!("{:<6} {:<10} {:<5} {:>9} {:>8}", "layer", "pair", "kind", "original", "current"))?;
    for r in &rows {
        say(
            out,
            format_args!(
                "{:<6} {:<10} {:<5} {:>9} {:>8}",
                r.layer,
                r.pair_id,
                r.kind.as_str(),
                r.original,
                r.current
            ),
        )?;
    }
    say(out, format_args!("total_params {}", ck.model.param_count()))?;
    if let Some(p) = path {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| CliError::Core(e.into());
        w.write_record(["layer", "pair_id", "kind", "original_dim", "current_dim"]).map_err(csv_err)?;
        for r in &rows {
            w.write_record([
                r.layer.to_string(),
                r.pair_id.clone(),
                r.kind.as_str().to_string(),
                r.original.to_string(),
                r.current.to_string(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Usage(e.to_string()))?;
        write_file(p, &bytes)?;
    }
    Ok(())
}

pub fn cmd_ffn_bound(dims: &[usize], trials: usize, seed: u64, spread: f64, path: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let [d_m, d_ffn, l] = dims[..] else {
        return Err(CliError::Usage(format!("--dims needs d_model,d_ffn,seq_len, got {dims:?}")));
    };
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(CliError::Usage(format!("--unit-spread must be non-negative, got {spread}")));
    }
    let r = ffn_bound_check(d_m, d_ffn, l, trials, seed, spread)?;
    let csv = format!(
        "d_model,d_ffn,seq_len,trials,cases,violations,mean_spearman,min_spearman\n{d_m},{d_ffn},{l},{},{},{},{:.6},{:.6}\n",
        r.trials, r.cases, r.violations, r.mean_spearman, r.min_spearman
    );
    emit(path, csv.as_bytes(), out)
}

pub fn cmd_ffn_compare(config: &Path, levels: &[f64], checkpoint: Option<&Path>, path: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let cfg = load_config(config)?;
    let corpus = load_corpus(&cfg)?;
    let model = match checkpoint {
        Some(p) => Checkpoint::load(p)?.model,
        None => {
            let dense = TrainConfig {
                schedule: None,
                ..cfg.train.clone()
            };
            train(fresh_model(&cfg, &corpus)?, &corpus, &dense)?.model
        }
    };
    let eval = corpus.eval_samples(cfg.train.eval_sequences, cfg.train.seq_len)?;
    let min_inner = cfg
        .sparsify
        .as_ref()
        .map_or(DEFAULT_MIN_INNER_DIM, |s| s.template.min_inner_dim);
    let rows = ffn_coupled_vs_uncoupled(&model, levels, &eval, min_inner)?;
    let mut csv = String::from("sparsity,kept,coupled_loss,uncoupled_loss\n");
    for r in &rows {
        csv += &format!("{},{},{:.6},{:.6}\n", r.sparsity, r.kept, r.coupled_loss, r.uncoupled_loss);
    }
    emit(path, csv.as_bytes(), out)
}
