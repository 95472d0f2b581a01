//! `train`: fits the flow predictor on a generated corpus.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use flowtie::nn::train::CHECKPOINT_LAST;
use flowtie::nn::{init_training, load_checkpoint, save_checkpoint, train_epoch, EpochRecord, Sample, TrainConfig, TrainState};

use crate::corpus::{Corpus, Split};
use crate::error::{CliError, Result};

pub const LOSSES_FILE: &str = "losses.tsv";
pub const SUMMARY_FILE: &str = "train.json";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub corpus: PathBuf,
    pub out: PathBuf,
    pub config: TrainConfig,
    /// Continue from `out/last` when it exists.
    pub resume: bool,
    /// Stop once this many epochs are done (the run stays resumable).
    pub stop_after: Option<usize>,
    /// Checkpoint every this many epochs; the final epoch always saves.
    pub save_every: usize,
    pub quiet: bool,
    /// Recorded in the summary; training is single-threaded and seeded
    /// either way.
    pub deterministic: bool,
}

impl TrainOptions {
    pub fn new(corpus: impl Into<PathBuf>, out: impl Into<PathBuf>) -> Self {
        TrainOptions {
            corpus: corpus.into(),
            out: out.into(),
            config: TrainConfig::default(),
            resume: false,
            stop_after: None,
            save_every: 10,
            quiet: true,
            deterministic: false,
        }
    }
}

/// Written to `train.json` next to the checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainSummary {
    pub corpus: PathBuf,
    pub train_samples: usize,
    pub val_samples: usize,
    pub epochs_done: usize,
    pub epochs_target: usize,
    pub best_epoch: usize,
    pub best_score: f64,
    pub first_train_total: Option<f64>,
    pub last_train_total: Option<f64>,
    pub num_params: usize,
    pub deterministic: bool,
    pub resumed_from: Option<usize>,
    pub config: TrainConfig,
}

fn load_samples(corpus: &Corpus, root: &Path, split: Split) -> Result<Vec<Sample>> {
    corpus
        .load_split(root, split)?
        .iter()
        .zip(corpus.split(split))
        .map(|(ds, entry)| {
            let mut s = Sample::from_dataset(ds)?;
            s.name = entry.name.clone();
            Ok(s)
        })
        .collect()
}

/// Tab-separated loss history: one row per epoch and split.
pub fn losses_table(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch\tsplit\tl_vf\tl_cont\tl_phase\tl_total\n");
    for r in history {
        let rows = std::iter::once(("train", r.train)).chain(r.val.map(|v| ("val", v)));
        for (split, b) in rows {
            let _ = writeln!(out, "{}\t{split}\t{}\t{}\t{}\t{}", r.epoch, b.vf, b.cont, b.phase, b.total);
        }
    }
    out
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn persist(opts: &TrainOptions, state: &TrainState) -> Result<()> {
    save_checkpoint(&opts.out, state)?;
    write_text(&opts.out.join(LOSSES_FILE), &losses_table(&state.history))
}

fn start(opts: &TrainOptions, train: &[Sample], val: &[Sample]) -> Result<(TrainState, Option<usize>)> {
    let last = opts.out.join(CHECKPOINT_LAST);
    if opts.resume && last.exists() {
        let mut state = load_checkpoint(&opts.out)?;
        let saved = state.config;
        let wanted = opts.config;
        if (saved.seed, saved.d, saved.kernel, saved.normalization) != (wanted.seed, wanted.d, wanted.kernel, wanted.normalization)
            || saved.weights != wanted.weights
            || saved.optim != wanted.optim
        {
            return Err(CliError::Usage(format!(
                "checkpoint in {} was trained with different settings; resume with the same seed, width, kernel, weights and optimizer",
                opts.out.display()
            )));
        }
        state.config.epochs = wanted.epochs;
        let done = state.epochs_done();
        return Ok((state, Some(done)));
    }
    Ok((init_training(train, val, &opts.config)?, None))
}

pub fn train(opts: &TrainOptions) -> Result<TrainSummary> {
    if opts.save_every == 0 {
        return Err(CliError::Usage("save-every must be at least 1".into()));
    }
    let corpus = Corpus::load(&opts.corpus)?;
    let train = load_samples(&corpus, &opts.corpus, Split::Train)?;
    let val = load_samples(&corpus, &opts.corpus, Split::Val)?;
    if train.is_empty() {
        return Err(CliError::Corpus {
            path: opts.corpus.clone(),
            reason: "no training structures".into(),
        });
    }
    fs::create_dir_all(&opts.out).map_err(|e| CliError::io(&opts.out, e))?;

    let (mut state, resumed_from) = start(opts, &train, &val)?;
    let target = opts
        .stop_after
        .map_or(state.config.epochs, |s| s.min(state.config.epochs));
    let mut dirty = false;
    while state.epochs_done() < target {
        let record = train_epoch(&mut state, &train, &val)?;
        dirty = true;
        if !opts.quiet {
            let val = record.val.map_or(String::from("-"), |v| format!("{:.6e}", v.total));
            eprintln!(
                "epoch {:>4}/{}  train {:.6e}  val {val}",
                record.epoch, state.config.epochs, record.train.total
            );
        }
        if record.epoch % opts.save_every == 0 {
            persist(opts, &state)?;
            dirty = false;
        }
    }
    if dirty || resumed_from.is_none() {
        persist(opts, &state)?;
    }

    let summary = TrainSummary {
        corpus: opts.corpus.clone(),
        train_samples: train.len(),
        val_samples: val.len(),
        epochs_done: state.epochs_done(),
        epochs_target: state.config.epochs,
        best_epoch: state.best_epoch,
        best_score: state.best_score(),
        first_train_total: state.history.first().map(|r| r.train.total),
        last_train_total: state.history.last().map(|r| r.train.total),
        num_params: state.model.num_params(),
        deterministic: opts.deterministic,
        resumed_from,
        config: state.config,
    };
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    write_text(&opts.out.join(SUMMARY_FILE), &text)?;
    Ok(summary)
}
