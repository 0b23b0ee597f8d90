//! Single-epoch training runs.
//!
//! The corpus is cut into non-overlapping windows of `context + 1` tokens
//! (stride `context`), consumed in order, `batch_size` windows per step.
//! Gradients are averaged over the batch. No window is seen twice.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compute::{ComputeModel, ComputeTotals};
use crate::diagnostics::{cosine_alignment, AlignmentRecord};
use crate::error::{Error, Result};
use crate::feedback::{compute_updates, make_feedback_matrix, FeedbackMatrix, FeedbackMode};
use crate::harness::config::RunConfig;
use crate::harness::corpus::Corpus;
use crate::model::backward_bp;
use crate::model::{Gradients, Model};
use crate::optim::{apply_updates, AdamState};
use crate::rng::RngState;
use crate::tensor::softmax_cross_entropy;

/// One log line: mean training loss over the interval ending at `step`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLogEntry {
    pub step: u64,
    pub tokens: u64,
    pub loss: f64,
    pub compute: ComputeTotals,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub step: u64,
    pub reason: String,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub config: RunConfig,
    pub entries: Vec<RunLogEntry>,
    pub alignment: Vec<AlignmentRecord>,
    pub divergence: Option<Divergence>,
    pub model: Model,
    pub feedback: Option<FeedbackMatrix>,
}

impl TrainOutcome {
    pub fn diverged(&self) -> bool {
        self.divergence.is_some()
    }

    /// Loss of the last logged interval, `None` for diverged runs.
    pub fn final_loss(&self) -> Option<f64> {
        if self.diverged() {
            return None;
        }
        self.entries.last().map(|e| e.loss)
    }
}

pub fn compute_model(config: &RunConfig) -> ComputeModel {
    ComputeModel {
        mode: config.mode,
        n_params: config.model.block_param_count() as u64,
        d_model: config.model.d_model as u64,
        n_layer: config.model.n_layer as u64,
    }
}

/// Initial model and feedback matrix of a run. Model tensors and `B` draw
/// from independent named streams of `seed`.
pub fn init_run(config: &RunConfig) -> Result<(Model, Option<FeedbackMatrix>)> {
    let root = RngState::new(config.seed);
    let model = Model::init(config.model.clone(), &root)?;
    let feedback = if config.mode.is_dfa() {
        let mut rng = root.fork_named("feedback.B");
        Some(make_feedback_matrix(config.model.d_model, &mut rng, config.b_init_std)?)
    } else {
        None
    };
    Ok((model, feedback))
}

struct Batches<'a> {
    tokens: &'a [u8],
    context: usize,
    batch: usize,
}

impl Batches<'_> {
    fn get(&self, step: u64) -> Vec<(Vec<usize>, Vec<usize>)> {
        let first = (step as usize - 1) * self.batch;
        (first..first + self.batch)
            .map(|w| {
                let s = w * self.context;
                let win = &self.tokens[s..s + self.context + 1];
                let x = win[..self.context].iter().map(|&b| b as usize).collect();
                let y = win[1..].iter().map(|&b| b as usize).collect();
                (x, y)
            })
            .collect()
    }
}

fn batches<'a>(config: &RunConfig, corpus: &'a Corpus) -> Result<Batches<'a>> {
    config.validate()?;
    if config.model.vocab_size < 256 {
        return Err(Error::Parameter(format!(
            "vocab_size {} cannot hold byte tokens",
            config.model.vocab_size
        )));
    }
    let needed = config.steps() as usize * config.tokens_per_step() + 1;
    if needed > corpus.len() {
        return Err(Error::Validation(format!(
            "{} training tokens need a corpus of {needed} tokens, found {}",
            config.steps() as usize * config.tokens_per_step(),
            corpus.len()
        )));
    }
    Ok(Batches {
        tokens: corpus.tokens(),
        context: config.model.context,
        batch: config.batch_size,
    })
}

fn mean_gradients(mut gs: Vec<Gradients>) -> Result<Gradients> {
    let n = gs.len() as f64;
    let mut acc = gs.remove(0);
    for g in &gs {
        acc.add_assign(g)?;
    }
    acc.scale_in_place(1.0 / n);
    Ok(acc)
}

struct Logger {
    cm: ComputeModel,
    tokens_per_step: u64,
    interval: u64,
    last: u64,
    sum: f64,
    count: u64,
    entries: Vec<RunLogEntry>,
}

impl Logger {
    fn push(&mut self, step: u64, loss: f64, force: bool) {
        self.sum += loss;
        self.count += 1;
        if step.is_multiple_of(self.interval) || force {
            let tokens = step * self.tokens_per_step;
            self.entries.push(RunLogEntry {
                step,
                tokens,
                loss: self.sum / self.count as f64,
                compute: self.cm.totals(tokens),
            });
            self.last = step;
            self.sum = 0.0;
            self.count = 0;
        }
    }
}

fn logger(config: &RunConfig) -> Logger {
    Logger {
        cm: compute_model(config),
        tokens_per_step: config.tokens_per_step() as u64,
        interval: config.log_interval,
        last: 0,
        sum: 0.0,
        count: 0,
        entries: Vec::new(),
    }
}

/// Trains one run to completion or divergence.
pub fn train_run(config: &RunConfig, corpus: &Corpus) -> Result<TrainOutcome> {
    let data = batches(config, corpus)?;
    let (mut model, feedback) = init_run(config)?;
    let mask = config.mode.trainable_mask(&model.params);
    let mut state = AdamState::new(&model);
    let mut log = logger(config);
    let mut alignment = Vec::new();
    let mut divergence = None;
    let steps = config.steps();

    for step in 1..=steps {
        let batch = data.get(step);
        let want_alignment =
            config.mode.is_dfa() && config.alignment_interval > 0 && step % config.alignment_interval == 0;
        let per_seq = batch
            .par_iter()
            .map(|(x, y)| -> Result<(f64, Gradients, Option<Gradients>)> {
                let (_, tape) = model.forward(x)?;
                let (loss, g) = compute_updates(config.mode, &model, &tape, y, feedback.as_ref())?;
                let exact = if want_alignment {
                    let (_, err) = softmax_cross_entropy(&tape.logits, y)?;
                    Some(backward_bp(&model, &tape, &err)?)
                } else {
                    None
                };
                Ok((loss, g, exact))
            })
            .collect::<Result<Vec<_>>>()?;
        let loss = per_seq.iter().map(|p| p.0).sum::<f64>() / per_seq.len() as f64;
        if !loss.is_finite() {
            log.push(step, loss, true);
            divergence = Some(Divergence {
                step,
                reason: format!("non-finite loss {loss}"),
            });
            break;
        }
        let mut grads = Vec::with_capacity(per_seq.len());
        let mut exact = Vec::new();
        for (_, g, e) in per_seq {
            grads.push(g);
            exact.extend(e);
        }
        let grads = mean_gradients(grads)?;
        if want_alignment {
            alignment.push(cosine_alignment(step, &grads, &mean_gradients(exact)?));
        }
        if let Err(e) = apply_updates(&mut model, grads, &mask, &mut state, &config.hyper) {
            log.push(step, loss, true);
            divergence = Some(Divergence {
                step,
                reason: e.to_string(),
            });
            break;
        }
        log.push(step, loss, step == steps);
    }

    Ok(TrainOutcome {
        config: config.clone(),
        entries: log.entries,
        alignment,
        divergence,
        model,
        feedback,
    })
}

/// Log entries of the initial model evaluated on the same batches a run
/// would train on, without any update.
pub fn evaluation_trajectory(config: &RunConfig, corpus: &Corpus) -> Result<Vec<RunLogEntry>> {
    let data = batches(config, corpus)?;
    let (model, _) = init_run(config)?;
    let mut log = logger(config);
    let steps = config.steps();
    for step in 1..=steps {
        let losses = data
            .get(step)
            .par_iter()
            .map(|(x, y)| model.loss(x, y))
            .collect::<Result<Vec<_>>>()?;
        let loss = losses.iter().sum::<f64>() / losses.len() as f64;
        log.push(step, loss, step == steps);
    }
    Ok(log.entries)
}

/// Feedback mode names accepted in logs, longest first so that prefixes of
/// file stems resolve unambiguously.
pub(crate) fn mode_from_stem(stem: &str) -> Option<FeedbackMode> {
    let mut modes = FeedbackMode::ALL;
    modes.sort_by_key(|m| std::cmp::Reverse(m.as_str().len()));
    modes
        .into_iter()
        .find(|m| stem.starts_with(&format!("{}_", m.as_str())))
}
