//! Run log files.
//!
//! A run with stem `{mode}_{n_layer}x{d_model}_{seed}` writes
//!
//! - `{stem}.csv` with header `step,tokens,loss,flop_standard,flop_optimistic,flop_exact`,
//! - `{stem}_alignment.csv` with header `step,tensor,cosine` (DFA runs with
//!   alignment enabled; an empty cosine means a zero-norm gradient),
//! - `{stem}.cfg`, the run config,
//! - `{stem}.json`, a summary with the final loss and any divergence.
//!
//! Floats are written in shortest round-trip form, so reading a log back
//! recovers every value bit for bit.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::compute::ComputeTotals;
use crate::diagnostics::{AlignmentEntry, AlignmentRecord};
use crate::error::{Error, Result};
use crate::feedback::FeedbackMode;
use crate::harness::train::{mode_from_stem, Divergence, RunLogEntry, TrainOutcome};

#[derive(Serialize, Deserialize)]
struct Row {
    step: u64,
    tokens: u64,
    loss: f64,
    flop_standard: f64,
    flop_optimistic: f64,
    flop_exact: f64,
}

#[derive(Serialize, Deserialize)]
struct AlignRow {
    step: u64,
    tensor: String,
    cosine: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: String,
    pub mode: FeedbackMode,
    pub n_layer: usize,
    pub d_model: usize,
    pub lr: f64,
    pub seed: u64,
    pub steps: u64,
    pub final_loss: Option<f64>,
    pub divergence: Option<Divergence>,
    pub feedback_fingerprint: Option<String>,
}

pub fn summary(outcome: &TrainOutcome, run: &str) -> RunSummary {
    let c = &outcome.config;
    RunSummary {
        run: run.to_string(),
        mode: c.mode,
        n_layer: c.model.n_layer,
        d_model: c.model.d_model,
        lr: c.hyper.lr,
        seed: c.seed,
        steps: outcome.entries.last().map_or(0, |e| e.step),
        final_loss: outcome.final_loss(),
        divergence: outcome.divergence.clone(),
        feedback_fingerprint: outcome.feedback.as_ref().map(|b| format!("{:016x}", b.fingerprint())),
    }
}

pub fn write_entries(path: &Path, entries: &[RunLogEntry]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for e in entries {
        w.serialize(Row {
            step: e.step,
            tokens: e.tokens,
            loss: e.loss,
            flop_standard: e.compute.standard,
            flop_optimistic: e.compute.optimistic,
            flop_exact: e.compute.exact,
        })?;
    }
    if entries.is_empty() {
        w.write_record(["step", "tokens", "loss", "flop_standard", "flop_optimistic", "flop_exact"])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_entries(path: &Path) -> Result<Vec<RunLogEntry>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize::<Row>()
        .map(|row| {
            let row = row?;
            Ok(RunLogEntry {
                step: row.step,
                tokens: row.tokens,
                loss: row.loss,
                compute: ComputeTotals {
                    standard: row.flop_standard,
                    optimistic: row.flop_optimistic,
                    exact: row.flop_exact,
                },
            })
        })
        .collect()
}

pub fn write_alignment(path: &Path, records: &[AlignmentRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        for e in &r.entries {
            w.serialize(AlignRow {
                step: r.step,
                tensor: e.tensor.clone(),
                cosine: e.cosine,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_alignment(path: &Path) -> Result<Vec<AlignmentRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out: Vec<AlignmentRecord> = Vec::new();
    for row in r.deserialize::<AlignRow>() {
        let row = row?;
        if out.last().is_none_or(|l| l.step != row.step) {
            out.push(AlignmentRecord {
                step: row.step,
                entries: Vec::new(),
            });
        }
        out.last_mut().expect("pushed").entries.push(AlignmentEntry {
            tensor: row.tensor,
            cosine: row.cosine,
        });
    }
    Ok(out)
}

/// Writes all files of one run into `dir` and returns the path of the loss
/// log.
pub fn write_run(dir: &Path, stem: &str, outcome: &TrainOutcome) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let log = dir.join(format!("{stem}.csv"));
    write_entries(&log, &outcome.entries)?;
    if !outcome.alignment.is_empty() {
        write_alignment(&dir.join(format!("{stem}_alignment.csv")), &outcome.alignment)?;
    }
    fs::write(dir.join(format!("{stem}.cfg")), outcome.config.to_text())?;
    let s = serde_json::to_string_pretty(&summary(outcome, stem))?;
    fs::write(dir.join(format!("{stem}.json")), s + "\n")?;
    Ok(log)
}

/// A loss log found in a log directory.
#[derive(Clone, Debug, PartialEq)]
pub struct RunLog {
    pub run: String,
    pub mode: FeedbackMode,
    pub entries: Vec<RunLogEntry>,
}

/// Loads every `{mode}_*.csv` loss log in `dir`, sorted by file name.
/// Alignment logs and files whose stem names no mode are skipped.
pub fn load_dir(dir: &Path) -> Result<Vec<RunLog>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        let Some(stem) = p.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        if p.extension().is_none_or(|e| e != "csv") || stem.ends_with("_alignment") {
            continue;
        }
        let Some(mode) = mode_from_stem(stem) else {
            continue;
        };
        out.push(RunLog {
            run: stem.to_string(),
            mode,
            entries: read_entries(&p)?,
        });
    }
    if out.is_empty() {
        return Err(Error::Validation(format!("no run logs in {}", dir.display())));
    }
    Ok(out)
}
