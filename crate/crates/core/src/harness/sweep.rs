//! Grid sweeps with per-size learning-rate selection.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::feedback::FeedbackMode;
use crate::harness::config::RunConfig;
use crate::harness::corpus::Corpus;
use crate::harness::train::{train_run, TrainOutcome};

/// `(mode, n_layer, d_model)`.
pub type SizeKey = (FeedbackMode, usize, usize);

pub struct SweepResult {
    /// Outcomes in grid order.
    pub runs: Vec<TrainOutcome>,
    /// Index into `runs` of the selected run for each mode and size.
    pub best: BTreeMap<SizeKey, usize>,
}

impl SweepResult {
    pub fn best_runs(&self) -> impl Iterator<Item = (&SizeKey, &TrainOutcome)> {
        self.best.iter().map(|(k, &i)| (k, &self.runs[i]))
    }
}

/// File stem of a sweep member. Includes the learning rate so that every
/// grid point gets its own files.
pub fn sweep_stem(config: &RunConfig) -> String {
    format!("{}_lr{:e}", config.run_id(), config.hyper.lr)
}

/// Picks the run with the lowest final loss per mode and size. Diverged runs
/// are excluded; ties go to the lower learning rate, then the earlier grid
/// position.
pub fn select_best(runs: &[TrainOutcome]) -> Result<BTreeMap<SizeKey, usize>> {
    let mut best: BTreeMap<SizeKey, usize> = BTreeMap::new();
    for (i, r) in runs.iter().enumerate() {
        let Some(loss) = r.final_loss() else { continue };
        let c = &r.config;
        let key = (c.mode, c.model.n_layer, c.model.d_model);
        let better = match best.get(&key) {
            None => true,
            Some(&j) => {
                let other = runs[j].final_loss().expect("selected runs converged");
                loss < other || (loss == other && c.hyper.lr < runs[j].config.hyper.lr)
            }
        };
        if better {
            best.insert(key, i);
        }
    }
    if best.is_empty() {
        let failures = runs
            .iter()
            .map(|r| {
                let d = r.divergence.as_ref();
                format!(
                    "{}: step {} {}",
                    sweep_stem(&r.config),
                    d.map_or(0, |d| d.step),
                    d.map_or("diverged", |d| d.reason.as_str())
                )
            })
            .collect();
        return Err(Error::Sweep(failures));
    }
    Ok(best)
}

/// Trains every config, in parallel when `parallel` is set. Results do not
/// depend on scheduling.
pub fn sweep(configs: &[RunConfig], corpus: &Corpus, parallel: bool) -> Result<SweepResult> {
    if configs.is_empty() {
        return Err(Error::Parameter("empty sweep grid".into()));
    }
    let runs: Vec<TrainOutcome> = if parallel {
        configs.par_iter().map(|c| train_run(c, corpus)).collect::<Result<_>>()?
    } else {
        configs.iter().map(|c| train_run(c, corpus)).collect::<Result<_>>()?
    };
    let best = select_best(&runs)?;
    Ok(SweepResult { runs, best })
}
