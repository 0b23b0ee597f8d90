//! Flat `key = value` run configs and sweep grids.
//!
//! Lines are `key = value`; blank lines and everything after `#` are ignored.
//! In a grid file any value may be a comma-separated list and the grid is the
//! cartesian product of all lists, expanded in file order.
//!
//! | key                   | default                                   |
//! |-----------------------|-------------------------------------------|
//! | `mode`                | `bp` (`bp`, `dfa_canonical`, `dfa_blockwise`, `shallow`) |
//! | `n_layer`             | 2                                         |
//! | `d_model`             | 64                                        |
//! | `n_head`              | 4                                         |
//! | `d_ff`                | `4 · d_model`                             |
//! | `vocab_size`          | 256                                       |
//! | `context`             | 128                                       |
//! | `backward_derivative` | `tanh` for `dfa_blockwise`, else `relu`   |
//! | `residual_backward`   | `asymmetric` for `dfa_blockwise`, else `symmetric` |
//! | `lr`                  | 1e-3                                      |
//! | `beta1`, `beta2`, `eps` | 0.9, 0.999, 1e-8                        |
//! | `weight_decay`        | 0                                         |
//! | `clip`                | 1.0 (0 disables)                          |
//! | `warmup_steps`        | 100                                       |
//! | `b_init_std`          | `1/√d_model`                              |
//! | `seed`                | 0                                         |
//! | `dataset`             | none (the CLI passes `--corpus`)          |
//! | `total_tokens`        | 1 000 000                                 |
//! | `batch_size`          | 8                                         |
//! | `log_interval`        | 10                                        |
//! | `alignment_interval`  | 0 (off)                                   |

use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feedback::{default_init_std, FeedbackMode};
use crate::model::{BackwardDerivative, ModelConfig, ResidualBackward};
use crate::optim::AdamHyper;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub mode: FeedbackMode,
    pub hyper: AdamHyper,
    pub b_init_std: f64,
    pub seed: u64,
    pub dataset: Option<PathBuf>,
    pub total_tokens: u64,
    pub batch_size: usize,
    pub log_interval: u64,
    pub alignment_interval: u64,
}

impl RunConfig {
    pub fn new(mode: FeedbackMode, n_layer: usize, d_model: usize) -> Self {
        let mut model = ModelConfig::new(n_layer, d_model, 4.min(d_model), 256, 128);
        if mode == FeedbackMode::DfaBlockwise {
            model = model.with_backward(ResidualBackward::Asymmetric, BackwardDerivative::Tanh);
        }
        RunConfig {
            model,
            mode,
            hyper: AdamHyper::default(),
            b_init_std: default_init_std(d_model),
            seed: 0,
            dataset: None,
            total_tokens: 1_000_000,
            batch_size: 8,
            log_interval: 10,
            alignment_interval: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 || self.log_interval == 0 {
            return Err(Error::Parameter("batch_size and log_interval must be positive".into()));
        }
        if !(self.b_init_std > 0.0) {
            return Err(Error::Parameter("b_init_std must be positive".into()));
        }
        if !(self.hyper.lr >= 0.0) {
            return Err(Error::Parameter("lr must be non-negative".into()));
        }
        if self.tokens_per_step() > self.total_tokens as usize {
            return Err(Error::Parameter(format!(
                "total_tokens {} is smaller than one batch of {} tokens",
                self.total_tokens,
                self.tokens_per_step()
            )));
        }
        Ok(())
    }

    pub fn tokens_per_step(&self) -> usize {
        self.batch_size * self.model.context
    }

    pub fn steps(&self) -> u64 {
        self.total_tokens / self.tokens_per_step() as u64
    }

    /// `{mode}_{n_layer}x{d_model}_{seed}`, the log file stem.
    pub fn run_id(&self) -> String {
        format!(
            "{}_{}x{}_{}",
            self.mode, self.model.n_layer, self.model.d_model, self.seed
        )
    }

    pub fn to_text(&self) -> String {
        let m = &self.model;
        let h = &self.hyper;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("mode", self.mode.to_string());
        kv("n_layer", m.n_layer.to_string());
        kv("d_model", m.d_model.to_string());
        kv("n_head", m.n_head.to_string());
        kv("d_ff", m.d_ff.to_string());
        kv("vocab_size", m.vocab_size.to_string());
        kv("context", m.context.to_string());
        kv("backward_derivative", m.backward_derivative.to_string());
        kv("residual_backward", m.residual_backward.to_string());
        kv("lr", format!("{:e}", h.lr));
        kv("beta1", h.beta1.to_string());
        kv("beta2", h.beta2.to_string());
        kv("eps", format!("{:e}", h.eps));
        kv("weight_decay", h.weight_decay.to_string());
        kv("clip", h.clip.to_string());
        kv("warmup_steps", h.warmup_steps.to_string());
        kv("b_init_std", self.b_init_std.to_string());
        kv("seed", self.seed.to_string());
        if let Some(d) = &self.dataset {
            kv("dataset", d.display().to_string());
        }
        kv("total_tokens", self.total_tokens.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("log_interval", self.log_interval.to_string());
        kv("alignment_interval", self.alignment_interval.to_string());
        s
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let pairs = parse_pairs(text)?;
        for (k, v) in &pairs {
            if v.contains(',') {
                return Err(Error::Parse(format!(
                    "`{k}` has a list value; lists belong in sweep grids"
                )));
            }
        }
        build(&pairs)
    }
}

fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("line {}: expected `key = value`", n + 1)))?;
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if out.iter().any(|(e, _)| *e == k) {
            return Err(Error::Parse(format!("line {}: duplicate key `{k}`", n + 1)));
        }
        out.push((k, v));
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Parse(format!("bad value for `{k}`: `{v}`")))
}

fn build(pairs: &[(String, String)]) -> Result<RunConfig> {
    let get = |key: &str| pairs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
    let mode: FeedbackMode = get("mode").unwrap_or("bp").parse()?;
    let n_layer = get("n_layer").map(|v| num("n_layer", v)).transpose()?.unwrap_or(2);
    let d_model = get("d_model").map(|v| num("d_model", v)).transpose()?.unwrap_or(64);
    let mut c = RunConfig::new(mode, n_layer, d_model);
    for (k, v) in pairs {
        let v = v.as_str();
        match k.as_str() {
            "mode" | "n_layer" | "d_model" => {}
            "n_head" => c.model.n_head = num(k, v)?,
            "d_ff" => c.model.d_ff = num(k, v)?,
            "vocab_size" => c.model.vocab_size = num(k, v)?,
            "context" => c.model.context = num(k, v)?,
            "forward_activation" if v == "relu" => {}
            "backward_derivative" => c.model.backward_derivative = v.parse()?,
            "residual_backward" => c.model.residual_backward = v.parse()?,
            "lr" => c.hyper.lr = num(k, v)?,
            "beta1" => c.hyper.beta1 = num(k, v)?,
            "beta2" => c.hyper.beta2 = num(k, v)?,
            "eps" => c.hyper.eps = num(k, v)?,
            "weight_decay" => c.hyper.weight_decay = num(k, v)?,
            "clip" => c.hyper.clip = num(k, v)?,
            "warmup_steps" => c.hyper.warmup_steps = num(k, v)?,
            "b_init_std" => c.b_init_std = num(k, v)?,
            "seed" => c.seed = num(k, v)?,
            "dataset" => c.dataset = Some(PathBuf::from(v)),
            "total_tokens" => c.total_tokens = num(k, v)?,
            "batch_size" => c.batch_size = num(k, v)?,
            "log_interval" => c.log_interval = num(k, v)?,
            "alignment_interval" => c.alignment_interval = num(k, v)?,
            _ => return Err(Error::Parse(format!("unknown key `{k}` = `{v}`"))),
        }
    }
    if get("d_ff").is_none() {
        c.model.d_ff = 4 * c.model.d_model;
    }
    if get("n_head").is_none() && !c.model.d_model.is_multiple_of(c.model.n_head) {
        c.model.n_head = 1;
    }
    c.validate()?;
    Ok(c)
}

/// Expands a grid file into run configs, in lexicographic order of the list
/// positions with the first key varying slowest.
pub fn parse_grid(text: &str) -> Result<Vec<RunConfig>> {
    let pairs = parse_pairs(text)?;
    let lists: Vec<(String, Vec<String>)> = pairs
        .into_iter()
        .map(|(k, v)| {
            let vals: Vec<String> = v.split(',').map(|s| s.trim().to_string()).collect();
            (k, vals)
        })
        .collect();
    if lists.iter().any(|(_, v)| v.iter().any(String::is_empty)) {
        return Err(Error::Parse("empty entry in grid list".into()));
    }
    let total: usize = lists.iter().map(|(_, v)| v.len()).product();
    let mut out = Vec::with_capacity(total);
    for idx in 0..total {
        let mut rem = idx;
        let mut chosen = vec![(String::new(), String::new()); lists.len()];
        for (slot, (k, vals)) in chosen.iter_mut().zip(&lists).rev() {
            *slot = (k.clone(), vals[rem % vals.len()].clone());
            rem /= vals.len();
        }
        out.push(build(&chosen)?);
    }
    if out.is_empty() {
        return Err(Error::Parse("empty grid".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_depend_on_mode() {
        let c = RunConfig::parse("mode = dfa_blockwise\nd_model = 32\n").unwrap();
        assert_eq!(c.model.residual_backward, ResidualBackward::Asymmetric);
        assert_eq!(c.model.backward_derivative, BackwardDerivative::Tanh);
        assert_eq!(c.model.d_ff, 128);
        assert_eq!(c.b_init_std, 1.0 / 32f64.sqrt());
        let c = RunConfig::parse("mode = bp").unwrap();
        assert_eq!(c.model.residual_backward, ResidualBackward::Symmetric);
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::new(FeedbackMode::Shallow, 3, 48);
        c.hyper.lr = 3e-4;
        c.seed = 11;
        c.dataset = Some("data/corpus.bin".into());
        c.alignment_interval = 50;
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(RunConfig::parse("mode = fa").is_err());
        assert!(RunConfig::parse("lr = fast").is_err());
        assert!(RunConfig::parse("colour = blue").is_err());
        assert!(RunConfig::parse("lr = 1e-3\nlr = 2e-3").is_err());
        assert!(RunConfig::parse("lr = 1e-3, 2e-3").is_err());
        assert!(RunConfig::parse("d_model = 30\nn_head = 4").is_err());
    }

    #[test]
    fn grid_is_a_cartesian_product() {
        let g = parse_grid("mode = bp, shallow\nlr = 1e-3, 3e-3, 1e-2 # three rates\nd_model = 32").unwrap();
        assert_eq!(g.len(), 6);
        assert_eq!(g[0].mode, FeedbackMode::Bp);
        assert_eq!(g[0].hyper.lr, 1e-3);
        assert_eq!(g[1].hyper.lr, 3e-3);
        assert_eq!(g[3].mode, FeedbackMode::Shallow);
        assert!(g.iter().all(|c| c.model.d_model == 32));
    }

    #[test]
    fn run_id_format() {
        let c = RunConfig::new(FeedbackMode::DfaBlockwise, 4, 128);
        assert_eq!(c.run_id(), "dfa_blockwise_4x128_0");
    }
}
