//! FLOP accounting per training mode.
//!
//! Each of forward, error propagation and weight update costs `2ND` for a
//! decoder with `N` parameters trained on `D` tokens. Backpropagation pays
//! all three. DFA replaces error propagation with one `d_model × d_model`
//! projection per token, which the standard accounting neglects and the
//! `ExactBlockwise` accounting charges as `2·d_model²·D`. The `Optimistic`
//! accounting assumes DFA doubles effective throughput. The shallow baseline
//! is charged the forward only.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feedback::FeedbackMode;

/// FLOP in one PF-day: 10¹⁵ FLOP/s sustained for 86 400 s.
pub const FLOP_PER_PF_DAY: f64 = 1e15 * 86_400.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Accounting {
    Standard,
    Optimistic,
    ExactBlockwise,
}

impl Accounting {
    pub const ALL: [Accounting; 3] = [
        Accounting::Standard,
        Accounting::Optimistic,
        Accounting::ExactBlockwise,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Accounting::Standard => "standard",
            Accounting::Optimistic => "optimistic",
            Accounting::ExactBlockwise => "exact_blockwise",
        }
    }
}

impl fmt::Display for Accounting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Accounting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Accounting::Standard),
            "optimistic" => Ok(Accounting::Optimistic),
            "exact" | "exact_blockwise" => Ok(Accounting::ExactBlockwise),
            _ => Err(Error::Parameter(format!("unknown accounting mode `{s}`"))),
        }
    }
}

/// `12 · n_layer · d_model²`.
pub fn param_count_estimate(n_layer: u64, d_model: u64) -> u64 {
    12 * n_layer * d_model * d_model
}

/// Training cost in FLOP. Integer-exact.
///
/// | mode     | standard | optimistic | exact_blockwise       |
/// |----------|----------|------------|-----------------------|
/// | BP       | 6ND      | 6ND        | 6ND                   |
/// | DFA (both) | 4ND    | 2ND        | 4ND + 2·d_model²·D    |
/// | Shallow  | 2ND      | 2ND        | 2ND                   |
pub fn training_cost(mode: FeedbackMode, accounting: Accounting, n: u64, d: u64, d_model: u64) -> u128 {
    let nd = u128::from(n) * u128::from(d);
    match mode {
        FeedbackMode::Bp => 6 * nd,
        FeedbackMode::Shallow => 2 * nd,
        FeedbackMode::DfaCanonical | FeedbackMode::DfaBlockwise => match accounting {
            Accounting::Standard => 4 * nd,
            Accounting::Optimistic => 2 * nd,
            Accounting::ExactBlockwise => {
                4 * nd + 2 * u128::from(d_model) * u128::from(d_model) * u128::from(d)
            }
        },
    }
}

/// Same as [`training_cost`] with modes given by name, as found in config files.
pub fn training_cost_named(mode: &str, accounting: &str, n: u64, d: u64, d_model: u64) -> Result<u128> {
    let mode: FeedbackMode = mode
        .parse()
        .map_err(|_| Error::Parameter(format!("unknown training mode `{mode}`")))?;
    Ok(training_cost(mode, accounting.parse()?, n, d, d_model))
}

pub fn to_pf_days(flop: f64) -> f64 {
    flop / FLOP_PER_PF_DAY
}

/// Cost model of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComputeModel {
    pub mode: FeedbackMode,
    /// Non-embedding parameter count.
    pub n_params: u64,
    pub d_model: u64,
    pub n_layer: u64,
}

/// Cumulative cost under every accounting, in FLOP.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComputeTotals {
    pub standard: f64,
    pub optimistic: f64,
    pub exact: f64,
}

impl ComputeTotals {
    pub fn get(&self, accounting: Accounting) -> f64 {
        match accounting {
            Accounting::Standard => self.standard,
            Accounting::Optimistic => self.optimistic,
            Accounting::ExactBlockwise => self.exact,
        }
    }
}

impl ComputeModel {
    pub fn cost(&self, accounting: Accounting, tokens: u64) -> u128 {
        training_cost(self.mode, accounting, self.n_params, tokens, self.d_model)
    }

    pub fn totals(&self, tokens: u64) -> ComputeTotals {
        ComputeTotals {
            standard: self.cost(Accounting::Standard, tokens) as f64,
            optimistic: self.cost(Accounting::Optimistic, tokens) as f64,
            exact: self.cost(Accounting::ExactBlockwise, tokens) as f64,
        }
    }
}
