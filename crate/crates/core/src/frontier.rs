//! Compute-optimal frontiers and power-law fits.
//!
//! The frontier is modelled as `L(C) = (C / C_c)^α_C` with `C` in PF-days and
//! `α_C < 0`: a more negative `α_C` scales better and a smaller `C_c` is a
//! better offset. The fit is ordinary least squares in log-log space.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    /// Compute in PF-days.
    pub compute: f64,
    pub loss: f64,
    pub run: String,
}

impl ParetoPoint {
    pub fn new(compute: f64, loss: f64, run: impl Into<String>) -> Self {
        ParetoPoint {
            compute,
            loss,
            run: run.into(),
        }
    }
}

/// Points not dominated by any other, sorted by compute. A point is dominated
/// when another has no more compute and strictly less loss, or strictly less
/// compute and no more loss. Exact duplicates keep one copy.
pub fn pareto_front(points: &[ParetoPoint]) -> Result<Vec<ParetoPoint>> {
    if let Some(p) = points
        .iter()
        .find(|p| !(p.compute > 0.0 && p.loss > 0.0 && p.compute.is_finite() && p.loss.is_finite()))
    {
        return Err(Error::Validation(format!(
            "frontier points need positive finite compute and loss, got ({}, {})",
            p.compute, p.loss
        )));
    }
    let mut sorted: Vec<&ParetoPoint> = points.iter().collect();
    sorted.sort_by(|a, b| {
        a.compute
            .partial_cmp(&b.compute)
            .unwrap_or(Ordering::Equal)
            .then(a.loss.partial_cmp(&b.loss).unwrap_or(Ordering::Equal))
    });
    let mut best = f64::INFINITY;
    let mut front = Vec::new();
    for p in sorted {
        if p.loss < best {
            best = p.loss;
            front.push(p.clone());
        }
    }
    Ok(front)
}

/// Best loss reached with at most `budget` compute, reading the front as a
/// step function. `None` below the cheapest point.
pub fn front_loss_at(front: &[ParetoPoint], budget: f64) -> Option<f64> {
    front
        .iter()
        .take_while(|p| p.compute <= budget)
        .last()
        .map(|p| p.loss)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub alpha_c: f64,
    /// PF-days.
    pub c_c: f64,
    /// RMS of the log-loss residuals.
    pub residual_rms: f64,
    pub n_points: usize,
}

impl PowerLawFit {
    pub fn new(alpha_c: f64, c_c: f64) -> Self {
        PowerLawFit {
            alpha_c,
            c_c,
            residual_rms: 0.0,
            n_points: 0,
        }
    }

    pub fn log_loss_at(&self, compute: f64) -> f64 {
        self.alpha_c * (compute.ln() - self.c_c.ln())
    }

    pub fn loss_at(&self, compute: f64) -> f64 {
        self.log_loss_at(compute).exp()
    }
}

pub fn fit_power_law(points: &[ParetoPoint]) -> Result<PowerLawFit> {
    if points.len() < 2 {
        return Err(Error::DegenerateFit(format!(
            "need at least 2 points, got {}",
            points.len()
        )));
    }
    if points.iter().any(|p| !(p.compute > 0.0 && p.loss > 0.0)) {
        return Err(Error::Validation("power-law fit needs positive compute and loss".into()));
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.compute.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.loss.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    if sxx == 0.0 {
        return Err(Error::DegenerateFit("all points share one compute value".into()));
    }
    let alpha = sxy / sxx;
    if alpha.abs() < 1e-12 {
        return Err(Error::DegenerateFit("flat front, C_c undefined".into()));
    }
    // log L = α (log C − log C_c), so log C_c = mean(log C) − mean(log L) / α.
    let log_cc = mx - my / alpha;
    let rss: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let r = y - (my + alpha * (x - mx));
            r * r
        })
        .sum();
    Ok(PowerLawFit {
        alpha_c: alpha,
        c_c: log_cc.exp(),
        residual_rms: (rss / n).sqrt(),
        n_points: points.len(),
    })
}

/// Frontier relationship between a candidate method (first argument) and a
/// baseline (second).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    /// Candidate better at every budget in range.
    A,
    /// Baseline better at small budgets, candidate better at scale.
    B,
    /// Candidate better at small budgets, baseline better at scale.
    C,
    /// Baseline better at every budget in range.
    D,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Winner {
    First,
    Second,
}

impl Winner {
    fn flip(self) -> Winner {
        match self {
            Winner::First => Winner::Second,
            Winner::Second => Winner::First,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub budget_range: (f64, f64),
    /// `None` for identical fits.
    pub winner_low: Option<Winner>,
    pub winner_high: Option<Winner>,
    /// Budget where both laws predict the same loss, when inside the range.
    pub crossover: Option<f64>,
    pub scenario: Option<Scenario>,
    pub tie: bool,
}

/// Budget where two laws meet:
/// `ln C* = (α_a ln C_c^a − α_b ln C_c^b) / (α_a − α_b)`.
pub fn crossover_budget(a: &PowerLawFit, b: &PowerLawFit) -> Option<f64> {
    if a.alpha_c == b.alpha_c {
        return None;
    }
    let log_c = (a.alpha_c * a.c_c.ln() - b.alpha_c * b.c_c.ln()) / (a.alpha_c - b.alpha_c);
    Some(log_c.exp())
}

pub fn compare_frontiers(a: &PowerLawFit, b: &PowerLawFit, budget_range: (f64, f64)) -> Result<ScenarioReport> {
    let (lo, hi) = budget_range;
    if !(lo > 0.0 && hi > lo && hi.is_finite()) {
        return Err(Error::Parameter(format!(
            "budget range must be a positive interval, got [{lo}, {hi}]"
        )));
    }
    for f in [a, b] {
        if !(f.c_c > 0.0) || !f.alpha_c.is_finite() {
            return Err(Error::Parameter("invalid power-law fit".into()));
        }
    }
    let gap = |c: f64| a.log_loss_at(c) - b.log_loss_at(c);
    let winner = |g: f64| match g.partial_cmp(&0.0) {
        Some(Ordering::Less) => Some(Winner::First),
        Some(Ordering::Greater) => Some(Winner::Second),
        _ => None,
    };
    if a.alpha_c == b.alpha_c && a.c_c == b.c_c {
        return Ok(ScenarioReport {
            budget_range,
            winner_low: None,
            winner_high: None,
            crossover: None,
            scenario: None,
            tie: true,
        });
    }
    let (mut w_lo, mut w_hi) = (winner(gap(lo)), winner(gap(hi)));
    // A crossing exactly on an endpoint: the endpoint belongs to the other side.
    if w_lo.is_none() {
        w_lo = w_hi;
    }
    if w_hi.is_none() {
        w_hi = w_lo;
    }
    let crossover = crossover_budget(a, b).filter(|&c| c > lo && c < hi);
    let scenario = match (w_lo, w_hi) {
        (Some(Winner::First), Some(Winner::First)) => Some(Scenario::A),
        (Some(Winner::Second), Some(Winner::First)) => Some(Scenario::B),
        (Some(Winner::First), Some(Winner::Second)) => Some(Scenario::C),
        (Some(Winner::Second), Some(Winner::Second)) => Some(Scenario::D),
        _ => None,
    };
    Ok(ScenarioReport {
        budget_range,
        winner_low: w_lo,
        winner_high: w_hi,
        crossover,
        scenario,
        tie: scenario.is_none(),
    })
}

impl ScenarioReport {
    /// The same comparison seen with the arguments swapped.
    pub fn swapped(&self) -> ScenarioReport {
        ScenarioReport {
            budget_range: self.budget_range,
            winner_low: self.winner_low.map(Winner::flip),
            winner_high: self.winner_high.map(Winner::flip),
            crossover: self.crossover,
            scenario: self.scenario.map(|s| match s {
                Scenario::A => Scenario::D,
                Scenario::B => Scenario::C,
                Scenario::C => Scenario::B,
                Scenario::D => Scenario::A,
            }),
            tie: self.tie,
        }
    }
}
