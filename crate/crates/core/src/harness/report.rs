//! Frontier reports over a directory of run logs.
//!
//! Every logged entry of every run is a `(compute, loss)` point. The first
//! `exclude_fraction` of each run's entries (rounded up) are dropped as
//! warmup noise, points are pooled per method, and each method gets a Pareto
//! front and a power-law fit. Methods other than BP are compared against BP
//! over the compute range covered by all fronts.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::compute::{to_pf_days, Accounting};
use crate::error::{Error, Result};
use crate::feedback::FeedbackMode;
use crate::frontier::{compare_frontiers, fit_power_law, pareto_front, ParetoPoint, PowerLawFit, Scenario};
use crate::harness::logs::RunLog;

pub const DEFAULT_EXCLUDE_FRACTION: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct MethodReport {
    pub method: FeedbackMode,
    pub points: Vec<ParetoPoint>,
    pub front: Vec<ParetoPoint>,
    pub fit: PowerLawFit,
    /// Against BP; `None` for BP itself or when no BP runs are present.
    pub scenario: Option<Scenario>,
    pub crossover: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub accounting: Accounting,
    /// PF-days.
    pub budget_range: (f64, f64),
    pub methods: Vec<MethodReport>,
}

impl Report {
    pub fn method(&self, mode: FeedbackMode) -> Option<&MethodReport> {
        self.methods.iter().find(|m| m.method == mode)
    }
}

/// Points of one run after dropping the leading entries and any non-finite
/// loss.
pub fn run_points(log: &RunLog, accounting: Accounting, exclude_fraction: f64) -> Vec<ParetoPoint> {
    let skip = (log.entries.len() as f64 * exclude_fraction).ceil() as usize;
    log.entries
        .iter()
        .skip(skip)
        .filter(|e| e.loss.is_finite())
        .map(|e| ParetoPoint::new(to_pf_days(e.compute.get(accounting)), e.loss, log.run.clone()))
        .collect()
}

pub fn build_report(logs: &[RunLog], accounting: Accounting, exclude_fraction: f64) -> Result<Report> {
    if !(0.0..1.0).contains(&exclude_fraction) {
        return Err(Error::Parameter(format!("exclude fraction {exclude_fraction} not in [0, 1)")));
    }
    let mut modes: Vec<FeedbackMode> = logs.iter().map(|l| l.mode).collect();
    modes.sort();
    modes.dedup();
    let mut methods = Vec::new();
    for mode in modes {
        let points: Vec<ParetoPoint> = logs
            .iter()
            .filter(|l| l.mode == mode)
            .flat_map(|l| run_points(l, accounting, exclude_fraction))
            .collect();
        let front = pareto_front(&points)?;
        let fit = fit_power_law(&front).map_err(|e| match e {
            Error::DegenerateFit(m) => Error::DegenerateFit(format!("{mode}: {m}")),
            e => e,
        })?;
        methods.push(MethodReport {
            method: mode,
            points,
            front,
            fit,
            scenario: None,
            crossover: None,
        });
    }
    let lo = methods
        .iter()
        .flat_map(|m| m.front.iter().map(|p| p.compute))
        .fold(f64::INFINITY, f64::min);
    let hi = methods
        .iter()
        .flat_map(|m| m.front.iter().map(|p| p.compute))
        .fold(0.0, f64::max);
    let budget_range = (lo, hi);
    if let Some(bp) = methods.iter().find(|m| m.method == FeedbackMode::Bp).map(|m| m.fit.clone()) {
        if lo < hi {
            for m in methods.iter_mut().filter(|m| m.method != FeedbackMode::Bp) {
                let cmp = compare_frontiers(&m.fit, &bp, budget_range)?;
                m.scenario = cmp.scenario;
                m.crossover = cmp.crossover;
            }
        }
    }
    Ok(Report {
        accounting,
        budget_range,
        methods,
    })
}

#[derive(Serialize)]
struct MethodJson {
    method: String,
    #[serde(rename = "alpha_C")]
    alpha_c: f64,
    #[serde(rename = "C_c")]
    c_c: f64,
    residual: f64,
    n_points: usize,
    scenario: Option<Scenario>,
    crossover: Option<f64>,
}

#[derive(Serialize)]
struct ReportJson {
    accounting: String,
    budget_range: [f64; 2],
    methods: Vec<MethodJson>,
}

pub fn report_json(report: &Report) -> serde_json::Value {
    let j = ReportJson {
        accounting: report.accounting.to_string(),
        budget_range: [report.budget_range.0, report.budget_range.1],
        methods: report
            .methods
            .iter()
            .map(|m| MethodJson {
                method: m.method.to_string(),
                alpha_c: m.fit.alpha_c,
                c_c: m.fit.c_c,
                residual: m.fit.residual_rms,
                n_points: m.fit.n_points,
                scenario: m.scenario,
                crossover: m.crossover,
            })
            .collect(),
    };
    serde_json::to_value(j).expect("report serializes")
}

#[derive(Serialize)]
struct PlotRow<'a> {
    compute_pf_days: f64,
    loss: f64,
    fitted_loss: f64,
    run: &'a str,
    on_front: bool,
}

/// One `{method}.csv` per method with every point, the fitted curve at that
/// compute, and whether the point is on the front.
pub fn write_plots(dir: &Path, report: &Report) -> Result<()> {
    fs::create_dir_all(dir)?;
    for m in &report.methods {
        let mut w = csv::Writer::from_path(dir.join(format!("{}.csv", m.method)))?;
        let mut pts: Vec<&ParetoPoint> = m.points.iter().collect();
        pts.sort_by(|a, b| a.compute.total_cmp(&b.compute).then(a.loss.total_cmp(&b.loss)));
        for p in pts {
            w.serialize(PlotRow {
                compute_pf_days: p.compute,
                loss: p.loss,
                fitted_loss: m.fit.loss_at(p.compute),
                run: &p.run,
                on_front: m.front.contains(p),
            })?;
        }
        w.flush()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compute::ComputeTotals;
    use crate::harness::train::RunLogEntry;

    fn log(mode: FeedbackMode, run: &str, pts: &[(f64, f64)]) -> RunLog {
        RunLog {
            run: run.into(),
            mode,
            entries: pts
                .iter()
                .enumerate()
                .map(|(i, &(c, l))| RunLogEntry {
                    step: i as u64 + 1,
                    tokens: i as u64 + 1,
                    loss: l,
                    compute: ComputeTotals {
                        standard: c,
                        optimistic: c / 2.0,
                        exact: c,
                    },
                })
                .collect(),
        }
    }

    #[test]
    fn first_entries_are_excluded() {
        let l = log(FeedbackMode::Bp, "bp_1x8_0", &[(8.64e19, 9.0), (2.0 * 8.64e19, 4.0), (4.0 * 8.64e19, 3.0)]);
        let pts = run_points(&l, Accounting::Standard, 0.01);
        assert_eq!(pts.len(), 2);
        assert_eq!(pts[0].compute, 2.0);
        assert_eq!(run_points(&l, Accounting::Optimistic, 0.0)[0].compute, 0.5);
    }

    #[test]
    fn bp_has_no_scenario() {
        let day = 8.64e19;
        let logs = vec![
            log(FeedbackMode::Bp, "bp", &[(0.5 * day, 9.0), (day, 2.0), (2.0 * day, 1.0)]),
            log(FeedbackMode::Shallow, "sh", &[(0.5 * day, 9.0), (day, 4.0), (2.0 * day, 3.0)]),
        ];
        let r = build_report(&logs, Accounting::Standard, 0.01).unwrap();
        assert_eq!(r.method(FeedbackMode::Bp).unwrap().scenario, None);
        assert_eq!(r.method(FeedbackMode::Shallow).unwrap().scenario, Some(Scenario::D));
        let j = report_json(&r);
        assert_eq!(j["methods"][0]["method"], "bp");
        assert!(j["methods"][0]["scenario"].is_null());
        assert_eq!(j["methods"][1]["scenario"], "D");
        assert!((j["methods"][0]["alpha_C"].as_f64().unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_front_point_is_degenerate() {
        let logs = vec![log(FeedbackMode::Bp, "bp", &[(1.0, 9.0), (2.0, 1.0), (3.0, 1.0)])];
        assert!(matches!(
            build_report(&logs, Accounting::Standard, 0.01),
            Err(Error::DegenerateFit(_))
        ));
    }
}
