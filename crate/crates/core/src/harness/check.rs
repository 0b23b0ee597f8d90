//! Self-check suite behind `dfalab check`: finite-difference gradient checks
//! and structural invariants of the feedback strategies.

use serde::Serialize;

use crate::compute::{training_cost, Accounting};
use crate::diagnostics::finite_diff_check;
use crate::error::Result;
use crate::feedback::{compute_updates, dfa_layer_update, make_feedback_matrix, FeedbackMode};
use crate::model::{
    backward_bp, block_backward, projector_backward, BackwardDerivative, BackwardRule, Model, ModelConfig,
    ResidualBackward,
};
use crate::rng::RngState;
use crate::tensor::{gaussian, softmax_cross_entropy, Tensor};

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub metric: f64,
    pub tolerance: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckReport {
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

fn result(name: impl Into<String>, metric: f64, tolerance: f64) -> CheckResult {
    CheckResult {
        name: name.into(),
        passed: metric <= tolerance,
        metric,
        tolerance,
    }
}

pub fn random_tokens(rng: &mut RngState, n: usize, vocab: usize) -> Vec<usize> {
    (0..n).map(|_| (rng.next_u64() % vocab as u64) as usize).collect()
}

fn sample_model(config: ModelConfig, seed: u64) -> Result<(Model, Vec<usize>, Vec<usize>)> {
    let root = RngState::new(seed);
    let model = Model::init(config, &root)?;
    let mut rng = root.fork_named("check.tokens");
    let n = model.config.context;
    let v = model.config.vocab_size;
    Ok((model, random_tokens(&mut rng, n, v), random_tokens(&mut rng, n, v)))
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(if a.shape() == b.shape() { 0.0 } else { f64::INFINITY }, f64::max)
}

/// Max relative error of exact gradients against central differences.
pub fn gradient_check(n_layer: usize, d_model: usize, seed: u64) -> Result<f64> {
    let (m, x, y) = sample_model(ModelConfig::new(n_layer, d_model, 2, 11, 6), seed)?;
    Ok(finite_diff_check(&m, &x, &y, 1e-5, 32, seed)?.max_rel_error())
}

/// Number of tensors whose gradient differs bitwise from BP when
/// `n_layer = 1`.
pub fn degeneracy_mismatches(d_model: usize, seed: u64) -> Result<usize> {
    let (m, x, y) = sample_model(ModelConfig::new(1, d_model, 2, 13, 7), seed)?;
    let (_, tape) = m.forward(&x)?;
    let mut rng = RngState::new(seed).fork_named("check.B");
    let b = make_feedback_matrix(d_model, &mut rng, 1.0 / (d_model as f64).sqrt())?;
    let (_, bp) = compute_updates(FeedbackMode::Bp, &m, &tape, &y, None)?;
    let mut mismatches = 0;
    for mode in FeedbackMode::ALL {
        let (_, g) = compute_updates(mode, &m, &tape, &y, Some(&b))?;
        mismatches += g
            .tensors()
            .iter()
            .zip(bp.tensors())
            .filter(|(a, b)| a.data() != b.data())
            .count();
    }
    Ok(mismatches)
}

/// Max absolute difference between the chained block backward under the
/// symmetric / ReLU switches and the BP gradients of every block.
pub fn block_equivalence_error(n_layer: usize, d_model: usize, seed: u64) -> Result<f64> {
    let cfg = ModelConfig::new(n_layer, d_model, 2, 13, 7)
        .with_backward(ResidualBackward::Symmetric, BackwardDerivative::Relu);
    let (m, x, y) = sample_model(cfg, seed)?;
    let (logits, tape) = m.forward(&x)?;
    let (_, err) = softmax_cross_entropy(&logits, &y)?;
    let bp = backward_bp(&m, &tape, &err)?;
    let rule = BackwardRule::from_config(&m.config);
    let mut g = projector_backward(&m, &tape, &err)?.preprojector;
    let mut worst: f64 = 0.0;
    for i in (0..n_layer).rev() {
        let (bg, g_in) = block_backward(&m.params.blocks[i], &tape.blocks[i], &g, rule)?;
        for (a, b) in bg.tensors().iter().zip(bp.blocks[i].tensors()) {
            worst = worst.max(max_abs_diff(a, b));
        }
        g = g_in;
    }
    Ok(worst)
}

/// Per-element oracle of the DFA update on a random instance.
pub fn dfa_update_error(n: usize, seed: u64) -> Result<f64> {
    let mut rng = RngState::new(seed);
    let b = gaussian(&mut rng, &[n, n], 1.0)?;
    let e = gaussian(&mut rng, &[n, n], 1.0)?;
    let a = gaussian(&mut rng, &[n, n], 1.0)?;
    let h = gaussian(&mut rng, &[n, n], 1.0)?;
    let mut worst: f64 = 0.0;
    for d in [BackwardDerivative::Relu, BackwardDerivative::Tanh] {
        let got = dfa_layer_update(&b, &e, &a, &h, Some(d))?;
        for i in 0..n {
            for j in 0..n {
                let mut want = 0.0;
                for t in 0..n {
                    let be: f64 = (0..n).map(|k| b.get(j, k) * e.get(t, k)).sum();
                    want += h.get(t, i) * be * d.eval(a.get(t, j));
                }
                worst = worst.max((got.get(i, j) - want).abs());
            }
        }
    }
    Ok(worst)
}

/// Doubling the error must double the DFA update exactly.
pub fn linearity_error(seed: u64) -> Result<f64> {
    let mut rng = RngState::new(seed);
    let b = gaussian(&mut rng, &[6, 6], 1.0)?;
    let e = gaussian(&mut rng, &[5, 6], 1.0)?;
    let a = gaussian(&mut rng, &[5, 6], 1.0)?;
    let h = gaussian(&mut rng, &[5, 3], 1.0)?;
    let one = dfa_layer_update(&b, &e, &a, &h, Some(BackwardDerivative::Tanh))?;
    let two = dfa_layer_update(&b, &e.scale(2.0), &a, &h, Some(BackwardDerivative::Tanh))?;
    Ok(max_abs_diff(&two, &one.scale(2.0)))
}

/// Number of logit rows that change when only the last input token changes.
pub fn causality_violations(seed: u64) -> Result<usize> {
    let (m, mut x, _) = sample_model(ModelConfig::new(2, 16, 2, 13, 9), seed)?;
    let (before, _) = m.forward(&x)?;
    let last = x.len() - 1;
    x[last] = (x[last] + 1) % m.config.vocab_size;
    let (after, _) = m.forward(&x)?;
    Ok((0..last).filter(|&t| before.row(t) != after.row(t)).count())
}

/// `|3 · C_DFA − 2 · C_BP|` under the standard accounting.
pub fn ledger_ratio_error() -> f64 {
    let (n, d) = (57_000_000, 30_000_000_000);
    let bp = training_cost(FeedbackMode::Bp, Accounting::Standard, n, d, 576);
    let dfa = training_cost(FeedbackMode::DfaBlockwise, Accounting::Standard, n, d, 576);
    (3 * dfa).abs_diff(2 * bp) as f64
}

pub fn run_checks(seed: u64) -> Result<CheckReport> {
    let mut checks = Vec::new();
    for n_layer in 1..=3 {
        for d_model in [16, 32] {
            checks.push(result(
                format!("finite_diff_{n_layer}x{d_model}"),
                gradient_check(n_layer, d_model, seed)?,
                1e-4,
            ));
        }
    }
    checks.push(result("strategy_degeneracy", degeneracy_mismatches(16, seed)? as f64, 0.0));
    checks.push(result("block_backward_equivalence", block_equivalence_error(3, 16, seed)?, 1e-12));
    checks.push(result("dfa_update_oracle", dfa_update_error(4, seed)?, 1e-12));
    checks.push(result("dfa_update_linearity", linearity_error(seed)?, 0.0));
    checks.push(result("causality", causality_violations(seed)? as f64, 0.0));
    checks.push(result("compute_ratio", ledger_ratio_error(), 0.0));
    Ok(CheckReport {
        passed: checks.iter().all(|c| c.passed),
        checks,
    })
}
