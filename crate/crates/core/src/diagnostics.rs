//! Gradient alignment and finite-difference verification.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feedback::{compute_updates, FeedbackMatrix, FeedbackMode};
use crate::model::{backward_bp, ForwardTape, Gradients, Model};
use crate::rng::RngState;
use crate::tensor::{dot, softmax_cross_entropy};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentEntry {
    pub tensor: String,
    /// `None` when either gradient has zero norm.
    pub cosine: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRecord {
    pub step: u64,
    pub entries: Vec<AlignmentEntry>,
}

impl AlignmentRecord {
    pub fn get(&self, tensor: &str) -> Option<Option<f64>> {
        self.entries.iter().find(|e| e.tensor == tensor).map(|e| e.cosine)
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Per-tensor cosine between two gradient sets of the same model.
pub fn cosine_alignment(step: u64, candidate: &Gradients, reference: &Gradients) -> AlignmentRecord {
    let entries = candidate
        .named()
        .into_iter()
        .zip(reference.tensors())
        .map(|((tensor, a), b)| AlignmentEntry {
            tensor,
            cosine: cosine(a.data(), b.data()),
        })
        .collect();
    AlignmentRecord { step, entries }
}

/// Cosine between the gradients of a DFA mode and the exact gradients, on the
/// same sequence.
pub fn alignment(
    step: u64,
    model: &Model,
    tape: &ForwardTape,
    targets: &[usize],
    feedback: &FeedbackMatrix,
    mode: FeedbackMode,
) -> Result<AlignmentRecord> {
    if !mode.is_dfa() {
        return Err(Error::Usage(format!(
            "alignment is defined for DFA modes, not {mode}"
        )));
    }
    let (_, dfa) = compute_updates(mode, model, tape, targets, Some(feedback))?;
    let (_, err) = softmax_cross_entropy(&tape.logits, targets)?;
    let bp = backward_bp(model, tape, &err)?;
    Ok(cosine_alignment(step, &dfa, &bp))
}

/// Relative error with a floor on the denominator; below the floor the
/// comparison is effectively absolute.
pub const REL_ERROR_FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Central difference `(f(x + εeᵢ) − f(x − εeᵢ)) / 2ε` at each probed index,
/// compared against `grad`. Returns the worst relative error.
pub fn check_gradient(
    f: impl Fn(&[f64]) -> f64,
    x: &[f64],
    grad: &[f64],
    epsilon: f64,
    indices: &[usize],
) -> f64 {
    let mut probe = x.to_vec();
    let mut worst: f64 = 0.0;
    for &i in indices {
        let orig = probe[i];
        probe[i] = orig + epsilon;
        let plus = f(&probe);
        probe[i] = orig - epsilon;
        let minus = f(&probe);
        probe[i] = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        worst = worst.max(relative_error(grad[i], numeric));
    }
    worst
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub tensor: String,
    /// Coordinates compared.
    pub probed: usize,
    /// Coordinates skipped because `x ± ε` flips a ReLU.
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiniteDiffReport {
    pub epsilon: f64,
    pub tensors: Vec<TensorCheck>,
}

impl FiniteDiffReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }
}

fn relu_pattern(tape: &ForwardTape) -> Vec<bool> {
    tape.blocks
        .iter()
        .flat_map(|b| b.pre_act.data().iter().map(|&a| a > 0.0))
        .collect()
}

/// Compares exact gradients with central differences on random coordinates
/// of every tensor: `samples_per_tensor` of them (at least 32), or all of a
/// smaller tensor. A coordinate whose `x ± ε` probes change the ReLU sign
/// pattern sits on a kink, where the central difference is not a derivative;
/// it is skipped and the next random coordinate is tried instead.
pub fn finite_diff_check(
    model: &Model,
    tokens: &[usize],
    targets: &[usize],
    epsilon: f64,
    samples_per_tensor: usize,
    seed: u64,
) -> Result<FiniteDiffReport> {
    if !(epsilon > 0.0) {
        return Err(Error::Parameter(format!("epsilon must be positive, got {epsilon}")));
    }
    let (logits, tape) = model.forward(tokens)?;
    let (loss, err) = softmax_cross_entropy(&logits, targets)?;
    if !loss.is_finite() {
        return Err(Error::Numeric("forward produced a non-finite loss".into()));
    }
    let base_pattern = relu_pattern(&tape);
    let grads = backward_bp(model, &tape, &err)?;
    let samples = samples_per_tensor.max(32);
    let root = RngState::new(seed);
    let names: Vec<String> = model.params.named().into_iter().map(|(n, _)| n).collect();
    let mut tensors = Vec::with_capacity(names.len());
    let mut m = model.clone();
    for (k, (name, g)) in names.iter().zip(grads.tensors()).enumerate() {
        let n = g.len();
        let mut rng = root.fork_named(name);
        let order = sample(rng.inner(), n, n).into_vec();
        let eval = |m: &mut Model, i: usize, v: f64| -> Result<f64> {
            let orig = m.params.tensors()[k].data()[i];
            m.params.tensors_mut()[k].data_mut()[i] = v;
            let out = m.forward(tokens);
            m.params.tensors_mut()[k].data_mut()[i] = orig;
            let (logits, tape) = out?;
            let (l, _) = softmax_cross_entropy(&logits, targets)?;
            if !l.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss while probing {name}")));
            }
            Ok(if relu_pattern(&tape) == base_pattern { l } else { f64::NAN })
        };
        let (mut probed, mut skipped, mut worst) = (0, 0, 0.0f64);
        for &i in &order {
            if probed == samples {
                break;
            }
            let x = m.params.tensors()[k].data()[i];
            let plus = eval(&mut m, i, x + epsilon)?;
            let minus = eval(&mut m, i, x - epsilon)?;
            if plus.is_nan() || minus.is_nan() {
                skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * epsilon);
            worst = worst.max(relative_error(g.data()[i], numeric));
            probed += 1;
        }
        tensors.push(TensorCheck {
            tensor: name.clone(),
            probed,
            skipped_kinks: skipped,
            max_rel_error: worst,
        });
    }
    Ok(FiniteDiffReport { epsilon, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tensor::{gaussian, Tensor};

    #[test]
    fn cosine_definitions() {
        let g = [1.0, -2.0, 0.5];
        let neg: Vec<f64> = g.iter().map(|x| -x).collect();
        assert_eq!(cosine(&g, &neg), Some(-1.0));
        assert_eq!(cosine(&g, &g), Some(1.0));
        assert_eq!(cosine(&g, &[0.0; 3]), None);
    }

    #[test]
    fn linear_map_is_checked_to_rounding() {
        let mut rng = RngState::new(5);
        let x = gaussian(&mut rng, &[3, 4], 1.0).unwrap();
        let c = gaussian(&mut rng, &[3, 2], 1.0).unwrap();
        let w = gaussian(&mut rng, &[4, 2], 1.0).unwrap();
        // loss(W) = Σ c ⊙ (X W), gradient Xᵀ c
        let f = |wd: &[f64]| {
            let w = Tensor::new(vec![4, 2], wd.to_vec()).unwrap();
            x.matmul(&w).unwrap().dot(&c).unwrap()
        };
        let grad = x.matmul_tn(&c).unwrap();
        let idx: Vec<usize> = (0..8).collect();
        let err = check_gradient(f, w.data(), grad.data(), 1e-5, &idx);
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn coarse_epsilon_is_worse() {
        let m = Model::init(ModelConfig::new(2, 16, 2, 32, 8), &RngState::new(3)).unwrap();
        let toks = [1, 7, 3, 3, 9];
        let tg = [7, 3, 3, 9, 2];
        let fine = finite_diff_check(&m, &toks, &tg, 1e-5, 32, 0).unwrap();
        let coarse = finite_diff_check(&m, &toks, &tg, 1e-1, 32, 0).unwrap();
        assert!(fine.max_rel_error() < 1e-4, "{}", fine.max_rel_error());
        assert!(coarse.max_rel_error() > fine.max_rel_error());
        assert!(fine
            .tensors
            .iter()
            .all(|t| t.probed + t.skipped_kinks >= 32.min(m.params.named().iter().find(|(n, _)| *n == t.tensor).unwrap().1.len())));
    }

    #[test]
    fn alignment_rejects_non_dfa_modes() {
        let m = Model::init(ModelConfig::new(2, 16, 2, 32, 8), &RngState::new(3)).unwrap();
        let (_, tape) = m.forward(&[1, 2]).unwrap();
        let b = FeedbackMatrix::new(16, &mut RngState::new(1), 0.25).unwrap();
        for mode in [FeedbackMode::Bp, FeedbackMode::Shallow] {
            assert!(matches!(
                alignment(0, &m, &tape, &[2, 3], &b, mode),
                Err(Error::Usage(_))
            ));
        }
    }

    #[test]
    fn bad_epsilon() {
        let m = Model::init(ModelConfig::new(1, 8, 2, 16, 4), &RngState::new(3)).unwrap();
        assert!(finite_diff_check(&m, &[1], &[2], 0.0, 32, 0).is_err());
    }
}
