//! Adam with decoupled weight decay, global-norm clipping and linear warmup.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Gradients, Model};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to trainable matrices only.
    pub weight_decay: f64,
    /// Global-norm clip threshold; `0` disables clipping.
    pub clip: f64,
    /// Linear warmup length in steps; `0` disables warmup.
    pub warmup_steps: u64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            clip: 1.0,
            warmup_steps: 100,
        }
    }
}

impl AdamHyper {
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.lr
        } else {
            self.lr * step as f64 / self.warmup_steps as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(model: &Model) -> Self {
        let zeros: Vec<Tensor> = model.params.tensors().into_iter().map(Tensor::zeros_like).collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale_in_place(max_norm / norm);
    }
    norm
}

/// One optimizer step. Tensors with `trainable[i] == false` are left
/// untouched, moments included.
pub fn apply_updates(
    model: &mut Model,
    mut grads: Gradients,
    trainable: &[bool],
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite gradient at optimizer step {}",
            state.step + 1
        )));
    }
    let params = model.params.tensors_mut();
    if params.len() != trainable.len() || state.m.len() != params.len() {
        return Err(Error::Consistency("optimizer state does not match model".into()));
    }
    clip_global_norm(&mut grads, hyper.clip);
    state.step += 1;
    let t = state.step as i32;
    let lr = hyper.lr_at(state.step);
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for ((((w, g), m), v), &train) in params
        .into_iter()
        .zip(grads.tensors())
        .zip(&mut state.m)
        .zip(&mut state.v)
        .zip(trainable)
    {
        if !train {
            continue;
        }
        let decay = if w.shape().len() == 2 { hyper.weight_decay } else { 0.0 };
        for (((wi, &gi), mi), vi) in w
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = hyper.beta1 * *mi + (1.0 - hyper.beta1) * gi;
            *vi = hyper.beta2 * *vi + (1.0 - hyper.beta2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *wi -= lr * (mhat / (vhat.sqrt() + hyper.eps) + decay * *wi);
        }
    }
    Ok(())
}
