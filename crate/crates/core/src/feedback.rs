//! Credit-assignment strategies.
//!
//! All four strategies consume the same forward tape and produce gradients in
//! the model's parameter layout, so the training loop can swap them freely.
//! In every strategy the last decoder block, the final layer norm and the
//! projector receive exact gradients. What differs is how the blocks below are
//! reached:
//!
//! | mode            | non-final blocks                                   | embeddings                |
//! |-----------------|----------------------------------------------------|---------------------------|
//! | `Bp`            | chain rule                                         | chain rule                |
//! | `DfaCanonical`  | `B·e` applied directly at every weight             | raw `B·e`                 |
//! | `DfaBlockwise`  | `B·e` at each block output, backpropagated inside  | block 0's input feedback  |
//! | `Shallow`       | frozen                                             | frozen                    |
//!
//! Embeddings follow whatever strategy governs block 0, so with a single
//! block they are trained exactly in every mode.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{
    backward_bp, block_backward, embedding_backward, projector_backward, BackwardDerivative,
    BackwardRule, BlockParams, BlockTape, ForwardTape, Gradients, Model, ParamSite, Params,
};
use crate::rng::RngState;
use crate::tensor::{gaussian, softmax_cross_entropy, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackMode {
    Bp,
    DfaCanonical,
    DfaBlockwise,
    Shallow,
}

impl FeedbackMode {
    pub const ALL: [FeedbackMode; 4] = [
        FeedbackMode::Bp,
        FeedbackMode::DfaCanonical,
        FeedbackMode::DfaBlockwise,
        FeedbackMode::Shallow,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FeedbackMode::Bp => "bp",
            FeedbackMode::DfaCanonical => "dfa_canonical",
            FeedbackMode::DfaBlockwise => "dfa_blockwise",
            FeedbackMode::Shallow => "shallow",
        }
    }

    pub fn is_dfa(self) -> bool {
        matches!(self, FeedbackMode::DfaCanonical | FeedbackMode::DfaBlockwise)
    }

    /// Which tensors the optimizer may touch, in [`Params::named`] order.
    pub fn trainable_mask(self, params: &Params) -> Vec<bool> {
        let last = params.blocks.len() - 1;
        params
            .named()
            .iter()
            .zip(params.sites())
            .map(|((name, _), site)| match (self, site) {
                (FeedbackMode::Bp | FeedbackMode::DfaBlockwise, _) => true,
                (_, ParamSite::Head) => true,
                (_, ParamSite::Block(i)) if i == last => true,
                (FeedbackMode::Shallow, ParamSite::Embedding) => last == 0,
                (FeedbackMode::Shallow, ParamSite::Block(_)) => false,
                (FeedbackMode::DfaCanonical, ParamSite::Embedding) => true,
                (FeedbackMode::DfaCanonical, ParamSite::Block(_)) => !name.contains(".ln"),
            })
            .collect()
    }
}

impl fmt::Display for FeedbackMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FeedbackMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        FeedbackMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Parse(format!("unknown feedback mode `{s}`")))
    }
}

/// The fixed random matrix shared by every block. There is no mutable access
/// to the matrix once built.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedbackMatrix {
    b: Tensor,
    init_std: f64,
}

impl FeedbackMatrix {
    pub fn new(d_model: usize, rng: &mut RngState, init_std: f64) -> Result<Self> {
        if d_model == 0 {
            return Err(Error::Parameter("d_model must be positive".into()));
        }
        let b = gaussian(rng, &[d_model, d_model], init_std)?;
        Ok(FeedbackMatrix { b, init_std })
    }

    /// Builds a feedback path from an explicit matrix (tests, oracles).
    pub fn from_matrix(b: Tensor) -> Result<Self> {
        match b.shape() {
            [r, c] if r == c => Ok(FeedbackMatrix { b, init_std: f64::NAN }),
            s => Err(Error::Parameter(format!("feedback matrix must be square, got {s:?}"))),
        }
    }

    pub fn matrix(&self) -> &Tensor {
        &self.b
    }

    pub fn init_std(&self) -> f64 {
        self.init_std
    }

    pub fn dim(&self) -> usize {
        self.b.rows()
    }

    /// `B·e_t` for every token row of `e`.
    pub fn project(&self, e: &Tensor) -> Result<Tensor> {
        e.matmul_nt(&self.b)
    }

    /// FNV-1a over the bit patterns, for immutability checks.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for x in self.b.data() {
            for byte in x.to_bits().to_le_bytes() {
                h ^= u64::from(byte);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

/// Default feedback scale, `1/√d_model`.
pub fn default_init_std(d_model: usize) -> f64 {
    1.0 / (d_model as f64).sqrt()
}

pub fn make_feedback_matrix(d_model: usize, rng: &mut RngState, init_std: f64) -> Result<FeedbackMatrix> {
    FeedbackMatrix::new(d_model, rng, init_std)
}

/// Loss gradient at the residual stream entering the final layer norm,
/// `tokens × d_model`.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorSignal {
    pub e: Tensor,
}

/// Backpropagates the cross-entropy error through the projector and final
/// layer norm only.
pub fn preprojector_error(model: &Model, tape: &ForwardTape, targets: &[usize]) -> Result<ErrorSignal> {
    model.check_tape(tape)?;
    let (_, err) = softmax_cross_entropy(&tape.logits, targets)?;
    let head = projector_backward(model, tape, &err)?;
    Ok(ErrorSignal { e: head.preprojector })
}

/// Weight gradient `h_prevᵀ · [(B·e) ⊙ f'(a)]`, summed over token rows.
///
/// Weights are stored input-major (`x · W`), so the result is the transpose
/// of `[(B·e) ⊙ f'(a)] · h_prevᵀ`. The optimizer applies the minus sign.
/// `derivative = None` means a site without an elementwise non-linearity
/// (`f' ≡ 1`); `pre_act` is then only used for its shape.
pub fn dfa_layer_update(
    b: &Tensor,
    e: &Tensor,
    pre_act: &Tensor,
    prev_act: &Tensor,
    derivative: Option<BackwardDerivative>,
) -> Result<Tensor> {
    let be = e.matmul_nt(b)?;
    if be.shape() != pre_act.shape() {
        return Err(Error::Dimension {
            op: "dfa_layer_update",
            left: be.shape().to_vec(),
            right: pre_act.shape().to_vec(),
        });
    }
    let delta = match derivative {
        Some(d) => be.zip_with(pre_act, "dfa_layer_update", |g, a| g * d.eval(a))?,
        None => be,
    };
    prev_act.matmul_tn(&delta)
}

/// Repeats the columns of `be` cyclically until it is `width` wide, so a
/// `d_model`-wide feedback can drive a `d_ff`-wide site.
fn tile_columns(be: &Tensor, width: usize) -> Tensor {
    let (t, d) = (be.rows(), be.cols());
    let mut out = Tensor::zeros(&[t, width]);
    for i in 0..t {
        let src = be.row(i);
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = src[j % d];
        }
    }
    out
}

fn canonical_block(
    block: &BlockParams,
    tape: &BlockTape,
    be: &Tensor,
    derivative: BackwardDerivative,
) -> Result<BlockParams> {
    let d = be.cols();
    let d_ff = block.w1.cols();
    let at_w1 = tile_columns(be, d_ff).zip_with(&tape.pre_act, "canonical", |g, a| {
        g * derivative.eval(a)
    })?;
    let qkv = tape.ln1_out.matmul_tn(be)?;
    Ok(BlockParams {
        ln1_gain: Tensor::zeros(&[d]),
        ln1_bias: Tensor::zeros(&[d]),
        wq: qkv.clone(),
        wk: qkv.clone(),
        wv: qkv,
        wo: tape.att.matmul_tn(be)?,
        ln2_gain: Tensor::zeros(&[d]),
        ln2_bias: Tensor::zeros(&[d]),
        w1: tape.ln2_out.matmul_tn(&at_w1)?,
        w2: tape.hidden.matmul_tn(be)?,
    })
}

/// Gradients for the DFA-trained blocks (every block but the last) and the
/// signal handed to the embeddings, driven by error `e`.
///
/// With `parallel` the blocks are processed concurrently; the result does not
/// depend on the execution order.
pub fn dfa_block_gradients(
    mode: FeedbackMode,
    model: &Model,
    tape: &ForwardTape,
    e: &ErrorSignal,
    feedback: &FeedbackMatrix,
    parallel: bool,
) -> Result<(Vec<BlockParams>, Option<Tensor>)> {
    if !mode.is_dfa() {
        return Err(Error::Usage(format!("{mode} does not use a feedback matrix")));
    }
    if feedback.dim() != model.config.d_model {
        return Err(Error::Dimension {
            op: "dfa_block_gradients",
            left: feedback.matrix().shape().to_vec(),
            right: vec![model.config.d_model, model.config.d_model],
        });
    }
    let n_dfa = model.config.n_layer - 1;
    if n_dfa == 0 {
        return Ok((Vec::new(), None));
    }
    let be = feedback.project(&e.e)?;
    let rule = BackwardRule::from_config(&model.config);
    let one = |i: usize| -> Result<(BlockParams, Option<Tensor>)> {
        let (block, bt) = (&model.params.blocks[i], &tape.blocks[i]);
        match mode {
            FeedbackMode::DfaCanonical => Ok((canonical_block(block, bt, &be, rule.derivative)?, None)),
            _ => {
                let (g, input) = block_backward(block, bt, &be, rule)?;
                Ok((g, (i == 0).then_some(input)))
            }
        }
    };
    let results: Vec<_> = if parallel {
        (0..n_dfa).into_par_iter().map(one).collect::<Result<_>>()?
    } else {
        (0..n_dfa).map(one).collect::<Result<_>>()?
    };
    let mut blocks = Vec::with_capacity(n_dfa);
    let mut emb = None;
    for (g, input) in results {
        blocks.push(g);
        if input.is_some() {
            emb = input;
        }
    }
    if mode == FeedbackMode::DfaCanonical {
        emb = Some(be);
    }
    Ok((blocks, emb))
}

/// Loss and gradients for one sequence under `mode`.
pub fn compute_updates(
    mode: FeedbackMode,
    model: &Model,
    tape: &ForwardTape,
    targets: &[usize],
    feedback: Option<&FeedbackMatrix>,
) -> Result<(f64, Gradients)> {
    compute_updates_with(mode, model, tape, targets, feedback, false)
}

pub fn compute_updates_with(
    mode: FeedbackMode,
    model: &Model,
    tape: &ForwardTape,
    targets: &[usize],
    feedback: Option<&FeedbackMatrix>,
    parallel: bool,
) -> Result<(f64, Gradients)> {
    model.check_tape(tape)?;
    let (loss, err) = softmax_cross_entropy(&tape.logits, targets)?;
    if mode == FeedbackMode::Bp {
        return Ok((loss, backward_bp(model, tape, &err)?));
    }
    if mode.is_dfa() && feedback.is_none() {
        return Err(Error::Parameter(format!("{mode} requires a feedback matrix")));
    }
    let config = &model.config;
    let last = config.n_layer - 1;
    let head = projector_backward(model, tape, &err)?;
    let (last_grads, last_input) = block_backward(
        &model.params.blocks[last],
        &tape.blocks[last],
        &head.preprojector,
        BackwardRule::EXACT,
    )?;

    let (mut blocks, emb_signal) = match (mode, feedback) {
        (FeedbackMode::Shallow, _) => {
            let frozen = (0..last).map(|_| BlockParams::zeros(config)).collect();
            (frozen, None)
        }
        (_, Some(b)) => {
            let e = ErrorSignal {
                e: head.preprojector.clone(),
            };
            dfa_block_gradients(mode, model, tape, &e, b, parallel)?
        }
        (_, None) => unreachable!("checked above"),
    };
    blocks.push(last_grads);

    let emb_signal = if last == 0 { Some(last_input) } else { emb_signal };
    let (tok_emb, pos_emb) = match emb_signal {
        Some(g) => embedding_backward(config, &tape.tokens, &g),
        None => (
            Tensor::zeros(&[config.vocab_size, config.d_model]),
            Tensor::zeros(&[config.context, config.d_model]),
        ),
    };
    Ok((
        loss,
        Params {
            tok_emb,
            pos_emb,
            blocks,
            lnf_gain: head.lnf_gain,
            lnf_bias: head.lnf_bias,
            proj: head.proj,
        },
    ))
}
