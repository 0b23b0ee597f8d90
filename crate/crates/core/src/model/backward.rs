use crate::error::{Error, Result};
use crate::tensor::{dot, Tensor};

use super::{
    BackwardDerivative, BlockParams, BlockTape, ForwardTape, Gradients, LayerNormCache, Model,
    ModelConfig, Params, ResidualBackward,
};

/// How feedback is routed through a decoder block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackwardRule {
    pub residual: ResidualBackward,
    pub derivative: BackwardDerivative,
}

impl BackwardRule {
    /// Plain chain rule: skip connections carry gradient and ReLU uses its step.
    pub const EXACT: BackwardRule = BackwardRule {
        residual: ResidualBackward::Symmetric,
        derivative: BackwardDerivative::Relu,
    };

    pub fn from_config(config: &ModelConfig) -> Self {
        BackwardRule {
            residual: config.residual_backward,
            derivative: config.backward_derivative,
        }
    }
}

impl BackwardDerivative {
    #[inline]
    pub fn eval(self, a: f64) -> f64 {
        match self {
            BackwardDerivative::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            BackwardDerivative::Tanh => {
                let t = a.tanh();
                1.0 - t * t
            }
        }
    }
}

/// Gradients of the final layer norm and projector, plus the loss gradient at
/// the residual stream entering the final norm.
#[derive(Clone, Debug)]
pub struct ProjectorGrads {
    pub preprojector: Tensor,
    pub lnf_gain: Tensor,
    pub lnf_bias: Tensor,
    pub proj: Tensor,
}

pub fn projector_backward(model: &Model, tape: &ForwardTape, g_logits: &Tensor) -> Result<ProjectorGrads> {
    model.check_tape(tape)?;
    if g_logits.shape() != tape.logits.shape() {
        return Err(Error::Dimension {
            op: "projector_backward",
            left: g_logits.shape().to_vec(),
            right: tape.logits.shape().to_vec(),
        });
    }
    let p = &model.params;
    let proj = tape.lnf_out.matmul_tn(g_logits)?;
    let g_lnf = g_logits.matmul_nt(&p.proj)?;
    let (preprojector, lnf_gain, lnf_bias) = layer_norm_backward(&g_lnf, &p.lnf_gain, &tape.lnf);
    Ok(ProjectorGrads {
        preprojector,
        lnf_gain,
        lnf_bias,
        proj,
    })
}

/// Pushes `feedback` (shaped like the block output) down through one block.
///
/// Returns the parameter gradients and the feedback reaching the block input.
/// With asymmetric residuals the signal goes output → MLP → attention → input
/// and neither skip branch contributes. With the `Tanh` derivative every ReLU
/// site multiplies by `1 - tanh²(a)` instead of `step(a)`.
pub fn block_backward(
    block: &BlockParams,
    tape: &BlockTape,
    feedback: &Tensor,
    rule: BackwardRule,
) -> Result<(BlockParams, Tensor)> {
    if feedback.shape() != tape.output.shape() {
        return Err(Error::Dimension {
            op: "block_backward",
            left: feedback.shape().to_vec(),
            right: tape.output.shape().to_vec(),
        });
    }
    let w2 = tape.hidden.matmul_tn(feedback)?;
    let g_hidden = feedback.matmul_nt(&block.w2)?;
    let deriv = rule.derivative;
    let g_pre = g_hidden.zip_with(&tape.pre_act, "block_backward", |g, a| g * deriv.eval(a))?;
    let w1 = tape.ln2_out.matmul_tn(&g_pre)?;
    let g_ln2 = g_pre.matmul_nt(&block.w1)?;
    let (g_mid_mlp, ln2_gain, ln2_bias) = layer_norm_backward(&g_ln2, &block.ln2_gain, &tape.ln2);
    let g_mid = match rule.residual {
        ResidualBackward::Symmetric => g_mid_mlp.add(feedback)?,
        ResidualBackward::Asymmetric => g_mid_mlp,
    };

    let wo = tape.att.matmul_tn(&g_mid)?;
    let g_att = g_mid.matmul_nt(&block.wo)?;
    let (gq, gk, gv) = attention_backward(&g_att, tape);
    let wq = tape.ln1_out.matmul_tn(&gq)?;
    let wk = tape.ln1_out.matmul_tn(&gk)?;
    let wv = tape.ln1_out.matmul_tn(&gv)?;
    let mut g_ln1 = gq.matmul_nt(&block.wq)?;
    g_ln1.add_assign(&gk.matmul_nt(&block.wk)?)?;
    g_ln1.add_assign(&gv.matmul_nt(&block.wv)?)?;
    let (g_in_attn, ln1_gain, ln1_bias) = layer_norm_backward(&g_ln1, &block.ln1_gain, &tape.ln1);
    let g_in = match rule.residual {
        ResidualBackward::Symmetric => g_in_attn.add(&g_mid)?,
        ResidualBackward::Asymmetric => g_in_attn,
    };
    Ok((
        BlockParams {
            ln1_gain,
            ln1_bias,
            wq,
            wk,
            wv,
            wo,
            ln2_gain,
            ln2_bias,
            w1,
            w2,
        },
        g_in,
    ))
}

/// Scatters the gradient at the embedding sum into token and position tables.
pub fn embedding_backward(config: &ModelConfig, tokens: &[usize], g_x: &Tensor) -> (Tensor, Tensor) {
    let d = config.d_model;
    let mut tok = Tensor::zeros(&[config.vocab_size, d]);
    let mut pos = Tensor::zeros(&[config.context, d]);
    for (i, &t) in tokens.iter().enumerate() {
        let g = g_x.row(i);
        for (o, &v) in tok.row_mut(t).iter_mut().zip(g) {
            *o += v;
        }
        pos.row_mut(i).copy_from_slice(g);
    }
    (tok, pos)
}

/// Exact gradients of the loss whose logit gradient is `error_signal`.
pub fn backward_bp(model: &Model, tape: &ForwardTape, error_signal: &Tensor) -> Result<Gradients> {
    let head = projector_backward(model, tape, error_signal)?;
    let mut g = head.preprojector;
    let mut blocks = Vec::with_capacity(model.config.n_layer);
    for (block, bt) in model.params.blocks.iter().zip(&tape.blocks).rev() {
        let (bg, g_in) = block_backward(block, bt, &g, BackwardRule::EXACT)?;
        blocks.push(bg);
        g = g_in;
    }
    blocks.reverse();
    let (tok_emb, pos_emb) = embedding_backward(&model.config, &tape.tokens, &g);
    Ok(Params {
        tok_emb,
        pos_emb,
        blocks,
        lnf_gain: head.lnf_gain,
        lnf_bias: head.lnf_bias,
        proj: head.proj,
    })
}

pub(crate) fn layer_norm_backward(
    gy: &Tensor,
    gain: &Tensor,
    cache: &LayerNormCache,
) -> (Tensor, Tensor, Tensor) {
    let (r, c) = (gy.rows(), gy.cols());
    let mut dgain = vec![0.0; c];
    let mut dbias = vec![0.0; c];
    let mut dx = Tensor::zeros(&[r, c]);
    let mut dxhat = vec![0.0; c];
    for i in 0..r {
        let g = gy.row(i);
        let xh = cache.xhat.row(i);
        for j in 0..c {
            dgain[j] += g[j] * xh[j];
            dbias[j] += g[j];
            dxhat[j] = g[j] * gain.data()[j];
        }
        let mean = dxhat.iter().sum::<f64>() / c as f64;
        let mean_x = dot(&dxhat, xh) / c as f64;
        let s = cache.rstd[i];
        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
            *o = s * (dxhat[j] - mean - xh[j] * mean_x);
        }
    }
    (
        dx,
        Tensor::vector(dgain).expect("non-empty"),
        Tensor::vector(dbias).expect("non-empty"),
    )
}

fn attention_backward(g_att: &Tensor, tape: &BlockTape) -> (Tensor, Tensor, Tensor) {
    let (t, d) = (g_att.rows(), g_att.cols());
    let n_head = tape.probs.len();
    let dh = d / n_head;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut gq = Tensor::zeros(&[t, d]);
    let mut gk = Tensor::zeros(&[t, d]);
    let mut gv = Tensor::zeros(&[t, d]);
    let mut dp = vec![0.0; t];
    for (h, p) in tape.probs.iter().enumerate() {
        let off = h * dh;
        for i in 0..t {
            let go = &g_att.row(i)[off..off + dh];
            let prow = &p.row(i)[..=i];
            for j in 0..=i {
                dp[j] = dot(go, &tape.v.row(j)[off..off + dh]);
                let pij = prow[j];
                for (o, &g) in gv.row_mut(j)[off..off + dh].iter_mut().zip(go) {
                    *o += pij * g;
                }
            }
            let inner = dot(prow, &dp[..=i]);
            for j in 0..=i {
                let ds = prow[j] * (dp[j] - inner) * scale;
                if ds == 0.0 {
                    continue;
                }
                let kj = &tape.k.row(j)[off..off + dh];
                for (o, &kv) in gq.row_mut(i)[off..off + dh].iter_mut().zip(kj) {
                    *o += ds * kv;
                }
                let qi = tape.q.row(i)[off..off + dh].to_vec();
                for (o, &qv) in gk.row_mut(j)[off..off + dh].iter_mut().zip(&qi) {
                    *o += ds * qv;
                }
            }
        }
    }
    (gq, gk, gv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;
    use crate::tensor::softmax_cross_entropy;

    fn model(n_layer: usize, d: usize) -> Model {
        Model::init(ModelConfig::new(n_layer, d, 2, 32, 8), &RngState::new(17)).unwrap()
    }

    #[test]
    fn zero_error_gives_zero_gradients() {
        let m = model(2, 16);
        let (logits, tape) = m.forward(&[1, 2, 3]).unwrap();
        let g = backward_bp(&m, &tape, &Tensor::zeros_like(&logits)).unwrap();
        assert!(g.tensors().iter().all(|t| t.data().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn absent_token_rows_have_zero_gradient() {
        let m = model(2, 16);
        let toks = [1, 2, 3, 2];
        let (logits, tape) = m.forward(&toks).unwrap();
        let (_, err) = softmax_cross_entropy(&logits, &[2, 3, 2, 1]).unwrap();
        let g = backward_bp(&m, &tape, &err).unwrap();
        for row in 0..32 {
            let zero = g.tok_emb.row(row).iter().all(|&x| x == 0.0);
            assert_eq!(zero, !toks.contains(&row), "row {row}");
        }
    }

    #[test]
    fn tape_mismatch_is_a_consistency_error() {
        let a = model(2, 16);
        let b = model(1, 16);
        let (logits, tape) = a.forward(&[1, 2]).unwrap();
        assert!(matches!(
            backward_bp(&b, &tape, &logits),
            Err(Error::Consistency(_))
        ));
    }

    #[test]
    fn tanh_multiplier_is_one_at_zero() {
        assert_eq!(BackwardDerivative::Tanh.eval(0.0), 1.0);
        assert_eq!(BackwardDerivative::Relu.eval(0.0), 0.0);
        assert_eq!(BackwardDerivative::Relu.eval(0.3), 1.0);
    }

    #[test]
    fn block_backward_rejects_wrong_feedback_shape() {
        let m = model(1, 16);
        let (_, tape) = m.forward(&[1, 2]).unwrap();
        let r = block_backward(
            &m.params.blocks[0],
            &tape.blocks[0],
            &Tensor::zeros(&[3, 16]),
            BackwardRule::EXACT,
        );
        assert!(matches!(r, Err(Error::Dimension { .. })));
    }
}
