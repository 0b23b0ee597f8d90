//! Causal decoder-only Transformer with a recorded forward pass.
//!
//! Layout: token + learned positional embedding, `n_layer` pre-norm decoder
//! blocks (norm → attention → add → norm → MLP → add), a final layer norm and
//! an untied vocabulary projector. Linear maps carry no bias. The forward pass
//! always uses ReLU and always adds both residuals; the backward switches in
//! [`BackwardRule`] only change how feedback is routed afterwards.

mod backward;
pub mod checkpoint;

pub use backward::{
    backward_bp, block_backward, embedding_backward, projector_backward, BackwardRule,
    ProjectorGrads,
};

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{dot, gaussian, softmax_in_place, Tensor};

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;

/// Derivative used at ReLU sites when feedback moves through a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackwardDerivative {
    /// The true step function of ReLU.
    Relu,
    /// `1 - tanh²(a)` evaluated at the pre-activation.
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualBackward {
    Symmetric,
    /// Skip connections exist in the forward only.
    Asymmetric,
}

impl FromStr for BackwardDerivative {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" | "relu'" => Ok(Self::Relu),
            "tanh" | "tanh'" => Ok(Self::Tanh),
            _ => Err(Error::Parse(format!("unknown backward derivative `{s}`"))),
        }
    }
}

impl fmt::Display for BackwardDerivative {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Relu => "relu",
            Self::Tanh => "tanh",
        })
    }
}

impl FromStr for ResidualBackward {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "symmetric" => Ok(Self::Symmetric),
            "asymmetric" => Ok(Self::Asymmetric),
            _ => Err(Error::Parse(format!("unknown residual routing `{s}`"))),
        }
    }
}

impl fmt::Display for ResidualBackward {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Symmetric => "symmetric",
            Self::Asymmetric => "asymmetric",
        })
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub n_layer: usize,
    pub d_model: usize,
    pub n_head: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub context: usize,
    pub backward_derivative: BackwardDerivative,
    pub residual_backward: ResidualBackward,
}

impl ModelConfig {
    /// Config with `d_ff = 4·d_model` and exact (BP-style) backward switches.
    pub fn new(n_layer: usize, d_model: usize, n_head: usize, vocab_size: usize, context: usize) -> Self {
        ModelConfig {
            n_layer,
            d_model,
            n_head,
            d_ff: 4 * d_model,
            vocab_size,
            context,
            backward_derivative: BackwardDerivative::Relu,
            residual_backward: ResidualBackward::Symmetric,
        }
    }

    pub fn with_backward(mut self, residual: ResidualBackward, derivative: BackwardDerivative) -> Self {
        self.residual_backward = residual;
        self.backward_derivative = derivative;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layer", self.n_layer),
            ("d_model", self.d_model),
            ("n_head", self.n_head),
            ("d_ff", self.d_ff),
            ("context", self.context),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Parameter(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_head) {
            return Err(Error::Parameter(format!(
                "d_model {} is not divisible by n_head {}",
                self.d_model, self.n_head
            )));
        }
        if self.vocab_size < 2 {
            return Err(Error::Parameter("vocab_size must be at least 2".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_head
    }

    /// Parameters inside the decoder blocks (embeddings, final norm and
    /// projector excluded).
    pub fn block_param_count(&self) -> usize {
        let d = self.d_model;
        self.n_layer * (4 * d * d + 2 * d * self.d_ff + 4 * d)
    }

    /// Exact count of every trainable scalar.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        self.block_param_count()
            + self.vocab_size * d
            + self.context * d
            + 2 * d
            + d * self.vocab_size
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    /// `d_model × d_ff`
    pub w1: Tensor,
    /// `d_ff × d_model`
    pub w2: Tensor,
}

impl BlockParams {
    const NAMES: [&'static str; 10] = [
        "ln1.gain", "ln1.bias", "attn.wq", "attn.wk", "attn.wv", "attn.wo", "ln2.gain",
        "ln2.bias", "mlp.w1", "mlp.w2",
    ];

    pub fn tensors(&self) -> [&Tensor; 10] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w1,
            &self.w2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 10] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w1,
            &mut self.w2,
        ]
    }

    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_model;
        let f = config.d_ff;
        BlockParams {
            ln1_gain: Tensor::zeros(&[d]),
            ln1_bias: Tensor::zeros(&[d]),
            wq: Tensor::zeros(&[d, d]),
            wk: Tensor::zeros(&[d, d]),
            wv: Tensor::zeros(&[d, d]),
            wo: Tensor::zeros(&[d, d]),
            ln2_gain: Tensor::zeros(&[d]),
            ln2_bias: Tensor::zeros(&[d]),
            w1: Tensor::zeros(&[d, f]),
            w2: Tensor::zeros(&[f, d]),
        }
    }

    pub fn add_assign(&mut self, other: &BlockParams) -> Result<()> {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b)?;
        }
        Ok(())
    }
}

/// All parameter tensors of a model. Gradients use the same layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub blocks: Vec<BlockParams>,
    pub lnf_gain: Tensor,
    pub lnf_bias: Tensor,
    /// `d_model × vocab_size`
    pub proj: Tensor,
}

pub type Gradients = Params;

/// Where a parameter tensor sits in the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamSite {
    Embedding,
    Block(usize),
    Head,
}

impl Params {
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_model;
        Params {
            tok_emb: Tensor::zeros(&[config.vocab_size, d]),
            pos_emb: Tensor::zeros(&[config.context, d]),
            blocks: (0..config.n_layer).map(|_| BlockParams::zeros(config)).collect(),
            lnf_gain: Tensor::zeros(&[d]),
            lnf_bias: Tensor::zeros(&[d]),
            proj: Tensor::zeros(&[d, config.vocab_size]),
        }
    }

    /// Tensors in canonical order with their names.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (n, t) in BlockParams::NAMES.iter().zip(b.tensors()) {
                out.push((format!("blocks.{i}.{n}"), t));
            }
        }
        out.push(("lnf.gain".into(), &self.lnf_gain));
        out.push(("lnf.bias".into(), &self.lnf_bias));
        out.push(("proj".into(), &self.proj));
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.push(&mut self.lnf_gain);
        out.push(&mut self.lnf_bias);
        out.push(&mut self.proj);
        out
    }

    /// Site of each tensor, in the same order as [`Params::named`].
    pub fn sites(&self) -> Vec<ParamSite> {
        let mut out = vec![ParamSite::Embedding; 2];
        for i in 0..self.blocks.len() {
            out.extend(std::iter::repeat_n(ParamSite::Block(i), BlockParams::NAMES.len()));
        }
        out.extend([ParamSite::Head; 3]);
        out
    }

    pub fn add_assign(&mut self, other: &Params) -> Result<()> {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b)?;
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for t in self.tensors_mut() {
            for x in t.data_mut() {
                *x *= s;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .map(|t| dot(t.data(), t.data()))
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
}

/// Normalized rows and their reciprocal standard deviations.
#[derive(Clone, Debug)]
pub struct LayerNormCache {
    pub xhat: Tensor,
    pub rstd: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct BlockTape {
    pub input: Tensor,
    pub ln1: LayerNormCache,
    pub ln1_out: Tensor,
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    /// Attention probabilities per head, `tokens × tokens`, zero above the diagonal.
    pub probs: Vec<Tensor>,
    /// Concatenated head outputs before the output projection.
    pub att: Tensor,
    /// Residual stream after the attention branch.
    pub mid: Tensor,
    pub ln2: LayerNormCache,
    pub ln2_out: Tensor,
    /// MLP pre-activations.
    pub pre_act: Tensor,
    /// MLP hidden activations, `relu(pre_act)`.
    pub hidden: Tensor,
    pub output: Tensor,
}

#[derive(Clone, Debug)]
pub struct ForwardTape {
    pub tokens: Vec<usize>,
    pub blocks: Vec<BlockTape>,
    /// Residual stream entering the final layer norm.
    pub preprojector: Tensor,
    pub lnf: LayerNormCache,
    pub lnf_out: Tensor,
    pub logits: Tensor,
}

impl ForwardTape {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

impl Model {
    /// Weights `N(0, 0.02²)`, layer-norm gains one and biases zero. Each
    /// tensor draws from its own stream named after the tensor.
    pub fn init(config: ModelConfig, rng: &RngState) -> Result<Model> {
        config.validate()?;
        let mut params = Params::zeros(&config);
        let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
        for (name, t) in names.iter().zip(params.tensors_mut()) {
            if name.ends_with(".gain") {
                *t = Tensor::full(t.shape(), 1.0);
            } else if name.ends_with(".bias") {
                continue;
            } else {
                let shape = t.shape().to_vec();
                *t = gaussian(&mut rng.fork_named(name), &shape, INIT_STD)?;
            }
        }
        Ok(Model { config, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    pub fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Length {
                len: 0,
                context: self.config.context,
            });
        }
        if tokens.len() > self.config.context {
            return Err(Error::Length {
                len: tokens.len(),
                context: self.config.context,
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Index(format!(
                "token {t} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    pub fn forward(&self, tokens: &[usize]) -> Result<(Tensor, ForwardTape)> {
        self.check_tokens(tokens)?;
        let p = &self.params;
        let d = self.config.d_model;
        let t = tokens.len();
        let mut x = Tensor::zeros(&[t, d]);
        for (i, &tok) in tokens.iter().enumerate() {
            let row = x.row_mut(i);
            for ((o, &e), &pe) in row.iter_mut().zip(p.tok_emb.row(tok)).zip(p.pos_emb.row(i)) {
                *o = e + pe;
            }
        }
        let mut blocks = Vec::with_capacity(self.config.n_layer);
        for block in &p.blocks {
            let tape = self.block_forward(block, x)?;
            x = tape.output.clone();
            blocks.push(tape);
        }
        let (lnf_out, lnf) = layer_norm(&x, &p.lnf_gain, &p.lnf_bias);
        let logits = lnf_out.matmul(&p.proj)?;
        let tape = ForwardTape {
            tokens: tokens.to_vec(),
            blocks,
            preprojector: x,
            lnf,
            lnf_out,
            logits: logits.clone(),
        };
        Ok((logits, tape))
    }

    fn block_forward(&self, b: &BlockParams, input: Tensor) -> Result<BlockTape> {
        let (ln1_out, ln1) = layer_norm(&input, &b.ln1_gain, &b.ln1_bias);
        let q = ln1_out.matmul(&b.wq)?;
        let k = ln1_out.matmul(&b.wk)?;
        let v = ln1_out.matmul(&b.wv)?;
        let (att, probs) = causal_attention(&q, &k, &v, self.config.n_head);
        let o = att.matmul(&b.wo)?;
        let mid = input.add(&o)?;
        let (ln2_out, ln2) = layer_norm(&mid, &b.ln2_gain, &b.ln2_bias);
        let pre_act = ln2_out.matmul(&b.w1)?;
        let hidden = pre_act.map(|a| a.max(0.0));
        let m = hidden.matmul(&b.w2)?;
        let output = mid.add(&m)?;
        Ok(BlockTape {
            input,
            ln1,
            ln1_out,
            q,
            k,
            v,
            probs,
            att,
            mid,
            ln2,
            ln2_out,
            pre_act,
            hidden,
            output,
        })
    }

    /// Mean cross-entropy of next-token prediction, without recording anything
    /// beyond what `forward` needs.
    pub fn loss(&self, tokens: &[usize], targets: &[usize]) -> Result<f64> {
        let (logits, _) = self.forward(tokens)?;
        Ok(crate::tensor::softmax_cross_entropy(&logits, targets)?.0)
    }

    pub(crate) fn check_tape(&self, tape: &ForwardTape) -> Result<()> {
        let c = &self.config;
        if tape.blocks.len() != c.n_layer
            || tape.logits.shape() != [tape.len(), c.vocab_size]
            || tape.preprojector.shape() != [tape.len(), c.d_model]
        {
            return Err(Error::Consistency(format!(
                "tape with {} blocks and logits {:?} does not belong to a model with {} layers, d_model {}, vocab {}",
                tape.blocks.len(),
                tape.logits.shape(),
                c.n_layer,
                c.d_model,
                c.vocab_size
            )));
        }
        Ok(())
    }
}

pub(crate) fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> (Tensor, LayerNormCache) {
    let (r, c) = (x.rows(), x.cols());
    let mut xhat = Tensor::zeros(&[r, c]);
    let mut out = Tensor::zeros(&[r, c]);
    let mut rstd = Vec::with_capacity(r);
    for i in 0..r {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let s = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(s);
        let xh = xhat.row_mut(i);
        for (o, &v) in xh.iter_mut().zip(row) {
            *o = (v - mean) * s;
        }
        let xh = xhat.row(i).to_vec();
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = xh[j] * gain.data()[j] + bias.data()[j];
        }
    }
    (out, LayerNormCache { xhat, rstd })
}

fn causal_attention(q: &Tensor, k: &Tensor, v: &Tensor, n_head: usize) -> (Tensor, Vec<Tensor>) {
    let (t, d) = (q.rows(), q.cols());
    let dh = d / n_head;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut att = Tensor::zeros(&[t, d]);
    let mut probs = Vec::with_capacity(n_head);
    for h in 0..n_head {
        let off = h * dh;
        let mut p = Tensor::zeros(&[t, t]);
        for i in 0..t {
            let qi = &q.row(i)[off..off + dh];
            let row = &mut p.row_mut(i)[..=i];
            for (j, s) in row.iter_mut().enumerate() {
                *s = dot(qi, &k.row(j)[off..off + dh]) * scale;
            }
            softmax_in_place(row);
        }
        for i in 0..t {
            let mut acc = vec![0.0; dh];
            for j in 0..=i {
                let pij = p.get(i, j);
                for (a, &vv) in acc.iter_mut().zip(&v.row(j)[off..off + dh]) {
                    *a += pij * vv;
                }
            }
            att.row_mut(i)[off..off + dh].copy_from_slice(&acc);
        }
        probs.push(p);
    }
    (att, probs)
}
