use dfalab::diagnostics::finite_diff_check;
use dfalab::harness::check::random_tokens;
use dfalab::model::{
    backward_bp, block_backward, BackwardDerivative, BackwardRule, ResidualBackward,
};
use dfalab::tensor::{softmax_cross_entropy, Tensor};
use dfalab::{Model, ModelConfig, RngState};

type Mat = Vec<Vec<f64>>;

fn mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn mm(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            for p in 0..k {
                out[i][j] += a[i][p] * b[p][j];
            }
        }
    }
    out
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

fn ln(x: &Mat, g: &[f64], b: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mu) / (var + 1e-5).sqrt() * g[j] + b[j])
                .collect()
        })
        .collect()
}

/// Straight-line forward pass written from the architecture description.
fn oracle_logits(m: &Model, tokens: &[usize]) -> Mat {
    let p = &m.params;
    let c = &m.config;
    let dh = c.d_model / c.n_head;
    let mut x: Mat = tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| (0..c.d_model).map(|j| p.tok_emb.get(t, j) + p.pos_emb.get(i, j)).collect())
        .collect();
    for b in &p.blocks {
        let h = ln(&x, b.ln1_gain.data(), b.ln1_bias.data());
        let (q, k, v) = (mm(&h, &mat(&b.wq)), mm(&h, &mat(&b.wk)), mm(&h, &mat(&b.wv)));
        let t = tokens.len();
        let mut att = vec![vec![0.0; c.d_model]; t];
        for head in 0..c.n_head {
            let cols = head * dh..(head + 1) * dh;
            for i in 0..t {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| cols.clone().map(|a| q[i][a] * k[j][a]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
                for (j, s) in scores.iter().enumerate() {
                    let w = (s - mx).exp() / z;
                    for a in cols.clone() {
                        att[i][a] += w * v[j][a];
                    }
                }
            }
        }
        let mid = add(&x, &mm(&att, &mat(&b.wo)));
        let h2 = ln(&mid, b.ln2_gain.data(), b.ln2_bias.data());
        let hidden: Mat = mm(&h2, &mat(&b.w1))
            .into_iter()
            .map(|r| r.into_iter().map(|a| a.max(0.0)).collect())
            .collect();
        x = add(&mid, &mm(&hidden, &mat(&b.w2)));
    }
    mm(&ln(&x, p.lnf_gain.data(), p.lnf_bias.data()), &mat(&p.proj))
}

fn perturbed_model(config: ModelConfig, seed: u64) -> Model {
    // Non-trivial gains and biases so the oracle exercises every parameter.
    let mut m = Model::init(config, &RngState::new(seed)).unwrap();
    let mut rng = RngState::new(seed + 1000);
    for t in m.params.tensors_mut() {
        if t.shape().len() == 1 {
            for v in t.data_mut() {
                *v += (rng.next_u64() % 1000) as f64 / 2000.0 - 0.25;
            }
        }
    }
    m
}

#[test]
fn forward_matches_straight_line_oracle() {
    let m = perturbed_model(ModelConfig::new(2, 32, 4, 40, 12), 3);
    let mut rng = RngState::new(9);
    let toks = random_tokens(&mut rng, 12, 40);
    let (logits, _) = m.forward(&toks).unwrap();
    let want = oracle_logits(&m, &toks);
    for (i, row) in want.iter().enumerate() {
        for (j, &w) in row.iter().enumerate() {
            assert!((logits.get(i, j) - w).abs() < 1e-10, "({i},{j}) {} vs {w}", logits.get(i, j));
        }
    }
}

#[test]
fn finite_differences_across_depths_and_widths() {
    for n_layer in 1..=3 {
        for d_model in [16, 32] {
            for seed in 0..3 {
                let m = perturbed_model(ModelConfig::new(n_layer, d_model, 2, 11, 6), seed);
                let mut rng = RngState::new(seed + 50);
                let x = random_tokens(&mut rng, 6, 11);
                let y = random_tokens(&mut rng, 6, 11);
                let r = finite_diff_check(&m, &x, &y, 1e-5, 32, seed).unwrap();
                assert!(
                    r.max_rel_error() < 1e-4,
                    "{n_layer}x{d_model} seed {seed}: {}",
                    r.max_rel_error()
                );
                assert!(r.tensors.iter().all(|t| t.probed > 0));
            }
        }
    }
}

#[test]
fn gradients_respect_causality() {
    let m = perturbed_model(ModelConfig::new(2, 16, 2, 13, 10), 4);
    let mut rng = RngState::new(2);
    let toks = random_tokens(&mut rng, 10, 13);
    let targets = random_tokens(&mut rng, 10, 13);
    let (logits, tape) = m.forward(&toks).unwrap();
    let (_, mut err) = softmax_cross_entropy(&logits, &targets).unwrap();
    let s = 4;
    for i in s..10 {
        err.row_mut(i).iter_mut().for_each(|v| *v = 0.0);
    }
    let g = backward_bp(&m, &tape, &err).unwrap();
    for i in 0..10 {
        let norm: f64 = g.pos_emb.row(i).iter().map(|v| v * v).sum();
        if i < s {
            assert!(norm > 0.0, "position {i}");
        } else {
            assert_eq!(norm, 0.0, "position {i} leaks into earlier losses");
        }
    }
}

fn ln_backward(g_out: &[f64], xhat: &[f64], rstd: f64) -> Vec<f64> {
    let n = g_out.len() as f64;
    let mg = g_out.iter().sum::<f64>() / n;
    let mgx = g_out.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / n;
    g_out
        .iter()
        .zip(xhat)
        .map(|(g, x)| rstd * (g - mg - x * mgx))
        .collect()
}

/// A 2-token, width-4 block with zeroed attention and an MLP that copies its
/// input into the first four hidden units and back.
fn identity_mlp_block() -> (Model, Vec<Vec<f64>>) {
    let cfg = ModelConfig::new(1, 4, 1, 2, 2);
    let mut m = Model::init(cfg, &RngState::new(0)).unwrap();
    let inputs = vec![vec![1.0, 2.0, 3.0, 4.5], vec![-1.0, 0.5, 2.0, -0.25]];
    m.params.tok_emb = Tensor::from_rows(&inputs).unwrap();
    m.params.pos_emb = Tensor::zeros(&[2, 4]);
    let b = &mut m.params.blocks[0];
    for w in [&mut b.wq, &mut b.wk, &mut b.wv, &mut b.wo] {
        *w = Tensor::zeros(&[4, 4]);
    }
    b.w1 = Tensor::zeros(&[4, 16]);
    b.w2 = Tensor::zeros(&[16, 4]);
    for i in 0..4 {
        b.w1.set(i, i, 1.0);
        b.w2.set(i, i, 1.0);
    }
    (m, inputs)
}

#[test]
fn block_backward_hand_derived_case() {
    let (m, inputs) = identity_mlp_block();
    let (_, tape) = m.forward(&[0, 1]).unwrap();
    let bt = &tape.blocks[0];
    let g = Tensor::from_rows(&[vec![0.3, -0.2, 0.1, 0.4], vec![-0.5, 0.25, 0.0, 0.6]]).unwrap();

    // Attention is zero, so mid = input and the MLP sees ln(input) (gain 1, bias 0).
    let xhat: Vec<Vec<f64>> = inputs
        .iter()
        .map(|r| {
            let mu = r.iter().sum::<f64>() / 4.0;
            let var = r.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 4.0;
            r.iter().map(|v| (v - mu) / (var + 1e-5).sqrt()).collect()
        })
        .collect();
    let rstd: Vec<f64> = inputs
        .iter()
        .map(|r| {
            let mu = r.iter().sum::<f64>() / 4.0;
            1.0 / (r.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 4.0 + 1e-5).sqrt()
        })
        .collect();

    for (residual, derivative) in [
        (ResidualBackward::Asymmetric, BackwardDerivative::Tanh),
        (ResidualBackward::Asymmetric, BackwardDerivative::Relu),
        (ResidualBackward::Symmetric, BackwardDerivative::Relu),
    ] {
        let rule = BackwardRule { residual, derivative };
        let (grads, g_in) = block_backward(&m.params.blocks[0], bt, &g, rule).unwrap();
        let fprime = |a: f64| match derivative {
            BackwardDerivative::Relu => (a > 0.0) as u8 as f64,
            BackwardDerivative::Tanh => 1.0 - a.tanh().powi(2),
        };
        for t in 0..2 {
            let g_pre: Vec<f64> = (0..4).map(|j| g.get(t, j) * fprime(xhat[t][j])).collect();
            for j in 0..4 {
                // dW2[j][j] sums hidden[t][j] * g[t][j] over tokens.
                let w2 = (0..2).map(|s| xhat[s][j].max(0.0) * g.get(s, j)).sum::<f64>();
                assert!((grads.w2.get(j, j) - w2).abs() < 1e-12);
                let w1 = (0..2)
                    .map(|s| xhat[s][j] * g.get(s, j) * fprime(xhat[s][j]))
                    .sum::<f64>();
                assert!((grads.w1.get(j, j) - w1).abs() < 1e-12);
            }
            let through_ln = ln_backward(&g_pre, &xhat[t], rstd[t]);
            for j in 0..4 {
                let want = match residual {
                    // Both skips dropped and attention zero: nothing reaches the input.
                    ResidualBackward::Asymmetric => 0.0,
                    ResidualBackward::Symmetric => g.get(t, j) + through_ln[j],
                };
                assert!((g_in.get(t, j) - want).abs() < 1e-12, "{rule:?} t={t} j={j}");
            }
        }
        let gain: f64 = (0..2)
            .map(|t| xhat[t][0] * g.get(t, 0) * fprime(xhat[t][0]))
            .sum();
        assert!((grads.ln2_gain.data()[0] - gain).abs() < 1e-12);
        assert_eq!(grads.wq.norm(), 0.0);
        assert_eq!(grads.wo.norm(), 0.0);
    }
}

#[test]
fn invalid_inputs_are_rejected() {
    let m = Model::init(ModelConfig::new(1, 8, 2, 5, 4), &RngState::new(0)).unwrap();
    assert!(m.forward(&[]).is_err());
    assert!(m.forward(&[0, 1, 2, 3, 4]).is_err());
    assert!(m.forward(&[7]).is_err());
}
