use dfalab::diagnostics::{alignment, cosine};
use dfalab::feedback::{compute_updates, compute_updates_with, dfa_layer_update, make_feedback_matrix};
use dfalab::harness::check::random_tokens;
use dfalab::harness::corpus::synthetic_text;
use dfalab::harness::train::{init_run, train_run};
use dfalab::harness::{Corpus, RunConfig};
use dfalab::model::{BackwardDerivative, ResidualBackward};
use dfalab::tensor::gaussian;
use dfalab::{FeedbackMatrix, FeedbackMode, Model, ModelConfig, RngState};

fn sample(config: ModelConfig, seed: u64) -> (Model, Vec<usize>, Vec<usize>) {
    let m = Model::init(config, &RngState::new(seed)).unwrap();
    let mut rng = RngState::new(seed + 7);
    let v = m.config.vocab_size;
    let t = m.config.context;
    (m, random_tokens(&mut rng, t, v), random_tokens(&mut rng, t, v))
}

#[test]
fn single_block_modes_are_bitwise_identical() {
    for (residual, derivative) in [
        (ResidualBackward::Symmetric, BackwardDerivative::Relu),
        (ResidualBackward::Asymmetric, BackwardDerivative::Tanh),
    ] {
        let cfg = ModelConfig::new(1, 16, 2, 20, 8).with_backward(residual, derivative);
        let (m, x, y) = sample(cfg, 1);
        let (_, tape) = m.forward(&x).unwrap();
        let b = make_feedback_matrix(16, &mut RngState::new(5), 0.25).unwrap();
        let (l0, bp) = compute_updates(FeedbackMode::Bp, &m, &tape, &y, None).unwrap();
        for mode in FeedbackMode::ALL {
            let (l, g) = compute_updates(mode, &m, &tape, &y, Some(&b)).unwrap();
            assert_eq!(l.to_bits(), l0.to_bits());
            for ((name, a), c) in g.named().into_iter().zip(bp.tensors()) {
                assert_eq!(a.data(), c.data(), "{mode} {name}");
            }
        }
    }
}

#[test]
fn dfa_update_matches_per_element_oracle() {
    for seed in 0..20 {
        let mut rng = RngState::new(seed);
        let mut g = |r, c| gaussian(&mut rng, &[r, c], 1.0).unwrap();
        let (b, e, a, h) = (g(4, 4), g(4, 4), g(4, 4), g(4, 4));
        for d in [None, Some(BackwardDerivative::Relu), Some(BackwardDerivative::Tanh)] {
            let got = dfa_layer_update(&b, &e, &a, &h, d).unwrap();
            for i in 0..4 {
                for j in 0..4 {
                    let mut want = 0.0;
                    for t in 0..4 {
                        let be: f64 = (0..4).map(|k| b.get(j, k) * e.get(t, k)).sum();
                        let fp = match d {
                            None => 1.0,
                            Some(BackwardDerivative::Relu) => (a.get(t, j) > 0.0) as u8 as f64,
                            Some(BackwardDerivative::Tanh) => 1.0 / a.get(t, j).cosh().powi(2),
                        };
                        want += be * fp * h.get(t, i);
                    }
                    assert!((got.get(i, j) - want).abs() < 1e-12, "seed {seed} ({i},{j})");
                }
            }
        }
    }
}

#[test]
fn dfa_update_is_linear_in_the_error() {
    let mut rng = RngState::new(3);
    let b = gaussian(&mut rng, &[8, 8], 1.0).unwrap();
    let e = gaussian(&mut rng, &[5, 8], 1.0).unwrap();
    let a = gaussian(&mut rng, &[5, 8], 1.0).unwrap();
    let h = gaussian(&mut rng, &[5, 3], 1.0).unwrap();
    let one = dfa_layer_update(&b, &e, &a, &h, Some(BackwardDerivative::Relu)).unwrap();
    let two = dfa_layer_update(&b, &e.scale(2.0), &a, &h, Some(BackwardDerivative::Relu)).unwrap();
    assert_eq!(two, one.scale(2.0));
}

#[test]
fn parallel_block_updates_are_bitwise_sequential() {
    let (m, x, y) = sample(ModelConfig::new(4, 16, 2, 20, 8), 2);
    let (_, tape) = m.forward(&x).unwrap();
    let b = make_feedback_matrix(16, &mut RngState::new(5), 0.25).unwrap();
    for mode in [FeedbackMode::DfaCanonical, FeedbackMode::DfaBlockwise] {
        let seq = compute_updates_with(mode, &m, &tape, &y, Some(&b), false).unwrap();
        let par = compute_updates_with(mode, &m, &tape, &y, Some(&b), true).unwrap();
        assert_eq!(seq.1, par.1);
    }
}

fn tiny_run(mode: FeedbackMode) -> (RunConfig, Corpus) {
    let mut c = RunConfig::new(mode, 3, 16);
    c.model.n_head = 2;
    c.model.context = 16;
    c.batch_size = 2;
    c.total_tokens = 16 * 2 * 12;
    c.log_interval = 4;
    c.hyper.lr = 3e-3;
    c.hyper.warmup_steps = 2;
    (c, Corpus::from_documents(&[synthetic_text(4, 2000)]).unwrap())
}

#[test]
fn feedback_matrix_is_unchanged_by_training() {
    for mode in [FeedbackMode::DfaCanonical, FeedbackMode::DfaBlockwise] {
        let (cfg, corpus) = tiny_run(mode);
        let (_, b0) = init_run(&cfg).unwrap();
        let b0 = b0.unwrap();
        let out = train_run(&cfg, &corpus).unwrap();
        let b1 = out.feedback.as_ref().unwrap();
        assert_eq!(b1.matrix(), b0.matrix());
        assert_eq!(b1.fingerprint(), b0.fingerprint());
        let (m0, _) = init_run(&cfg).unwrap();
        assert_ne!(out.model.params.blocks[0].w1, m0.params.blocks[0].w1);
    }
}

#[test]
fn shallow_training_freezes_everything_below_the_last_block() {
    let (cfg, corpus) = tiny_run(FeedbackMode::Shallow);
    let (m0, _) = init_run(&cfg).unwrap();
    let out = train_run(&cfg, &corpus).unwrap();
    let p = &out.model.params;
    assert_eq!(p.tok_emb, m0.params.tok_emb);
    assert_eq!(p.pos_emb, m0.params.pos_emb);
    assert_eq!(p.blocks[0], m0.params.blocks[0]);
    assert_eq!(p.blocks[1], m0.params.blocks[1]);
    assert_ne!(p.blocks[2].w1, m0.params.blocks[2].w1);
    assert_ne!(p.proj, m0.params.proj);
}

#[test]
fn canonical_dfa_freezes_inner_layer_norms() {
    let (cfg, corpus) = tiny_run(FeedbackMode::DfaCanonical);
    let (m0, _) = init_run(&cfg).unwrap();
    let out = train_run(&cfg, &corpus).unwrap();
    let b = &out.model.params.blocks[0];
    assert_eq!(b.ln1_gain, m0.params.blocks[0].ln1_gain);
    assert_eq!(b.ln2_bias, m0.params.blocks[0].ln2_bias);
    assert_ne!(b.wq, m0.params.blocks[0].wq);
    assert_ne!(out.model.params.blocks[2].ln1_gain, m0.params.blocks[2].ln1_gain);
}

#[test]
fn alignment_matches_recomputed_cosines() {
    let cfg = ModelConfig::new(3, 16, 2, 20, 8)
        .with_backward(ResidualBackward::Asymmetric, BackwardDerivative::Tanh);
    let (m, x, y) = sample(cfg, 6);
    let (_, tape) = m.forward(&x).unwrap();
    let b = make_feedback_matrix(16, &mut RngState::new(8), 0.25).unwrap();
    let rec = alignment(11, &m, &tape, &y, &b, FeedbackMode::DfaBlockwise).unwrap();
    let (_, dfa) = compute_updates(FeedbackMode::DfaBlockwise, &m, &tape, &y, Some(&b)).unwrap();
    let (_, bp) = compute_updates(FeedbackMode::Bp, &m, &tape, &y, None).unwrap();
    assert_eq!(rec.step, 11);
    for ((name, g), r) in dfa.named().into_iter().zip(bp.tensors()) {
        let dot: f64 = g.data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
        let want = dot / (g.norm() * r.norm());
        let got = rec.get(&name).unwrap().unwrap();
        assert!((got - want).abs() < 1e-12, "{name}: {got} vs {want}");
        if name.starts_with("blocks.2.") || name.starts_with("lnf") || name == "proj" {
            assert!((got - 1.0).abs() < 1e-12, "{name} is trained exactly");
        }
    }

    // Scaling B scales every pseudo-gradient, leaving the cosines alone.
    let b3 = FeedbackMatrix::from_matrix(b.matrix().scale(3.0)).unwrap();
    let rec3 = alignment(11, &m, &tape, &y, &b3, FeedbackMode::DfaBlockwise).unwrap();
    for (e, e3) in rec.entries.iter().zip(&rec3.entries) {
        assert!((e.cosine.unwrap() - e3.cosine.unwrap()).abs() < 1e-12, "{}", e.tensor);
    }
    assert_eq!(cosine(&[1.0, 0.0], &[0.0, 2.0]), Some(0.0));
}
