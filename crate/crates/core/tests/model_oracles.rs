//! Closed-form and brute-force checks of the network blocks.

mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use realsmile::model::{init_params, predict_score, ConvLstmState, Mode, ModelConfig, ModelParams, Net};
use realsmile::{Tape, Tensor};

fn params(cfg: &ModelConfig, seed: u64) -> ModelParams<f64> {
    init_params(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn zero_lstm(p: &mut ModelParams<f64>) {
    for gate in ["i", "f", "o", "g"] {
        for part in ["weight", "bias"] {
            let t = p.get_mut(&format!("lstm.{gate}.{part}")).unwrap();
            *t = Tensor::zeros(t.shape());
        }
    }
}

#[test]
fn tsa_of_identical_frames_is_identity() {
    let cfg = ModelConfig::default();
    let mut p: ModelParams<f32> = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert!(p.get("tsa.conv.bias").unwrap().data().iter().all(|&b| b == 0.0));
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let frames = Tensor::<f32>::rand_uniform(&[100, 3, 48, 48], 0.0, 1.0, &mut rng);
    // Random kernel values must not matter.
    *p.get_mut("tsa.conv.weight").unwrap() = Tensor::rand_uniform(&[3, 3, 3, 3], -2.0, 2.0, &mut rng);
    let mut tape = Tape::new();
    let net = Net::bind(&mut tape, &cfg, &p, Mode::Eval, false).unwrap();
    let x = tape.constant(frames.clone()).unwrap();
    let y = net.tsa(&mut tape, x, x).unwrap();
    let out = tape.value(y);
    assert!(out.data().iter().zip(frames.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn tsa_zero_kernel_passes_frames_through() {
    let cfg = ModelConfig::micro();
    let mut p = params(&cfg, 3);
    *p.get_mut("tsa.conv.weight").unwrap() = Tensor::zeros(&[2, 2, 3, 3]);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = Tensor::<f64>::rand_uniform(&[1, 2, 8, 8], 0.0, 1.0, &mut rng);
    let b = Tensor::<f64>::rand_uniform(&[1, 2, 8, 8], 0.0, 1.0, &mut rng);
    let mut tape = Tape::new();
    let net = Net::bind(&mut tape, &cfg, &p, Mode::Eval, false).unwrap();
    let (va, vb) = (tape.constant(a).unwrap(), tape.constant(b.clone()).unwrap());
    let y = net.tsa(&mut tape, va, vb).unwrap();
    assert_eq!(tape.value(y), &b);
}

#[test]
fn zero_weight_convlstm_gates_are_half() {
    let cfg = ModelConfig::micro();
    let mut p = params(&cfg, 5);
    zero_lstm(&mut p);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut tape = Tape::new();
    let net = Net::bind(&mut tape, &cfg, &p, Mode::Eval, false).unwrap();
    let s = cfg.state_extent();
    let e = tape
        .constant(Tensor::rand_uniform(&[1, cfg.fpn_channels[1], s, s], -3.0, 3.0, &mut rng))
        .unwrap();
    let gates = net.fused_gates(&mut tape).unwrap();
    let state = net.zero_state(&mut tape, 1).unwrap();
    let step = net.convlstm_step(&mut tape, e, state, gates).unwrap();
    for (v, want) in [
        (step.input_gate, 0.5),
        (step.forget_gate, 0.5),
        (step.output_gate, 0.5),
        (step.cell_gate, 0.0),
        (step.state.c, 0.0),
        (step.state.h, 0.0),
    ] {
        assert!(tape.value(v).data().iter().all(|&x| x == want));
    }
}

#[test]
fn convlstm_carries_half_of_initial_cell() {
    let cfg = ModelConfig::micro();
    let mut p = params(&cfg, 7);
    zero_lstm(&mut p);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let s = cfg.state_extent();
    let shape = [1, cfg.convlstm_hidden, s, s];
    let c0 = Tensor::<f64>::rand_uniform(&shape, -4.0, 4.0, &mut rng);
    let mut tape = Tape::new();
    let net = Net::bind(&mut tape, &cfg, &p, Mode::Eval, false).unwrap();
    let e = tape
        .constant(Tensor::rand_uniform(&[1, cfg.fpn_channels[1], s, s], -1.0, 1.0, &mut rng))
        .unwrap();
    let h = tape.constant(Tensor::rand_uniform(&shape, -1.0, 1.0, &mut rng)).unwrap();
    let c = tape.constant(c0.clone()).unwrap();
    let gates = net.fused_gates(&mut tape).unwrap();
    let step = net.convlstm_step(&mut tape, e, ConvLstmState { h, c }, gates).unwrap();
    for ((c1, h1), c0) in tape
        .value(step.state.c)
        .data()
        .iter()
        .zip(tape.value(step.state.h).data())
        .zip(c0.data())
    {
        assert!((c1 - 0.5 * c0).abs() < 1e-6);
        assert!((h1 - 0.5 * (0.5 * c0).tanh()).abs() < 1e-6);
    }
}

#[test]
fn nonlocal_matches_pairwise_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for (hidden, side, bneck) in [(4, 1, 2), (4, 2, 2), (6, 3, 3), (4, 4, 1), (5, 4, 2)] {
        let cfg = ModelConfig {
            convlstm_hidden: hidden,
            nonlocal_bottleneck: Some(bneck),
            ..ModelConfig::micro()
        };
        let mut p = params(&cfg, rng.random());
        for (name, t) in p.iter_mut() {
            if name.starts_with("nl.") {
                *t = Tensor::rand_uniform(t.shape(), -1.0, 1.0, &mut rng);
            }
        }
        let x = Tensor::<f64>::rand_uniform(&[1, hidden, side, side], -2.0, 2.0, &mut rng);
        let mut tape = Tape::new();
        let net = Net::bind(&mut tape, &cfg, &p, Mode::Eval, false).unwrap();
        let vx = tape.constant(x.clone()).unwrap();
        let y = net.nonlocal(&mut tape, vx).unwrap();
        let want = common::nonlocal_oracle(&p, &x, bneck);
        for (a, b) in tape.value(y).data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-6, "P={} {a} vs {b}", side * side);
        }
    }
}

#[test]
fn nonlocal_with_zero_output_kernel_is_identity() {
    let cfg = ModelConfig::micro();
    let mut p = params(&cfg, 10);
    *p.get_mut("nl.z.weight").unwrap() = Tensor::zeros(&[4, 2, 1, 1]);
    let x = Tensor::<f64>::rand_uniform(&[1, 4, 2, 2], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(11));
    let mut tape = Tape::new();
    let net = Net::bind(&mut tape, &cfg, &p, Mode::Eval, false).unwrap();
    let vx = tape.constant(x.clone()).unwrap();
    let y = net.nonlocal(&mut tape, vx).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn block_shapes_follow_config() {
    let cfg = ModelConfig::default();
    let p: ModelParams<f32> = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
    let mut tape = Tape::new();
    let mut net = Net::bind(&mut tape, &cfg, &p, Mode::Train, false).unwrap();
    let x = tape.constant(Tensor::zeros(&[3, 3, 48, 48])).unwrap();
    let f = net.fpn(&mut tape, x).unwrap();
    assert_eq!(tape.shape(f), &[3, 32, 12, 12]);
    let h = tape.constant(Tensor::zeros(&[1, 32, 12, 12])).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (score, emb) = net.classify(&mut tape, h, &mut rng).unwrap();
    assert_eq!(tape.shape(score), &[1, 1]);
    assert_eq!(tape.shape(emb), &[1, 64 * 5 * 5]);
    assert_eq!(cfg.embedding_dim(), 1600);
}

#[test]
fn any_length_from_two_frames_scores_in_unit_interval() {
    let cfg = ModelConfig::default();
    let p: ModelParams<f32> = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(13)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for n in [2, 9, 71] {
        let clip = Tensor::rand_uniform(&[n, 3, 48, 48], 0.0, 1.0, &mut rng);
        let (s, emb) = predict_score(&p, &cfg, &clip).unwrap();
        assert!(s.is_finite() && s > 0.0 && s < 1.0, "{n} frames: {s}");
        assert_eq!(emb.len(), 1600);
    }
    let one = Tensor::zeros(&[1, 3, 48, 48]);
    assert!(predict_score(&p, &cfg, &one).is_err());
}

#[test]
fn softmax_head_scores_are_distributions() {
    let cfg = ModelConfig {
        head: realsmile::model::HeadKind::Softmax,
        ..ModelConfig::micro()
    };
    let p = params(&cfg, 15);
    let clip = Tensor::rand_uniform(&[4, 2, 8, 8], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(16));
    let mut tape = Tape::new();
    let mut net = Net::bind(&mut tape, &cfg, &p, Mode::Eval, false).unwrap();
    let out = net.forward(&mut tape, &clip, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let probs = tape.value(out.score).data().to_vec();
    assert_eq!(probs.len(), 2);
    assert!((probs[0] + probs[1] - 1.0).abs() < 1e-12);
    assert_eq!(out.probabilities(&tape), vec![probs[1]]);
}

#[test]
fn eval_forward_is_deterministic_and_no_tsa_runs() {
    for use_tsa in [true, false] {
        let cfg = ModelConfig { use_tsa, ..ModelConfig::micro() };
        let p: ModelParams<f32> = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(17)).unwrap();
        let clip = Tensor::rand_uniform(&[5, 2, 8, 8], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(18));
        let a = predict_score(&p, &cfg, &clip).unwrap();
        let b = predict_score(&p, &cfg, &clip).unwrap();
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert_eq!(a.1, b.1);
    }
}

#[test]
fn eval_batch_rows_match_single_clip_passes() {
    let cfg = ModelConfig::micro();
    let p = params(&cfg, 19);
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let clips: Vec<Tensor<f64>> = [2, 5, 3]
        .iter()
        .map(|&n| Tensor::rand_uniform(&[n, 2, 8, 8], 0.0, 1.0, &mut rng))
        .collect();
    let mut tape = Tape::new();
    let mut net = Net::bind(&mut tape, &cfg, &p, Mode::Eval, false).unwrap();
    let out = net.forward_batch(&mut tape, &clips, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let batched = out.probabilities(&tape);
    assert_eq!(batched.len(), 3);
    for (clip, b) in clips.iter().zip(batched) {
        let (single, _) = predict_score(&p, &cfg, clip).unwrap();
        assert!((single - b).abs() < 1e-12);
    }
}

#[test]
fn train_batch_statistics_couple_videos() {
    let cfg = ModelConfig { resolution: 16, ..ModelConfig::micro() };
    let p = params(&cfg, 21);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let a = Tensor::<f64>::rand_uniform(&[3, 2, 16, 16], 0.0, 1.0, &mut rng);
    let others: Vec<Tensor<f64>> = (0..2).map(|_| Tensor::rand_uniform(&[4, 2, 16, 16], 0.0, 1.0, &mut rng)).collect();
    let first_score = |other: &Tensor<f64>| {
        let mut tape = Tape::new();
        let mut net = Net::bind(&mut tape, &cfg, &p, Mode::Train, false).unwrap();
        let mut drop = ChaCha8Rng::seed_from_u64(0);
        let out = net.forward_batch(&mut tape, &[a.clone(), other.clone()], &mut drop).unwrap();
        assert_eq!(out.bn_stats.len(), 3);
        out.probabilities(&tape)[0]
    };
    assert_ne!(first_score(&others[0]), first_score(&others[1]));
}
