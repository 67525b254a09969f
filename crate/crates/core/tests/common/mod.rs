//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;

use realsmile::data::{synth_generate, Manifest, SynthConfig};
use realsmile::model::{Mode, ModelConfig, ModelParams, Net};
use realsmile::training::{adam_step, dropout_rng, epoch_order, AdamState, Dataset, TrainConfig};
use realsmile::{Tape, Tensor};

/// A narrow network on 24×24 frames that still has a 2×2 head map.
pub fn small_model() -> ModelConfig {
    ModelConfig {
        resolution: 24,
        fpn_channels: [4, 8],
        convlstm_hidden: 8,
        head_conv_channels: 8,
        ..ModelConfig::default()
    }
}

pub fn small_train(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        resolution: 24,
        seed,
        ..TrainConfig::default()
    }
}

pub fn synth(dir: &Path, n_subjects: usize, videos_per_subject: usize, seed: u64) -> Manifest {
    let cfg = SynthConfig {
        n_subjects,
        videos_per_subject,
        resolution: 48,
        noise_level: 0.05,
        seed,
        ..SynthConfig::default()
    };
    synth_generate(&cfg, dir).unwrap()
}

pub fn load_all(m: &Manifest, resolution: usize) -> Dataset {
    let idx: Vec<usize> = (0..m.len()).collect();
    Dataset::load(m, &idx, 5.0, resolution, 3).unwrap()
}

fn trainable(cfg: &ModelConfig) -> BTreeMap<String, bool> {
    cfg.param_specs()
        .into_iter()
        .filter(|s| s.role.trainable())
        .map(|s| (s.name, s.role.decays()))
        .collect()
}

/// Plain BCE on a probability, clamped like the library loss.
pub fn plain_bce(p: f64, y: u8) -> f64 {
    let p = p.clamp(1e-7, 1.0 - 1e-7);
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

fn plain_bce_slope(p: f64, y: u8) -> f64 {
    let p = p.clamp(1e-7, 1.0 - 1e-7);
    if y == 1 {
        -1.0 / p
    } else {
        1.0 / (1.0 - p)
    }
}

fn group_clips(data: &Dataset, idx: &[usize]) -> Vec<Tensor<f32>> {
    idx.iter().map(|&i| data.clips[i].clone()).collect()
}

fn collect_grads(tape: &Tape<f32>, net: &Net<f32>) -> BTreeMap<String, Tensor<f32>> {
    net.vars()
        .iter()
        .map(|(n, v)| (n.clone(), tape.grad(*v).unwrap()))
        .collect()
}

fn step(cfg: &ModelConfig, tc: &TrainConfig, params: &mut ModelParams<f32>, grads: &BTreeMap<String, Tensor<f32>>, adam: &mut AdamState) {
    let flags = trainable(cfg);
    let entries = params
        .iter_mut()
        .filter_map(|(n, t)| flags.get(n).map(|&d| (n.as_str(), t, d)));
    adam_step(entries, grads, adam, &tc.adam()).unwrap();
}

/// Epoch 0 with unweighted BCE written out by hand: the loss and its slope
/// are computed outside the tape, which only back-propagates the seeded
/// scores. Returns the mean per-video loss.
pub fn hand_unweighted_epoch0(
    cfg: &ModelConfig,
    tc: &TrainConfig,
    init: &ModelParams<f32>,
    data: &Dataset,
) -> f64 {
    let mut params = init.clone();
    let mut adam = AdamState::default();
    let order = epoch_order(tc.seed, 0, data.len());
    let mut total = 0.0;
    for (g, idx) in order.chunks(tc.batch_videos).enumerate() {
        let mut rng = dropout_rng(tc.seed, 0, g * tc.batch_videos);
        let mut tape = Tape::new();
        let grads = {
            let mut net = Net::bind(&mut tape, cfg, &params, Mode::Train, true).unwrap();
            let out = net.forward_batch(&mut tape, &group_clips(data, idx), &mut rng).unwrap();
            let mut slopes = Vec::new();
            for (k, &i) in idx.iter().enumerate() {
                let p = tape.value(out.score).data()[k] as f64;
                let y = data.labels[i];
                total += plain_bce(p, y);
                slopes.push((plain_bce_slope(p, y) / idx.len() as f64) as f32);
            }
            let seed = Tensor::new(vec![idx.len(), 1], slopes).unwrap();
            tape.backward_with(out.score, seed).unwrap();
            collect_grads(&tape, &net)
        };
        step(cfg, tc, &mut params, &grads, &mut adam);
    }
    total / data.len() as f64
}

/// One optimizer step on the mean of per-video losses, each recorded as its
/// own node over one row of a single batched forward pass.
pub fn mean_loss_step(
    cfg: &ModelConfig,
    tc: &TrainConfig,
    init: &ModelParams<f32>,
    data: &Dataset,
    alpha: f32,
    beta: f32,
) -> ModelParams<f32> {
    let mut params = init.clone();
    let order = epoch_order(tc.seed, 0, data.len());
    let grads = {
        let mut tape = Tape::new();
        let mut net = Net::bind(&mut tape, cfg, &params, Mode::Train, true).unwrap();
        let mut rng = dropout_rng(tc.seed, 0, 0);
        let out = net.forward_batch(&mut tape, &group_clips(data, &order), &mut rng).unwrap();
        let mut losses = Vec::new();
        for (k, &i) in order.iter().enumerate() {
            let row = tape.slice(out.score, 0, k, 1).unwrap();
            let y = [f32::from(data.labels[i])];
            losses.push(tape.weighted_bce(row, &y, alpha, beta, 1e-7).unwrap());
        }
        let mut total = losses[0];
        for &l in &losses[1..] {
            total = tape.add(total, l).unwrap();
        }
        let mean = tape.scale(total, 1.0 / losses.len() as f32).unwrap();
        tape.backward(mean).unwrap();
        collect_grads(&tape, &net)
    };
    step(cfg, tc, &mut params, &grads, &mut AdamState::default());
    params
}

/// Direct double loop over position pairs.
pub fn nonlocal_oracle(p: &ModelParams<f64>, x: &Tensor<f64>, b: usize) -> Vec<f64> {
    let s = x.shape();
    let (c, hh, ww) = (s[1], s[2], s[3]);
    let np = hh * ww;
    let at = |ch: usize, pos: usize| x.data()[ch * np + pos];
    let embed = |name: &str| -> Vec<Vec<f64>> {
        let w = p.get(&format!("nl.{name}.weight")).unwrap().data();
        let bias = p.get(&format!("nl.{name}.bias")).unwrap().data();
        (0..np)
            .map(|pos| (0..b).map(|o| bias[o] + (0..c).map(|i| w[o * c + i] * at(i, pos)).sum::<f64>()).collect())
            .collect()
    };
    let (theta, phi, g) = (embed("theta"), embed("phi"), embed("g"));
    let wz = p.get("nl.z.weight").unwrap().data();
    let bz = p.get("nl.z.bias").unwrap().data();
    let mut out = vec![0.0; c * np];
    for i in 0..np {
        let mut y = vec![0.0; b];
        for j in 0..np {
            let f: f64 = (0..b).map(|k| theta[i][k] * phi[j][k]).sum::<f64>() / np as f64;
            for k in 0..b {
                y[k] += f * g[j][k];
            }
        }
        for o in 0..c {
            out[o * np + i] = bz[o] + (0..b).map(|k| wz[o * b + k] * y[k]).sum::<f64>() + at(o, i);
        }
    }
    out
}
