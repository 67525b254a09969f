//! Loss, optimizer, training loop, evaluation and persistence.

mod adam;
mod checkpoint;
mod sweep;
mod trainer;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{ClassCounts, Manifest};
use crate::error::{Error, Result};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState, CHECKPOINT_VERSION};
pub use sweep::{run_sweep, write_sweep_csv, SweepCell, SweepOptions};
pub use trainer::{
    dropout_rng, epoch_order, evaluate, export_embeddings, train, write_scores_csv, Dataset, EpochStats,
    Evaluation, Trainer,
};

/// Lower clamp on probabilities inside the logarithm.
pub const BCE_EPS: f64 = 1e-7;

/// Class weighting scheme for the loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    /// Inverse frequency: the minority class gets the larger weight.
    Auto,
    /// alpha = beta = 1.
    Unit,
    /// alpha, beta equal to the spontaneous and posed proportions.
    Proportion,
}

impl std::str::FromStr for Weighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(Weighting::Auto),
            "unit" => Ok(Weighting::Unit),
            "proportion" => Ok(Weighting::Proportion),
            _ => Err(Error::Argument(format!(
                "unknown weighting `{s}` (expected auto, unit or proportion)"
            ))),
        }
    }
}

/// How the `weight_decay` coefficient is applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecayMode {
    /// Decoupled L2 shrinkage of conv and dense kernels.
    Weight,
    /// Learning rate `lr / (1 + decay * step)`, no shrinkage.
    Lr,
}

impl std::str::FromStr for DecayMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weight" => Ok(DecayMode::Weight),
            "lr" => Ok(DecayMode::Lr),
            _ => Err(Error::Argument(format!("unknown decay mode `{s}` (expected weight or lr)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_videos: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub decay_mode: DecayMode,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weighting: Weighting,
    pub target_fps: f64,
    pub resolution: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_videos: 16,
            lr: 1e-3,
            weight_decay: 0.005,
            decay_mode: DecayMode::Weight,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weighting: Weighting::Auto,
            target_fps: 5.0,
            resolution: 48,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.batch_videos == 0 {
            return bad("epochs and batch_videos must be at least 1".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps.is_finite() && self.adam_eps > 0.0) {
            return bad(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        if !(self.target_fps.is_finite() && self.target_fps > 0.0) {
            return bad(format!("target_fps must be positive, got {}", self.target_fps));
        }
        if self.resolution == 0 {
            return bad("resolution must be positive".into());
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
            decay_mode: self.decay_mode,
        }
    }
}

/// Per-class loss weights: `alpha` on spontaneous (y = 1), `beta` on posed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl LossWeights {
    pub const UNIT: LossWeights = LossWeights { alpha: 1.0, beta: 1.0 };
}

pub fn class_weights_from_counts(counts: ClassCounts, weighting: Weighting) -> Result<LossWeights> {
    if weighting == Weighting::Unit {
        return Ok(LossWeights::UNIT);
    }
    let (s, p) = (counts.spontaneous, counts.posed);
    if s == 0 || p == 0 {
        return Err(Error::Data(format!(
            "class weights need both classes, found {s} spontaneous and {p} posed"
        )));
    }
    let n = (s + p) as f64;
    Ok(match weighting {
        Weighting::Auto => LossWeights {
            alpha: p as f64 / n,
            beta: s as f64 / n,
        },
        _ => LossWeights {
            alpha: s as f64 / n,
            beta: p as f64 / n,
        },
    })
}

/// Loss weights for a training manifest.
pub fn compute_class_weights(manifest: &Manifest, weighting: Weighting) -> Result<LossWeights> {
    class_weights_from_counts(manifest.counts(), weighting)
}

/// `-[alpha y ln p + beta (1 - y) ln(1 - p)]` with `p` clamped to
/// `[BCE_EPS, 1 - BCE_EPS]`.
pub fn weighted_bce(score: f64, label: u8, w: LossWeights) -> f64 {
    let p = score.clamp(BCE_EPS, 1.0 - BCE_EPS);
    if label == 1 {
        -w.alpha * p.ln()
    } else {
        -w.beta * (1.0 - p).ln()
    }
}

/// Threshold rule: spontaneous iff the score reaches one half.
pub fn predict_label(score: f64) -> u8 {
    u8::from(score >= 0.5)
}

pub fn accuracy(predictions: &[u8], labels: &[u8]) -> f64 {
    if predictions.is_empty() {
        return 0.0;
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    correct as f64 / predictions.len() as f64
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
}

pub fn write_metrics_csv(rows: &[MetricRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("epoch,split,loss,accuracy\n");
    for r in rows {
        writeln!(out, "{},{},{},{}", r.epoch, r.split, r.loss, r.accuracy).unwrap();
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
