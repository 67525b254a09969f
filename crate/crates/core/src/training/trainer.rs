use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{
    adam_step, class_weights_from_counts, predict_label, weighted_bce, AdamState, Checkpoint, LossWeights,
    MetricRow, RngState, TrainConfig, BCE_EPS,
};
use crate::data::{load_clip, ClassCounts, FoldPlan, Label, Manifest};
use crate::error::{Error, Result};
use crate::model::{init_params, predict_score, Net, Mode, ModelConfig, ModelParams, ParamRole};
use crate::tensor::{BatchStats, Tape, Tensor};

/// Preprocessed clips with their labels, in manifest order.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub ids: Vec<String>,
    pub labels: Vec<Label>,
    pub clips: Vec<Tensor<f32>>,
}

impl Dataset {
    /// Loads and preprocesses the samples at `indices`. Videos are decoded in
    /// parallel; order follows `indices`.
    pub fn load(
        manifest: &Manifest,
        indices: &[usize],
        target_fps: f64,
        resolution: usize,
        channels: usize,
    ) -> Result<Self> {
        let samples = manifest.samples();
        let clips = indices
            .par_iter()
            .map(|&i| load_clip(&samples[i], target_fps, resolution, channels))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            ids: indices.iter().map(|&i| samples[i].id.clone()).collect(),
            labels: indices.iter().map(|&i| samples[i].label).collect(),
            clips,
        })
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn counts(&self) -> ClassCounts {
        let spontaneous = self.labels.iter().filter(|&&l| l == 1).count();
        ClassCounts {
            spontaneous,
            posed: self.labels.len() - spontaneous,
            subjects: 0,
        }
    }

    /// Same clips under different labels.
    pub fn relabeled(&self, labels: Vec<Label>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::Argument(format!("{} labels for {} clips", labels.len(), self.len())));
        }
        Ok(Self { labels, ..self.clone() })
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn stream(seed: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix(splitmix(splitmix(seed ^ tag) ^ a) ^ b))
}

const TAG_INIT: u64 = 1;
const TAG_ORDER: u64 = 2;
const TAG_DROPOUT: u64 = 3;

/// Visiting order of `n` training videos in `epoch`.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, TAG_ORDER, epoch, 0));
    order
}

/// Dropout generator for the group starting at `position` of an epoch's order.
pub fn dropout_rng(seed: u64, epoch: u64, position: usize) -> ChaCha8Rng {
    stream(seed, TAG_DROPOUT, epoch, position as u64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean per-video training loss.
    pub loss: f64,
    /// Accuracy of the train-mode scores seen during the epoch.
    pub accuracy: f64,
}

/// Eval-mode results over a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub scores: Vec<f64>,
    pub predictions: Vec<Label>,
    pub accuracy: f64,
    pub loss: f64,
}

struct GroupPass {
    scores: Vec<f64>,
    grads: BTreeMap<String, Tensor<f32>>,
    bn: Vec<(String, BatchStats<f32>)>,
}

/// Forward and backward for one accumulation group on a single tape. Batch
/// norm statistics span the group; the loss is the mean over its videos.
fn group_pass(
    params: &ModelParams<f32>,
    config: &ModelConfig,
    clips: &[Tensor<f32>],
    labels: &[Label],
    weights: LossWeights,
    rng: &mut ChaCha8Rng,
) -> Result<GroupPass> {
    let mut tape = Tape::new();
    let mut net = Net::bind(&mut tape, config, params, Mode::Train, true)?;
    let out = net.forward_batch(&mut tape, clips, rng)?;
    let positive = out.positive_score(&mut tape)?;
    let targets: Vec<f32> = labels.iter().map(|&y| f32::from(y)).collect();
    let loss = tape.weighted_bce(
        positive,
        &targets,
        weights.alpha as f32,
        weights.beta as f32,
        BCE_EPS as f32,
    )?;
    let scores = out.probabilities(&tape).into_iter().map(f64::from).collect();
    tape.backward(loss)?;
    let grads = net
        .vars()
        .iter()
        .map(|(n, &v)| {
            let g = tape.grad(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v)));
            (n.clone(), g)
        })
        .collect();
    Ok(GroupPass {
        scores,
        grads,
        bn: out.bn_stats,
    })
}

/// Owns parameters and optimizer state for one training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    model_config: ModelConfig,
    train_config: TrainConfig,
    params: ModelParams<f32>,
    adam: AdamState,
    weights: LossWeights,
    epoch: usize,
    history: Vec<MetricRow>,
}

fn check_configs(model: &ModelConfig, train: &TrainConfig) -> Result<()> {
    model.validate()?;
    train.validate()?;
    if model.resolution != train.resolution {
        return Err(Error::Config(format!(
            "model resolution {} differs from training resolution {}",
            model.resolution, train.resolution
        )));
    }
    Ok(())
}

impl Trainer {
    /// Fresh parameters drawn from the training seed.
    pub fn new(model_config: ModelConfig, train_config: TrainConfig, weights: LossWeights) -> Result<Self> {
        check_configs(&model_config, &train_config)?;
        if !(weights.alpha > 0.0 && weights.beta > 0.0) {
            return Err(Error::Config(format!("loss weights must be positive, got {weights:?}")));
        }
        let params = init_params(&model_config, &mut stream(train_config.seed, TAG_INIT, 0, 0))?;
        Ok(Self {
            model_config,
            train_config,
            params,
            adam: AdamState::default(),
            weights,
            epoch: 0,
            history: Vec::new(),
        })
    }

    /// Resumes from a checkpoint; `train_config` may extend the epoch count.
    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        check_configs(&ck.model_config, &ck.train_config)?;
        if ck.rng.seed != ck.train_config.seed || ck.rng.epoch != ck.epoch as u64 {
            return Err(Error::Format(format!(
                "checkpoint generator state {:?} disagrees with seed {} at epoch {}",
                ck.rng, ck.train_config.seed, ck.epoch
            )));
        }
        Ok(Self {
            model_config: ck.model_config,
            train_config: ck.train_config,
            params: ck.params,
            adam: ck.adam.unwrap_or_default(),
            weights: ck.loss_weights,
            epoch: ck.epoch,
            history: ck.history,
        })
    }

    pub fn params(&self) -> &ModelParams<f32> {
        &self.params
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.model_config
    }

    pub fn train_config(&self) -> &TrainConfig {
        &self.train_config
    }

    pub fn set_epochs(&mut self, epochs: usize) -> Result<()> {
        let cfg = TrainConfig { epochs, ..self.train_config.clone() };
        cfg.validate()?;
        self.train_config = cfg;
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        self.weights
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn history(&self) -> &[MetricRow] {
        &self.history
    }

    /// One pass over `data`: shuffled order, groups of `batch_videos`
    /// videos, one Adam step on each group's mean loss.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<EpochStats> {
        if data.is_empty() {
            return Err(Error::Data("empty training split".into()));
        }
        let seed = self.train_config.seed;
        let epoch = self.epoch as u64;
        let order = epoch_order(seed, epoch, data.len());
        let roles: BTreeMap<String, ParamRole> = self
            .model_config
            .param_specs()
            .into_iter()
            .map(|s| (s.name, s.role))
            .collect();
        let momentum = self.model_config.bn_momentum as f32;
        let adam_cfg = self.train_config.adam();

        let mut total_loss = 0.0;
        let mut correct = 0usize;
        let positions: Vec<usize> = (0..order.len()).collect();
        for group in positions.chunks(self.train_config.batch_videos) {
            let idx: Vec<usize> = group.iter().map(|&pos| order[pos]).collect();
            let min_frames = self.model_config.min_frames();
            if let Some(&i) = idx.iter().find(|&&i| data.clips[i].shape()[0] < min_frames) {
                return Err(Error::Input(format!(
                    "video `{}`: {} frame(s), at least {min_frames} required",
                    data.ids[i],
                    data.clips[i].shape()[0]
                )));
            }
            let clips: Vec<Tensor<f32>> = idx.iter().map(|&i| data.clips[i].clone()).collect();
            let labels: Vec<Label> = idx.iter().map(|&i| data.labels[i]).collect();
            let mut rng = dropout_rng(seed, epoch, group[0]);
            let pass = group_pass(&self.params, &self.model_config, &clips, &labels, self.weights, &mut rng)?;
            for (&score, &label) in pass.scores.iter().zip(&labels) {
                total_loss += weighted_bce(score, label, self.weights);
                correct += usize::from(predict_label(score) == label);
            }
            for (layer, stats) in &pass.bn {
                self.update_running(layer, stats, momentum)?;
            }
            let grads = pass.grads;
            let entries = self.params.iter_mut().filter_map(|(n, t)| {
                let role = roles[n];
                role.trainable().then_some((n.as_str(), t, role.decays()))
            });
            adam_step(entries, &grads, &mut self.adam, &adam_cfg)?;
        }
        let stats = EpochStats {
            epoch: self.epoch,
            loss: total_loss / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
        };
        self.history.push(MetricRow {
            epoch: self.epoch,
            split: "train".into(),
            loss: stats.loss,
            accuracy: stats.accuracy,
        });
        self.epoch += 1;
        Ok(stats)
    }

    fn update_running(&mut self, layer: &str, stats: &BatchStats<f32>, momentum: f32) -> Result<()> {
        let mean_name = format!("{layer}.running_mean");
        let var_name = format!("{layer}.running_var");
        let mut mean = self.params.get(&mean_name)?.clone();
        let mut var = self.params.get(&var_name)?.clone();
        stats.update_running(&mut mean, &mut var, momentum);
        *self.params.get_mut(&mean_name)? = mean;
        *self.params.get_mut(&var_name)? = var;
        Ok(())
    }

    pub fn evaluate(&self, data: &Dataset) -> Result<Evaluation> {
        evaluate_params(&self.params, &self.model_config, self.weights, data)
    }

    /// Trains until `train_config.epochs`, evaluating `val` after each epoch
    /// when given. `on_epoch` sees each epoch's metric rows.
    pub fn fit(
        &mut self,
        train: &Dataset,
        val: Option<&Dataset>,
        mut on_epoch: impl FnMut(&[MetricRow]),
    ) -> Result<()> {
        while self.epoch < self.train_config.epochs {
            let start = self.history.len();
            self.train_epoch(train)?;
            if let Some(val) = val.filter(|v| !v.is_empty()) {
                let ev = self.evaluate(val)?;
                self.history.push(MetricRow {
                    epoch: self.epoch - 1,
                    split: "val".into(),
                    loss: ev.loss,
                    accuracy: ev.accuracy,
                });
            }
            on_epoch(&self.history[start..]);
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model_config: self.model_config.clone(),
            train_config: self.train_config.clone(),
            params: self.params.clone(),
            adam: Some(self.adam.clone()),
            loss_weights: self.weights,
            epoch: self.epoch,
            rng: RngState {
                seed: self.train_config.seed,
                epoch: self.epoch as u64,
            },
            history: self.history.clone(),
        }
    }
}

fn evaluate_params(
    params: &ModelParams<f32>,
    config: &ModelConfig,
    weights: LossWeights,
    data: &Dataset,
) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let scores = data
        .clips
        .par_iter()
        .zip(&data.ids)
        .map(|(clip, id)| {
            predict_score(params, config, clip)
                .map(|(p, _)| p as f64)
                .map_err(|e| match e {
                    Error::Input(m) => Error::Input(format!("video `{id}`: {m}")),
                    other => other,
                })
        })
        .collect::<Result<Vec<_>>>()?;
    let predictions: Vec<Label> = scores.iter().map(|&s| predict_label(s)).collect();
    let loss = scores
        .iter()
        .zip(&data.labels)
        .map(|(&s, &y)| weighted_bce(s, y, weights))
        .sum::<f64>()
        / data.len() as f64;
    let accuracy = super::accuracy(&predictions, &data.labels);
    Ok(Evaluation {
        scores,
        predictions,
        accuracy,
        loss,
    })
}

/// Eval-mode scores and accuracy of a checkpoint on `data`.
pub fn evaluate(ck: &Checkpoint, data: &Dataset) -> Result<Evaluation> {
    evaluate_params(&ck.params, &ck.model_config, ck.loss_weights, data)
}

/// Trains on every fold but `fold` and reports on `fold` each epoch. Class
/// weights come from the training split only.
pub fn train(
    manifest: &Manifest,
    folds: &FoldPlan,
    fold: usize,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    on_epoch: impl FnMut(&[MetricRow]),
) -> Result<Checkpoint> {
    check_configs(model_config, train_config)?;
    let split = folds.split(manifest, fold)?;
    if split.train.is_empty() {
        return Err(Error::Data(format!("fold {fold} leaves no training videos")));
    }
    let load = |idx: &[usize]| {
        Dataset::load(
            manifest,
            idx,
            train_config.target_fps,
            train_config.resolution,
            model_config.in_channels,
        )
    };
    let train_set = load(&split.train)?;
    let test_set = load(&split.test)?;
    let weights = class_weights_from_counts(train_set.counts(), train_config.weighting)?;
    let mut trainer = Trainer::new(model_config.clone(), train_config.clone(), weights)?;
    trainer.fit(&train_set, Some(&test_set), on_epoch)?;
    Ok(trainer.checkpoint())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// `id,label,score,prediction` rows for an evaluation.
pub fn write_scores_csv(data: &Dataset, ev: &Evaluation, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("id,label,score,prediction\n");
    for i in 0..data.len() {
        writeln!(
            out,
            "{},{},{},{}",
            csv_field(&data.ids[i]),
            data.labels[i],
            ev.scores[i],
            ev.predictions[i]
        )
        .unwrap();
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes `id,label,score,e0,e1,...` with the post-ReLU head features of
/// every clip. Returns the row count.
pub fn export_embeddings(ck: &Checkpoint, data: &Dataset, path: impl AsRef<Path>) -> Result<usize> {
    let path = path.as_ref();
    let rows = data
        .clips
        .par_iter()
        .map(|clip| predict_score(&ck.params, &ck.model_config, clip))
        .collect::<Result<Vec<_>>>()?;
    let dim = ck.model_config.embedding_dim();
    let mut out = String::from("id,label,score");
    for j in 0..dim {
        write!(out, ",e{j}").unwrap();
    }
    out.push('\n');
    for (i, (score, emb)) in rows.iter().enumerate() {
        write!(out, "{},{},{}", csv_field(&data.ids[i]), data.labels[i], *score as f64).unwrap();
        for v in emb {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))?;
    Ok(rows.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_a_seeded_permutation() {
        let a = epoch_order(5, 0, 20);
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..20).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(5, 0, 20));
        assert_ne!(a, epoch_order(5, 1, 20));
        assert_ne!(a, epoch_order(6, 0, 20));
    }

    #[test]
    fn config_resolution_must_agree() {
        let m = ModelConfig::micro();
        let t = TrainConfig::default();
        assert!(matches!(Trainer::new(m.clone(), t, LossWeights::UNIT), Err(Error::Config(_))));
        let t = TrainConfig { resolution: m.resolution, ..TrainConfig::default() };
        assert!(Trainer::new(m, t, LossWeights::UNIT).is_ok());
    }

    #[test]
    fn csv_quoting() {
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("plain"), "plain");
    }
}
