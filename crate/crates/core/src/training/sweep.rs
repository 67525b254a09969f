use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use super::{evaluate, train, Dataset, TrainConfig};
use crate::data::{FoldPlan, Manifest};
use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Clone, Debug)]
pub struct SweepOptions {
    pub resolutions: Vec<usize>,
    pub fps_list: Vec<f64>,
    pub fold: usize,
    pub model_config: ModelConfig,
    /// Template for every cell; resolution, fps and seed are overridden.
    pub train_config: TrainConfig,
}

/// Outcome of one (resolution, fps) cell.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub resolution: usize,
    pub fps: f64,
    pub accuracy: std::result::Result<f64, String>,
}

/// Trains and evaluates every grid cell on `fold`. Cell `i` (in sorted
/// order) uses seed `train_config.seed + i`. Failures are recorded per cell.
pub fn run_sweep(manifest: &Manifest, folds: &FoldPlan, opts: &SweepOptions) -> Vec<SweepCell> {
    let mut grid: Vec<(usize, f64)> = opts
        .resolutions
        .iter()
        .flat_map(|&r| opts.fps_list.iter().map(move |&f| (r, f)))
        .collect();
    grid.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    grid.dedup();
    grid.par_iter()
        .enumerate()
        .map(|(i, &(resolution, fps))| SweepCell {
            resolution,
            fps,
            accuracy: run_cell(manifest, folds, opts, i, resolution, fps).map_err(|e| e.to_string()),
        })
        .collect()
}

fn run_cell(
    manifest: &Manifest,
    folds: &FoldPlan,
    opts: &SweepOptions,
    index: usize,
    resolution: usize,
    fps: f64,
) -> Result<f64> {
    let model = ModelConfig {
        resolution,
        ..opts.model_config.clone()
    };
    let tc = TrainConfig {
        resolution,
        target_fps: fps,
        seed: opts.train_config.seed.wrapping_add(index as u64),
        ..opts.train_config.clone()
    };
    let ck = train(manifest, folds, opts.fold, &model, &tc, |_| {})?;
    let split = folds.split(manifest, opts.fold)?;
    let test = Dataset::load(manifest, &split.test, fps, resolution, model.in_channels)?;
    Ok(evaluate(&ck, &test)?.accuracy)
}

/// `resolution,fps,accuracy`; failed cells leave the accuracy empty.
pub fn write_sweep_csv(cells: &[SweepCell], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("resolution,fps,accuracy\n");
    for c in cells {
        match &c.accuracy {
            Ok(a) => writeln!(out, "{},{},{a}", c.resolution, c.fps).unwrap(),
            Err(_) => writeln!(out, "{},{},", c.resolution, c.fps).unwrap(),
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
