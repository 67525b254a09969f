//! `realsmile`: synthesize data, plan folds, train, evaluate and inspect the
//! smile-video classifier.
//!
//! Exit status is 0 on success, 1 for invalid flags, configuration or data,
//! and 2 for numerical or internal failures (including a failed gradient
//! check).

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use realsmile::data::{list_frames, load_clip, make_folds, synth_generate, FoldPlan, Manifest, SynthConfig, VideoSample};
use realsmile::gradcheck::{case_names, run_suite_timed, GradcheckOptions, Precision};
use realsmile::model::{predict_score, HeadKind};
use realsmile::training::{
    evaluate, export_embeddings, load_checkpoint, predict_label, run_sweep, save_checkpoint, train,
    write_metrics_csv, write_scores_csv, write_sweep_csv, Checkpoint, Dataset, SweepOptions, Weighting,
};
use realsmile::{Error, Result};

use config::{Overrides, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "realsmile", version, about = "Spontaneous vs. posed smile classification from video")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic smile-video corpus with its manifest.
    Synth(SynthArgs),
    /// Assign subjects to cross-validation folds.
    Folds(FoldsArgs),
    /// Train on every fold but one and save a checkpoint.
    Train(TrainArgs),
    /// Score a manifest split with a checkpoint.
    Eval(EvalArgs),
    /// Score one directory of frames.
    Predict(PredictArgs),
    /// Finite-difference check of every differentiable operation.
    Gradcheck(GradcheckArgs),
    /// Write per-video head embeddings to CSV.
    Export(ExportArgs),
    /// Train and evaluate over a grid of resolutions and frame rates.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory (frames/ and manifest.json are created inside).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 12)]
    subjects: usize,
    #[arg(long, default_value_t = 4)]
    videos_per_subject: usize,
    /// Source frame rate of the rendered clips.
    #[arg(long, default_value_t = 25.0)]
    fps: f64,
    /// Canvas side in pixels.
    #[arg(long, default_value_t = 96)]
    resolution: usize,
    /// 1 for grayscale, 3 for RGB.
    #[arg(long, default_value_t = 3)]
    channels: usize,
    /// Standard deviation of pixel noise on the [0, 1] scale.
    #[arg(long, default_value_t = 0.03)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct FoldsArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Number of folds.
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fold plan file to write.
    #[arg(long)]
    out: PathBuf,
}

/// Configuration file plus flag overrides; flags win over the file.
#[derive(Args, Debug, Clone, Default)]
struct ConfigArgs {
    /// JSON file with optional `model` and `train` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_videos: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Sampling rate of training clips.
    #[arg(long)]
    fps: Option<f64>,
    /// Frame side fed to the network.
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long, value_enum)]
    weighting: Option<WeightingArg>,
    #[arg(long, value_enum)]
    head: Option<HeadArg>,
    /// Drop the difference-attention block.
    #[arg(long)]
    no_tsa: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum WeightingArg {
    Auto,
    Unit,
    Proportion,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum HeadArg {
    Sigmoid,
    Softmax,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        base.apply(&Overrides {
            seed: self.seed,
            epochs: self.epochs,
            batch_videos: self.batch_videos,
            lr: self.lr,
            fps: self.fps,
            resolution: self.resolution,
            weighting: self.weighting.map(|w| match w {
                WeightingArg::Auto => Weighting::Auto,
                WeightingArg::Unit => Weighting::Unit,
                WeightingArg::Proportion => Weighting::Proportion,
            }),
            head: self.head.map(|h| match h {
                HeadArg::Sigmoid => HeadKind::Sigmoid,
                HeadArg::Softmax => HeadKind::Softmax,
            }),
            no_tsa: self.no_tsa,
        })
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    folds: PathBuf,
    /// Held-out fold.
    #[arg(long, default_value_t = 0)]
    fold: usize,
    /// Output directory for checkpoint.rsmn, metrics.csv and config.json.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

/// Which videos of a manifest to use.
#[derive(Args, Debug)]
struct SelectArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Fold plan; without it the whole manifest is used.
    #[arg(long)]
    folds: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    fold: usize,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
}

impl SelectArgs {
    fn indices(&self, manifest: &Manifest) -> Result<Vec<usize>> {
        let all: Vec<usize> = (0..manifest.len()).collect();
        let Some(path) = &self.folds else {
            return Ok(all);
        };
        let plan = FoldPlan::load(path)?;
        let split = plan.split(manifest, self.fold)?;
        Ok(match self.split {
            SplitArg::Train => split.train,
            SplitArg::Test => split.test,
            SplitArg::All => all,
        })
    }

    fn dataset(&self, ck: &Checkpoint) -> Result<Dataset> {
        let manifest = Manifest::load(&self.manifest)?;
        let idx = self.indices(&manifest)?;
        if idx.is_empty() {
            return Err(Error::Data("the selected split is empty".into()));
        }
        Dataset::load(
            &manifest,
            &idx,
            ck.train_config.target_fps,
            ck.model_config.resolution,
            ck.model_config.in_channels,
        )
    }
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    select: SelectArgs,
    /// Expected input resolution; must match the checkpoint.
    #[arg(long)]
    resolution: Option<usize>,
    /// Configuration the checkpoint is expected to match.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for scores.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of numbered PNG frames.
    #[arg(long)]
    frames: PathBuf,
    /// Frame rate the frames were captured at.
    #[arg(long)]
    source_fps: f64,
    /// Face box as x,y,width,height in pixels.
    #[arg(long, value_delimiter = ',', num_args = 4)]
    crop: Option<Vec<u32>>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = PrecisionArg::Double)]
    precision: PrecisionArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scale the named check's analytic gradient by 1.01 (harness self-test).
    #[arg(long, hide = true)]
    perturb: Option<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PrecisionArg {
    Double,
    Single,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    select: SelectArgs,
    /// Embeddings CSV to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    folds: PathBuf,
    #[arg(long, default_value_t = 0)]
    fold: usize,
    #[arg(long, value_delimiter = ',', default_value = "48,64,96,112")]
    resolutions: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1,3,5,7")]
    fps_list: Vec<f64>,
    /// Output directory for sweep.csv.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

/// Failure of a subcommand together with its exit status.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_internal() { 2 } else { 1 },
            message: e.to_string(),
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        n_subjects: a.subjects,
        videos_per_subject: a.videos_per_subject,
        resolution: a.resolution,
        channels: a.channels,
        source_fps: a.fps,
        noise_level: a.noise,
        seed: a.seed,
        ..SynthConfig::default()
    };
    cfg.validate()?;
    let m = synth_generate(&cfg, &a.out)?;
    let c = m.counts();
    println!("manifest={}", a.out.join("manifest.json").display());
    println!(
        "videos={} spontaneous={} posed={} subjects={}",
        m.len(),
        c.spontaneous,
        c.posed,
        c.subjects
    );
    Ok(())
}

fn cmd_folds(a: FoldsArgs) -> Result<()> {
    let m = Manifest::load(&a.manifest)?;
    let plan = make_folds(&m, a.k, a.seed)?;
    plan.save(&a.out)?;
    for f in 0..plan.k {
        let split = plan.split(&m, f)?;
        println!("fold={f} subjects={} videos={}", plan.fold_subjects(f).len(), split.test.len());
    }
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let run = a.config.resolve()?;
    let manifest = Manifest::load(&a.manifest)?;
    let folds = FoldPlan::load(&a.folds)?;
    if a.fold >= folds.k {
        return Err(Error::Argument(format!("fold {} out of range for {} folds", a.fold, folds.k)));
    }
    create_dir(&a.out)?;
    run.save(&a.out.join("config.json"))?;
    let ck = train(&manifest, &folds, a.fold, &run.model, &run.train, |rows| {
        for r in rows {
            eprintln!("epoch={} split={} loss={:.4} accuracy={:.4}", r.epoch, r.split, r.loss, r.accuracy);
        }
    })?;
    save_checkpoint(&ck, a.out.join("checkpoint.rsmn"))?;
    write_metrics_csv(&ck.history, a.out.join("metrics.csv"))?;
    if let Some(last) = ck.history.iter().rev().find(|r| r.split == "val") {
        println!("accuracy={:.4}", last.accuracy);
    }
    println!("checkpoint={}", a.out.join("checkpoint.rsmn").display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let mut expected = a.resolution;
    if let Some(p) = &a.config {
        expected = expected.or(Some(RunConfig::load(p)?.model.resolution));
    }
    if let Some(r) = expected.filter(|&r| r != ck.model_config.resolution) {
        return Err(Error::Config(format!(
            "requested resolution {r} but the checkpoint was trained at {}",
            ck.model_config.resolution
        )));
    }
    let data = a.select.dataset(&ck)?;
    let ev = evaluate(&ck, &data)?;
    create_dir(&a.out)?;
    write_scores_csv(&data, &ev, a.out.join("scores.csv"))?;
    println!("accuracy={:.4}", ev.accuracy);
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let crop = a
        .crop
        .map(|c| realsmile::data::CropBox::from_array([c[0], c[1], c[2], c[3]]))
        .transpose()?;
    let sample = VideoSample {
        id: "input".into(),
        subject_id: "input".into(),
        label: 0,
        frame_dir: a.frames.clone(),
        source_fps: a.source_fps,
        crop,
        frame_count: list_frames(&a.frames)?.len(),
    };
    let cfg = &ck.model_config;
    let clip = load_clip(&sample, ck.train_config.target_fps, cfg.resolution, cfg.in_channels)?;
    let (score, _) = predict_score(&ck.params, cfg, &clip)?;
    let score = score as f64;
    println!("score={score:.6} label={}", predict_label(score));
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> std::result::Result<(), Failure> {
    let opts = GradcheckOptions {
        precision: match a.precision {
            PrecisionArg::Double => Precision::Double,
            PrecisionArg::Single => Precision::Single,
        },
        perturb: a.perturb,
        seed: a.seed,
    };
    let (reports, elapsed) = run_suite_timed(&opts)?;
    debug_assert_eq!(reports.len(), case_names().len());
    let mut failed = 0;
    for r in &reports {
        let verdict = if r.passed { "PASS" } else { "FAIL" };
        println!("{:<20} max_rel_error={:.3e} {verdict}", r.name, r.max_rel_error);
        failed += usize::from(!r.passed);
    }
    println!("checks={} failed={failed} seconds={:.2}", reports.len(), elapsed.as_secs_f64());
    if failed > 0 {
        return Err(Failure {
            code: 2,
            message: format!("{failed} gradient check(s) exceeded tolerance"),
        });
    }
    Ok(())
}

fn cmd_export(a: ExportArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let data = a.select.dataset(&ck)?;
    let rows = export_embeddings(&ck, &data, &a.out)?;
    println!("rows={rows} width={}", ck.model_config.embedding_dim());
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> std::result::Result<(), Failure> {
    let run = a.config.resolve()?;
    let manifest = Manifest::load(&a.manifest)?;
    let folds = FoldPlan::load(&a.folds)?;
    if a.fold >= folds.k {
        return Err(Error::Argument(format!("fold {} out of range for {} folds", a.fold, folds.k)).into());
    }
    if a.resolutions.is_empty() || a.fps_list.is_empty() {
        return Err(Error::Argument("the sweep grid is empty".into()).into());
    }
    create_dir(&a.out)?;
    let cells = run_sweep(
        &manifest,
        &folds,
        &SweepOptions {
            resolutions: a.resolutions,
            fps_list: a.fps_list,
            fold: a.fold,
            model_config: run.model,
            train_config: run.train,
        },
    );
    write_sweep_csv(&cells, a.out.join("sweep.csv"))?;
    let mut failed = 0;
    for c in &cells {
        match &c.accuracy {
            Ok(acc) => println!("resolution={} fps={} accuracy={acc:.4}", c.resolution, c.fps),
            Err(e) => {
                failed += 1;
                eprintln!("resolution={} fps={} failed: {e}", c.resolution, c.fps);
            }
        }
    }
    if failed > 0 {
        return Err(Failure {
            code: 1,
            message: format!("{failed} of {} sweep cells failed", cells.len()),
        });
    }
    Ok(())
}

fn configure_threads() -> std::result::Result<(), Failure> {
    let Ok(value) = std::env::var("RSMN_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure {
            code: 1,
            message: format!("RSMN_THREADS must be a positive integer, got `{value}`"),
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure {
            code: 2,
            message: format!("cannot start {n} worker threads: {e}"),
        })
}

fn run(cli: Cli) -> std::result::Result<(), Failure> {
    configure_threads()?;
    match cli.command {
        Command::Synth(a) => cmd_synth(a)?,
        Command::Folds(a) => cmd_folds(a)?,
        Command::Train(a) => cmd_train(a)?,
        Command::Eval(a) => cmd_eval(a)?,
        Command::Predict(a) => cmd_predict(a)?,
        Command::Gradcheck(a) => cmd_gradcheck(a)?,
        Command::Export(a) => cmd_export(a)?,
        Command::Sweep(a) => cmd_sweep(a)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests print to stdout and succeed.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
