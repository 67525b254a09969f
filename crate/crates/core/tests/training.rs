//! Training loop behavior on small synthetic sets.

mod common;

use common::*;
use realsmile::data::make_folds;
use realsmile::model::{ModelConfig, ParamRole};
use realsmile::training::{
    evaluate, export_embeddings, load_checkpoint, save_checkpoint, train, write_scores_csv, Checkpoint, Dataset,
    LossWeights, Trainer, Weighting,
};

#[test]
fn accumulated_step_matches_mean_loss_step() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(dir.path(), 2, 2, 1);
    let data = load_all(&m, 24);
    let cfg = small_model();
    let tc = realsmile::training::TrainConfig { batch_videos: 4, ..small_train(1, 3) };
    let w = LossWeights { alpha: 0.7, beta: 1.3 };
    let mut trainer = Trainer::new(cfg.clone(), tc.clone(), w).unwrap();
    let init = trainer.params().clone();
    trainer.train_epoch(&data).unwrap();
    let want = mean_loss_step(&cfg, &tc, &init, &data, 0.7, 1.3);
    let roles: std::collections::BTreeMap<_, _> =
        cfg.param_specs().into_iter().map(|s| (s.name, s.role)).collect();
    let mut worst = 0.0f32;
    for (name, t) in trainer.params().iter() {
        if !roles[name].trainable() {
            continue;
        }
        for (a, b) in t.data().iter().zip(want.get(name).unwrap().data()) {
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst < 1e-5, "max parameter difference {worst}");
}

#[test]
fn unit_weighting_matches_hand_written_bce() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(dir.path(), 4, 2, 2);
    let data = load_all(&m, 24);
    let cfg = small_model();
    let tc = realsmile::training::TrainConfig { batch_videos: 3, ..small_train(1, 4) };
    let mut trainer = Trainer::new(cfg.clone(), tc.clone(), LossWeights::UNIT).unwrap();
    let hand = hand_unweighted_epoch0(&cfg, &tc, &trainer.params().clone(), &data);
    let stats = trainer.train_epoch(&data).unwrap();
    assert!((stats.loss - hand).abs() < 1e-6, "{} vs {hand}", stats.loss);
}

#[test]
fn initial_loss_is_near_chance() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(dir.path(), 4, 4, 5);
    let data = load_all(&m, 48);
    assert_eq!(data.len(), 16);
    let tc = realsmile::training::TrainConfig { epochs: 1, weighting: Weighting::Unit, ..Default::default() };
    let mut trainer = Trainer::new(ModelConfig::default(), tc, LossWeights::UNIT).unwrap();
    let loss = trainer.train_epoch(&data).unwrap().loss;
    assert!((loss - std::f64::consts::LN_2).abs() < 0.15, "epoch-0 loss {loss}");
}

#[test]
fn training_reduces_loss_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(dir.path(), 4, 4, 6);
    let data = load_all(&m, 24);
    let run = || {
        let tc = realsmile::training::TrainConfig { batch_videos: 4, ..small_train(12, 7) };
        let mut t = Trainer::new(small_model(), tc, LossWeights::UNIT).unwrap();
        t.fit(&data, Some(&data), |_| {}).unwrap();
        t
    };
    let a = run();
    let b = run();
    assert_eq!(a.history(), b.history());
    assert_eq!(a.params(), b.params());
    let train_rows: Vec<f64> = a.history().iter().filter(|r| r.split == "train").map(|r| r.loss).collect();
    assert_eq!(train_rows.len(), 12);
    let head: f64 = train_rows[..3].iter().sum();
    let tail: f64 = train_rows[9..].iter().sum();
    assert!(tail < head, "{train_rows:?}");
    // Running statistics moved away from their identity initialization.
    assert_ne!(a.params().get("fpn.block1.bn.running_var").unwrap().data(), &[1.0; 4]);
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(dir.path(), 3, 2, 8);
    let data = load_all(&m, 24);
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let mut t = Trainer::new(small_model(), small_train(2, 9), LossWeights::UNIT).unwrap();
            t.fit(&data, None, |_| {}).unwrap();
            t.checkpoint().to_bytes()
        })
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn checkpoint_round_trip_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(&dir.path().join("data"), 3, 2, 10);
    let data = load_all(&m, 24);
    let mut straight = Trainer::new(small_model(), small_train(4, 11), LossWeights::UNIT).unwrap();
    straight.fit(&data, Some(&data), |_| {}).unwrap();

    let mut first = Trainer::new(small_model(), small_train(2, 11), LossWeights::UNIT).unwrap();
    first.fit(&data, Some(&data), |_| {}).unwrap();
    let path = dir.path().join("half.ckpt");
    save_checkpoint(&first.checkpoint(), &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.to_bytes(), std::fs::read(&path).unwrap());
    assert_eq!(evaluate(&loaded, &data).unwrap(), evaluate(&first.checkpoint(), &data).unwrap());

    let mut resumed = Trainer::from_checkpoint(loaded).unwrap();
    resumed.set_epochs(4).unwrap();
    resumed.fit(&data, Some(&data), |_| {}).unwrap();
    // The stored train config differs only in its epoch count.
    assert_eq!(resumed.history(), straight.history());
    assert_eq!(resumed.params(), straight.params());
}

#[test]
fn mismatched_generator_state_is_rejected() {
    let t = Trainer::new(small_model(), small_train(1, 0), LossWeights::UNIT).unwrap();
    let mut ck = t.checkpoint();
    ck.rng.epoch = 3;
    assert!(Trainer::from_checkpoint(ck).is_err());
}

#[test]
fn fold_training_evaluation_and_exports() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth(&dir.path().join("data"), 4, 2, 12);
    let folds = make_folds(&m, 2, 0).unwrap();
    let mut rows = 0;
    let ck: Checkpoint = train(&m, &folds, 1, &small_model(), &small_train(2, 13), |r| rows += r.len()).unwrap();
    assert_eq!(rows, 4);
    assert_eq!(ck.epoch, 2);
    let split = folds.split(&m, 1).unwrap();
    let test = Dataset::load(&m, &split.test, 5.0, 24, 3).unwrap();
    let ev = evaluate(&ck, &test).unwrap();
    assert!(ev.scores.iter().all(|s| *s > 0.0 && *s < 1.0));

    let scores = dir.path().join("scores.csv");
    write_scores_csv(&test, &ev, &scores).unwrap();
    let text = std::fs::read_to_string(&scores).unwrap();
    assert_eq!(text.lines().next(), Some("id,label,score,prediction"));
    assert_eq!(text.lines().count(), test.len() + 1);

    let emb = dir.path().join("emb.csv");
    assert_eq!(export_embeddings(&ck, &test, &emb).unwrap(), test.len());
    let text = std::fs::read_to_string(&emb).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let dim = ck.model_config.embedding_dim();
    assert_eq!(header.len(), 3 + dim);
    assert_eq!(header[3], "e0");
    for (line, score) in lines.zip(&ev.scores) {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 3 + dim);
        assert_eq!(fields[2].parse::<f64>().unwrap(), *score);
        assert!(fields[3..].iter().all(|f| f.parse::<f32>().unwrap() >= 0.0));
    }
}

#[test]
fn default_embedding_width() {
    let cfg = ModelConfig::default();
    assert_eq!(cfg.embedding_dim(), 25 * cfg.head_conv_channels);
    let fc = cfg.param_specs().into_iter().find(|s| s.name == "head.fc.weight").unwrap();
    assert_eq!(fc.role, ParamRole::Weight { fan_in: 1600 });
}
