//! Training loop, checkpoint persistence and exact resumption.

mod common;

use std::fs;
use std::path::Path;

use maskdiff::checkpoint::{Checkpoint, RawCheckpoint, MAGIC};
use maskdiff::data::make_toy_dataset;
use maskdiff::train::{
    checkpoint_path, load_training_set, read_loss_log, run_training, TrainConfig, Trainer,
    LATEST_CHECKPOINT, LOSS_LOG,
};
use tempfile::tempdir;

use common::{small_config_lines, write_config};

fn config(data: &Path, out: &Path, iterations: u64) -> TrainConfig {
    let path = write_config(
        out.parent().unwrap(),
        "train.cfg",
        &small_config_lines(data, out, iterations),
    );
    TrainConfig::from_file(&path).unwrap()
}

fn toy(dir: &Path) -> std::path::PathBuf {
    let data = dir.join("data");
    make_toy_dataset(12, 16, 4, &data).unwrap();
    data
}

#[test]
fn resuming_from_step_k_equals_uninterrupted_step_k_plus_one() {
    let dir = tempdir().unwrap();
    let data = toy(dir.path());
    let cfg = config(&data, &dir.path().join("out"), 10);
    let samples = load_training_set(&cfg).unwrap();

    let mut straight = Trainer::new(cfg.clone(), samples.clone()).unwrap();
    for _ in 0..4 {
        straight.train_step().unwrap();
    }
    let saved = dir.path().join("k.mdck");
    straight.checkpoint().save(&saved).unwrap();
    let loss_straight = straight.train_step().unwrap();

    let mut resumed = Trainer::resume(cfg, samples, Checkpoint::load(&saved).unwrap()).unwrap();
    assert_eq!(resumed.step(), 4);
    let loss_resumed = resumed.train_step().unwrap();
    assert_eq!(loss_resumed.to_bits(), loss_straight.to_bits());
    assert_eq!(resumed.params(), straight.params());
    assert_eq!(resumed.checkpoint(), straight.checkpoint());
}

#[test]
fn interrupted_run_reproduces_log_and_checkpoints() {
    let dir = tempdir().unwrap();
    let data = toy(dir.path());
    let full_out = dir.path().join("full");
    let full = config(&data, &full_out, 10);
    run_training(&full, None, &mut Vec::new()).unwrap();

    let split_out = dir.path().join("split");
    let first = config(&data, &split_out, 5);
    run_training(&first, None, &mut Vec::new()).unwrap();
    let second = config(&data, &split_out, 10);
    let summary = run_training(
        &second,
        Some(&checkpoint_path(&split_out, 5)),
        &mut Vec::new(),
    )
    .unwrap();
    assert_eq!((summary.first_step, summary.last_step), (6, 10));

    assert_eq!(
        fs::read(full_out.join(LOSS_LOG)).unwrap(),
        fs::read(split_out.join(LOSS_LOG)).unwrap()
    );
    for f in [
        checkpoint_path(&full_out, 10),
        full_out.join(LATEST_CHECKPOINT),
    ] {
        let rel = f.strip_prefix(&full_out).unwrap();
        assert_eq!(
            fs::read(&f).unwrap(),
            fs::read(split_out.join(rel)).unwrap(),
            "{}",
            rel.display()
        );
    }
}

#[test]
fn training_is_bitwise_repeatable() {
    let dir = tempdir().unwrap();
    let data = toy(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_training(&config(&data, &a, 6), None, &mut Vec::new()).unwrap();
    run_training(&config(&data, &b, 6), None, &mut Vec::new()).unwrap();
    assert_eq!(
        fs::read(a.join(LOSS_LOG)).unwrap(),
        fs::read(b.join(LOSS_LOG)).unwrap()
    );
    assert_eq!(
        fs::read(a.join(LATEST_CHECKPOINT)).unwrap(),
        fs::read(b.join(LATEST_CHECKPOINT)).unwrap()
    );
    let log = read_loss_log(&a.join(LOSS_LOG)).unwrap();
    assert_eq!(
        log.iter().map(|r| r.0).collect::<Vec<_>>(),
        (1..=6).collect::<Vec<_>>()
    );
}

#[test]
fn loss_falls_over_two_hundred_steps() {
    let dir = tempdir().unwrap();
    let data = toy(dir.path());
    let cfg = TrainConfig {
        checkpoint_every: 200,
        ..config(&data, &dir.path().join("out"), 200)
    };
    let summary = run_training(&cfg, None, &mut Vec::new()).unwrap();
    let mean = |s: &[f32]| s.iter().sum::<f32>() / s.len() as f32;
    let (head, tail) = (mean(&summary.losses[..20]), mean(&summary.losses[180..]));
    assert!(tail < 0.8 * head, "loss {head} -> {tail}");
}

#[test]
fn checkpoints_round_trip_and_reject_corruption() {
    let dir = tempdir().unwrap();
    let data = toy(dir.path());
    let cfg = config(&data, &dir.path().join("out"), 3);
    let mut t = Trainer::new(cfg.clone(), load_training_set(&cfg).unwrap()).unwrap();
    t.train_step().unwrap();
    let ckpt = t.checkpoint();
    let path = dir.path().join("c.mdck");
    ckpt.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap(), ckpt);

    let bytes = fs::read(&path).unwrap();
    assert_eq!(&bytes[..4], MAGIC);
    let raw = RawCheckpoint::from_bytes(&bytes).unwrap();
    assert_eq!(raw.to_bytes().unwrap(), bytes);

    assert!(
        RawCheckpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err(),
        "truncated"
    );
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(RawCheckpoint::from_bytes(&bad).is_err(), "bad magic");
    assert!(Checkpoint::load(&dir.path().join("missing.mdck")).is_err());

    // resuming needs matching architecture
    let other = TrainConfig {
        base_channels: 16,
        ..cfg.clone()
    };
    assert!(Trainer::resume(other, load_training_set(&cfg).unwrap(), ckpt).is_err());
}

#[test]
fn config_parsing_rejects_bad_input_before_training() {
    let base = Path::new("/tmp");
    assert!(
        TrainConfig::parse("timesteps = 0\ndata_root = d\noutput_dir = o\n", base)
            .and_then(|c| c.validate())
            .is_err()
    );
    assert!(TrainConfig::parse("no_such_key = 1\n", base).is_err());
    assert!(TrainConfig::parse("seed = 1\nseed = 2\n", base).is_err());
    assert!(TrainConfig::parse("loss = l2\n", base).is_err());
    assert!(TrainConfig::parse("batch_size = many\n", base).is_err());
    let cfg = TrainConfig::parse(
        "# comment\ndata_root = d\noutput_dir = o  # trailing\nloss = l1\n",
        base,
    )
    .unwrap();
    assert_eq!(cfg.data_root, base.join("d"));
    assert_eq!(cfg.output_dir, base.join("o"));
    assert_eq!(cfg.timesteps, 250);
    assert_eq!(cfg.learning_rate, 1e-4);
}
