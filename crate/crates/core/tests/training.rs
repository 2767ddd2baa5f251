mod common;

use common::*;
use ooc_core::checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointError};
use ooc_core::model::{batch_loss, forward, loss_and_backward, ModelConfig, ModelParams};
use ooc_core::tensor::Mode;
use ooc_core::training::{
    cyclic_lr, train, train_with_progress, EarlyStopping, Optimizer, OptimizerKind, StopSignal,
    TrainConfig, TrainError, SINGLE_DEVICE_RESCALE,
};
use ooc_core::Sample;

fn tiny_config() -> ModelConfig {
    let mut c = ModelConfig::new(8, 8, 6);
    c.n_heads = 2;
    c.hidden_mm = 5;
    c
}

fn quick_train_config() -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        lr_init: 1e-3,
        lr_max: 5e-3,
        max_epochs: 4,
        seed: 3,
        ..TrainConfig::default()
    }
}

fn same_bits(a: &ModelParams, b: &ModelParams) -> bool {
    a.tensors().iter().zip(b.tensors()).all(|(x, y)| {
        x.value.data().iter().map(|v| v.to_bits()).eq(y.value.data().iter().map(|v| v.to_bits()))
    }) && a.head_stats == b.head_stats
}

#[test]
fn cyclic_lr_hits_recipe_values() {
    let c = TrainConfig::default();
    assert_eq!(cyclic_lr(0, 10, &c), 9e-5);
    assert_eq!(cyclic_lr(40, 10, &c), 5e-4);
    assert_eq!(cyclic_lr(80, 10, &c), 9e-5);
    let r = TrainConfig {
        lr_rescale: SINGLE_DEVICE_RESCALE,
        ..c
    };
    assert!((cyclic_lr(0, 10, &r) - 9e-5 / 3f64.sqrt()).abs() < 1e-18);
    assert!((cyclic_lr(0, 10, &r) - 5.196e-5).abs() < 1e-8);
}

#[test]
fn cyclic_lr_is_periodic_triangular() {
    let c = TrainConfig::default();
    for spe in [1, 3, 7] {
        let half = c.cycle_epochs * spe;
        let lo = c.lr_init;
        let hi = c.lr_max;
        let slope = (hi - lo) / half as f64;
        for step in 0..6 * half {
            let lr = cyclic_lr(step, spe, &c);
            assert_eq!(lr, cyclic_lr(step + 2 * half, spe, &c));
            assert!(lr >= lo && lr <= hi);
            let pos = step % (2 * half);
            let expected = if pos <= half {
                lo + slope * pos as f64
            } else {
                hi - slope * (pos - half) as f64
            };
            assert!((lr - expected).abs() < 1e-15);
        }
    }
}

#[test]
fn patience_stops_five_epochs_after_the_last_improvement() {
    for k in 1..8 {
        let mut s = EarlyStopping::new(5);
        let mut stopped = None;
        for epoch in 1..=40 {
            // decreasing until k, strictly increasing afterwards
            let loss = if epoch <= k { 1.0 / epoch as f64 } else { 1.0 / k as f64 + epoch as f64 };
            if s.update(epoch, loss) == StopSignal::Stop {
                stopped = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped, Some(k + 5));
        assert_eq!(s.best_epoch(), k);
    }
}

#[test]
fn training_is_deterministic() {
    let data = small_dataset(80, 8, 6, 1);
    let val = small_dataset(30, 8, 6, 2);
    let (p1, h1) = train(&data, &val, &tiny_config(), &quick_train_config()).unwrap();
    let (p2, h2) = train(&data, &val, &tiny_config(), &quick_train_config()).unwrap();
    assert_eq!(h1, h2);
    assert!(same_bits(&p1, &p2));
    assert_eq!(h1.epochs.len(), 4);
}

#[test]
fn returned_parameters_come_from_the_best_epoch() {
    let data = small_dataset(80, 8, 6, 4);
    let val = small_dataset(30, 8, 6, 5);
    let config = TrainConfig {
        max_epochs: 12,
        patience: 2,
        lr_init: 2e-2,
        lr_max: 5e-2,
        ..quick_train_config()
    };
    let (params, history) = train(&data, &val, &tiny_config(), &config).unwrap();
    let best = history
        .epochs
        .iter()
        .min_by(|a, b| a.val_loss.total_cmp(&b.val_loss))
        .unwrap();
    assert_eq!(history.best_epoch, best.epoch);
    assert!(history.best_epoch <= history.stopped_epoch);
    let refs: Vec<&Sample> = val.iter().collect();
    let loss = batch_loss(&refs, &params, &tiny_config(), Mode::Eval, 0).unwrap();
    assert_eq!(loss.to_bits(), best.val_loss.to_bits());
}

#[test]
fn progress_callback_sees_every_epoch() {
    let data = small_dataset(40, 8, 6, 6);
    let val = small_dataset(10, 8, 6, 7);
    let mut seen = Vec::new();
    let (_, h) = train_with_progress(&data, &val, &tiny_config(), &quick_train_config(), |r| {
        seen.push(r.epoch)
    })
    .unwrap();
    assert_eq!(seen, h.epochs.iter().map(|e| e.epoch).collect::<Vec<_>>());
}

#[test]
fn train_rejects_degenerate_inputs() {
    let data = small_dataset(10, 8, 6, 1);
    assert!(matches!(
        train(&[], &data, &tiny_config(), &quick_train_config()),
        Err(TrainError::EmptySplit("train"))
    ));
    assert!(matches!(
        train(&data, &[], &tiny_config(), &quick_train_config()),
        Err(TrainError::EmptySplit("validation"))
    ));
    assert!(matches!(
        train(&data[..1], &data, &tiny_config(), &quick_train_config()),
        Err(TrainError::BatchOfOne(1))
    ));
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let config = tiny_config();
    let data = small_dataset(12, 8, 6, 8);
    let refs: Vec<&Sample> = data.iter().collect();
    for kind in [OptimizerKind::default(), OptimizerKind::Sgd] {
        let mut params = ModelParams::init(&config, 1).unwrap();
        params.zero_grad();
        loss_and_backward(&refs, &mut params, &config, Mode::Eval, 0).unwrap();
        let before = params.clone();
        let mut opt = Optimizer::new(kind, &params);
        opt.step(&mut params, 0.0);
        assert!(same_bits(&before, &params));
    }
}

#[test]
fn small_gradient_step_decreases_the_loss() {
    let config = tiny_config();
    for seed in 0..10 {
        let data = small_dataset(16, 8, 6, 100 + seed);
        let refs: Vec<&Sample> = data.iter().collect();
        let mut params = ModelParams::init(&config, seed).unwrap();
        params.zero_grad();
        let (before, _) = loss_and_backward(&refs, &mut params, &config, Mode::Eval, 0).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::Sgd, &params);
        opt.step(&mut params, 1e-3);
        let after = batch_loss(&refs, &params, &config, Mode::Eval, 0).unwrap();
        assert!(after < before, "seed {seed}: {after} >= {before}");
    }
}

#[test]
fn checkpoint_round_trip_gives_bit_identical_forward() {
    let config = tiny_config();
    let data = small_dataset(40, 8, 6, 9);
    let val = small_dataset(10, 8, 6, 10);
    let (params, _) = train(&data, &val, &config, &quick_train_config()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&params, &config, &path).unwrap();
    let (loaded, loaded_config) = load_checkpoint(&path).unwrap();
    assert_eq!(loaded_config, config);
    assert!(same_bits(&params, &loaded));
    for s in &val {
        let a = forward(s, &params, &config, Mode::Eval).unwrap();
        let b = forward(s, &loaded, &loaded_config, Mode::Eval).unwrap();
        assert_eq!(a.prediction.p_class.to_bits(), b.prediction.p_class.to_bits());
        assert_eq!(a, b);
    }
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let config = tiny_config().with_blocks(false, true);
    let params = ModelParams::init(&config, 2).unwrap();
    let bytes = encode_checkpoint(&params, &config).unwrap();

    let truncated = &bytes[..bytes.len() - 1];
    assert!(matches!(decode_checkpoint(truncated), Err(CheckpointError::Checksum(_))));

    let mut bumped = bytes.clone();
    bumped[4..8].copy_from_slice(&7u32.to_le_bytes());
    assert!(matches!(
        decode_checkpoint(&bumped),
        Err(CheckpointError::Version { found: 7, expected: 1 })
    ));

    let mut flipped = bytes.clone();
    let idx = bytes.len() - 9;
    flipped[idx] ^= 1;
    assert!(matches!(decode_checkpoint(&flipped), Err(CheckpointError::Checksum(_))));

    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_checkpoint(dir.path().join("absent")), Err(CheckpointError::Io { .. })));
    let (p2, c2) = decode_checkpoint(&bytes).unwrap();
    assert_eq!(c2, config);
    assert!(p2.label_block.is_none() && p2.page_block.is_some());
}
