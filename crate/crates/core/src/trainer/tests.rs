use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::synth_data::{generate_dataset, DatasetConfig};

fn tiny_setup(per_class: usize) -> (Vec<TrainPair>, ModelParams) {
    let data = generate_dataset(&DatasetConfig {
        dims: vec![16, 16],
        per_class,
        ..DatasetConfig::default()
    })
    .unwrap();
    let pairs = data
        .train()
        .map(|p| TrainPair {
            moving: p.moving.clone(),
            fixed: p.fixed.clone(),
        })
        .collect();
    let cfg = ModelConfig {
        dims: vec![16, 16],
        encoder_widths: [4, 4, 4, 2],
        decoder_widths: [4, 4, 4, 4],
        latent_dim: 4,
        ..ModelConfig::default()
    };
    let params = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    (pairs, params)
}

#[test]
fn seeded_runs_are_identical() {
    let (pairs, params) = tiny_setup(2);
    let cfg = TrainConfig {
        epochs: 2,
        seed: 3,
        ..TrainConfig::default()
    };
    let a = train(&pairs, params.clone(), &cfg, None).unwrap();
    let b = train(&pairs, params.clone(), &cfg, None).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.log, b.log);
    assert_eq!(a.log.len(), 2 * pairs.len());
    assert_ne!(a.params, params);

    let other = train(&pairs, params, &TrainConfig { seed: 4, ..cfg }, None).unwrap();
    assert_ne!(a.log, other.log);
}

#[test]
fn batches_average_gradients() {
    let (pairs, params) = tiny_setup(2);
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 3,
        ..TrainConfig::default()
    };
    let out = train(&pairs, params, &cfg, None).unwrap();
    assert_eq!(out.steps_per_epoch, 2);
    assert_eq!(out.log.len(), 2);
}

#[test]
fn writes_log_and_checkpoints() {
    let (pairs, params) = tiny_setup(1);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        checkpoint_every: 4,
        ..TrainConfig::default()
    };
    let out = train(&pairs, params, &cfg, Some(dir.path())).unwrap();
    let names: Vec<String> = out
        .checkpoints
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, ["ckpt_4.bin", "ckpt_6.bin"]);
    let log = std::fs::read_to_string(dir.path().join(LOSS_LOG)).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], LOSS_LOG_HEADER);
    assert_eq!(lines.len(), 7);
    assert_eq!(lines[1].split(',').count(), 4);
    assert_eq!(lines[1], out.log[0].to_line());
    let restored = load_checkpoint(&out.checkpoints[1]).unwrap();
    assert_eq!(restored, out.params);
}

#[test]
fn non_finite_loss_aborts_with_snapshot() {
    let (pairs, mut params) = tiny_setup(1);
    let i = params.names().iter().position(|n| n == "encoder.logvar.bias").unwrap();
    params.tensors_mut()[i].data_mut().fill(1e4);
    let dir = tempfile::tempdir().unwrap();
    let err = train(&pairs, params, &TrainConfig::default(), Some(dir.path())).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)));
    assert!(dir.path().join("abort.txt").exists());
    assert!(dir.path().join("abort_step1.bin").exists());
}

#[test]
fn rejects_bad_config_and_empty_data() {
    let (pairs, params) = tiny_setup(1);
    let bad = TrainConfig {
        batch_size: 0,
        ..TrainConfig::default()
    };
    assert!(train(&pairs, params.clone(), &bad, None).is_err());
    assert!(train(&[], params, &TrainConfig::default(), None).is_err());
    assert!(serde_json::from_str::<TrainConfig>(r#"{"epoch": 3}"#).is_err());
}
