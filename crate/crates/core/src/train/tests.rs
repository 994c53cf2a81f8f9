use super::*;
use crate::audio::AudioConfig;
use crate::data::{synth_dataset, SynthConfig};
use crate::decoder::DecoderConfig;
use crate::model::ModelConfig;

fn toy_data() -> Dataset {
    synth_dataset(
        &SynthConfig {
            n_sentences: 2,
            frames: 8,
            vertex_count: 12,
            feature_dim: 6,
            ..SynthConfig::default()
        },
        0,
    )
    .unwrap()
}

fn toy_model(seed: u64) -> JambaTalk {
    let cfg = ModelConfig {
        decoder: DecoderConfig {
            d_model: 16,
            vertex_count: 12,
            ..DecoderConfig::default()
        },
        audio: AudioConfig {
            feature_dim: 6,
            ..AudioConfig::default()
        },
    };
    JambaTalk::new(&cfg, seed).unwrap()
}

fn cfg(lr: f64, epochs: usize) -> TrainConfig {
    TrainConfig {
        lr,
        epochs,
        ..TrainConfig::default()
    }
}

#[test]
fn adam_matches_hand_computed_first_steps() {
    use crate::params::VarStore;
    let vs = VarStore::new(0);
    let p = vs.root().get("w", &[2], crate::params::Init::Const(1.0));
    let mut opt = Adam::new(vec![p.clone()], &cfg(0.1, 1));
    // loss = 3 w0 - w1: constant gradient, so every bias-corrected step has
    // magnitude lr (up to eps).
    for k in 1..=3 {
        let t = p.tensor();
        t.mul(&Tensor::new(vec![3.0, -1.0], &[2]).unwrap()).unwrap().sum_all().backward().unwrap();
        opt.step().unwrap();
        let w = p.to_vec();
        assert!((w[0] - (1.0 - 0.1 * k as f64)).abs() < 1e-7);
        assert!((w[1] - (1.0 + 0.1 * k as f64)).abs() < 1e-7);
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let data = toy_data();
    let m = toy_model(1);
    let before = m.store.to_map();
    train(&m, &data, &cfg(0.0, 1), 0).unwrap();
    assert_eq!(m.store.to_map(), before);
}

#[test]
fn same_seed_same_curve() {
    let data = toy_data();
    let a = train(&toy_model(2), &data, &cfg(1e-3, 2), 7).unwrap();
    let b = train(&toy_model(2), &data, &cfg(1e-3, 2), 7).unwrap();
    assert_eq!(a.curve, b.curve);
    assert_eq!(a.steps, 8);
    assert_eq!(a.epoch_seconds.len(), 2);
}

#[test]
fn training_reduces_loss() {
    let data = toy_data();
    let r = train(&toy_model(3), &data, &cfg(3e-3, 10), 0).unwrap();
    assert!(r.final_train_loss < 0.5 * r.initial_train_loss, "{} -> {}", r.initial_train_loss, r.final_train_loss);
}

#[test]
fn max_steps_and_validation_losses() {
    let mut data = toy_data();
    data.records[3].split = Split::Val;
    let c = TrainConfig {
        max_steps: 5,
        ..cfg(1e-3, 10)
    };
    let r = train(&toy_model(4), &data, &c, 0).unwrap();
    assert_eq!(r.steps, 5);
    assert_eq!(r.curve.len(), 5);
    // 3 training sequences: epoch ends at step 3, training stops at step 5.
    let with_val: Vec<usize> = r.curve.iter().filter(|p| p.val_loss.is_some()).map(|p| p.step).collect();
    assert_eq!(with_val, vec![3, 5]);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("loss.csv");
    r.write_csv(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "step,train_loss,val_loss");
    assert_eq!(lines.len(), 6);
    assert!(lines[1].ends_with(','));
    assert!(!lines[3].ends_with(','));
}

#[test]
fn divergence_aborts_with_numeric_error() {
    let data = toy_data();
    let m = toy_model(5);
    let bad = m.store.get("decoder.head.bias").unwrap();
    bad.set_data(vec![f64::NAN; bad.numel()]).unwrap();
    let err = train(&m, &data, &cfg(1e-3, 1), 0).unwrap_err();
    assert!(matches!(&err, Error::Numeric(msg) if msg.contains("step 0")), "{err}");
}

#[test]
fn config_and_data_errors() {
    let data = toy_data();
    let m = toy_model(6);
    assert!(matches!(train(&m, &data, &cfg(-1.0, 1), 0), Err(Error::Config(_))));
    assert!(matches!(train(&m, &data, &cfg(1e-3, 0), 0), Err(Error::Config(_))));
    let mut empty = toy_data();
    empty.records.iter_mut().for_each(|r| r.split = Split::Test);
    assert!(matches!(train(&m, &empty, &cfg(1e-3, 1), 0), Err(Error::Contract(_))));
}
