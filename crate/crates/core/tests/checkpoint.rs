mod common;

use candle_core::DType;
use common::{random_config, random_model, randomize, rng};
use vplab_core::peft::{attach, load_delta, load_delta_for, save_delta, EpeftConfig};
use vplab_core::segcore::DecoderConfig;
use vplab_core::Error;

#[test]
fn save_load_save_is_byte_identical() {
    let model = random_model(1, DType::F32);
    let mut r = rng(3);
    for _ in 0..10 {
        let cfg = random_config(&mut r, &DecoderConfig::tiny());
        let state = attach(&cfg, &model.decoder).unwrap();
        randomize(&state, &mut r, 1.0);
        let bytes = save_delta(&state).unwrap();
        let back = load_delta(&bytes, &DecoderConfig::tiny()).unwrap();
        assert_eq!(save_delta(&back).unwrap(), bytes);
        assert_eq!(back.config(), &cfg);
    }
}

#[test]
fn checkpoint_holds_only_deltas() {
    let model = random_model(1, DType::F32);
    let state = attach(&EpeftConfig::ensemble(), &model.decoder).unwrap();
    let bytes = save_delta(&state).unwrap();
    let floats = state.count_trainable().total;
    assert!(bytes.len() < floats * 4 + 64 * 1024);
    assert!(bytes.len() < model.decoder.param_count() * 4);
}

#[test]
fn cross_config_loads_are_rejected() {
    let model = random_model(1, DType::F32);
    let state = attach(&EpeftConfig::lora_only(), &model.decoder).unwrap();
    let bytes = save_delta(&state).unwrap();

    let other_decoder = DecoderConfig { d_mlp: 256, ..DecoderConfig::tiny() };
    assert!(matches!(load_delta(&bytes, &other_decoder), Err(Error::ConfigMismatch(_))));
    assert!(matches!(
        load_delta_for(&bytes, &DecoderConfig::tiny(), &EpeftConfig::ensemble()),
        Err(Error::ConfigMismatch(_))
    ));
    assert!(load_delta_for(&bytes, &DecoderConfig::tiny(), &EpeftConfig::lora_only()).is_ok());
}

#[test]
fn corrupt_bytes_are_rejected() {
    let model = random_model(1, DType::F32);
    let bytes = save_delta(&attach(&EpeftConfig::ensemble(), &model.decoder).unwrap()).unwrap();
    let tiny = DecoderConfig::tiny();
    assert!(matches!(load_delta(&bytes[..bytes.len() - 4], &tiny), Err(Error::CorruptCheckpoint(_))));
    assert!(matches!(load_delta(b"nope", &tiny), Err(Error::CorruptCheckpoint(_))));
    let mut wrong_magic = bytes.clone();
    wrong_magic[0] = b'X';
    assert!(matches!(load_delta(&wrong_magic, &tiny), Err(Error::CorruptCheckpoint(_))));
    // Tampering with the stored config breaks the fingerprint.
    let text = String::from_utf8_lossy(&bytes).replace("\"lora_rank\": 4", "\"lora_rank\": 5");
    let tampered = text.into_bytes();
    if tampered.len() == bytes.len() {
        assert!(load_delta(&tampered, &tiny).is_err());
    }
}
