mod common;

use candle_core::DType;
use common::{max_abs_diff, random_config, random_model, rng, sample};
use vplab_core::peft::attach;
use vplab_core::segcore::{decode, encode_points, DecoderConfig};

#[test]
fn fresh_state_leaves_decoder_output_unchanged() {
    let mut r = rng(20);
    let model = random_model(3, DType::F32);
    let (grid, _, points) = sample("blobs", 64, 1, &model);
    let tokens = encode_points(&points, grid.image_size(), &model.decoder.polarity_embeddings().unwrap()).unwrap();
    let base = decode(&grid, &tokens, &model.decoder, None).unwrap();
    for i in 0..20 {
        let cfg = random_config(&mut r, &DecoderConfig::tiny());
        let state = attach(&cfg, &model.decoder).unwrap();
        let out = decode(&grid, &tokens, &model.decoder, Some(&state)).unwrap();
        let dl = max_abs_diff(out.logits(), base.logits());
        let di = max_abs_diff(out.iou_pred(), base.iou_pred());
        assert!(dl < 1e-5 && di < 1e-5, "config {i} {cfg:?}: logits {dl}, iou {di}");
    }
}

#[test]
fn each_technique_changes_output_once_trained() {
    use vplab_core::peft::EpeftConfig;
    let mut r = rng(5);
    let model = random_model(3, DType::F32);
    let (grid, _, points) = sample("ribs", 64, 2, &model);
    let tokens = encode_points(&points, grid.image_size(), &model.decoder.polarity_embeddings().unwrap()).unwrap();
    let base = decode(&grid, &tokens, &model.decoder, None).unwrap();
    for cfg in [EpeftConfig::lora_only(), EpeftConfig::ia3_only(), EpeftConfig::prompts_only(), EpeftConfig::adapter_only()] {
        let state = attach(&cfg, &model.decoder).unwrap();
        common::randomize(&state, &mut r, 0.5);
        let out = decode(&grid, &tokens, &model.decoder, Some(&state)).unwrap();
        assert!(max_abs_diff(out.logits(), base.logits()) > 1e-3, "{cfg:?}");
    }
}
