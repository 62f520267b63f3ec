#![allow(dead_code)]

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vplab_core::image::BinaryMask;
use vplab_core::peft::{EpeftConfig, EpeftState};
use vplab_core::segcore::{DecoderConfig, DecoderWeights, FeatureGrid, PointPrompt, SegModel, TOY_PATCH};
use vplab_core::trainer::{make_synthetic_dataset, DatasetSpec};

pub const LORA_PATTERNS: [&str; 8] = [
    "*.q_proj",
    "*.k_proj",
    "*.v_proj",
    "*.out_proj",
    "blocks.*.mlp.lin1",
    "blocks.*.mlp.lin2",
    "hyper.*",
    "iou_head.lin*",
];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A valid random config for `decoder`.
pub fn random_config(rng: &mut ChaCha8Rng, decoder: &DecoderConfig) -> EpeftConfig {
    let mut flags = [rng.random_bool(0.5), rng.random_bool(0.5), rng.random_bool(0.5), rng.random_bool(0.5)];
    if !flags.iter().any(|f| *f) {
        flags[rng.random_range(0..4)] = true;
    }
    let n_targets = rng.random_range(1..=3);
    let lora_targets = LORA_PATTERNS.choose_multiple(rng, n_targets).map(|s| s.to_string()).collect();
    let ia3_blocks = if rng.random_bool(0.5) {
        None
    } else {
        let mut b: Vec<usize> = (0..=decoder.depth).filter(|_| rng.random_bool(0.6)).collect();
        if b.is_empty() {
            b.push(rng.random_range(0..=decoder.depth));
        }
        Some(b)
    };
    EpeftConfig {
        lora: flags[0],
        ia3: flags[1],
        prompts: flags[2],
        adapter: flags[3],
        lora_rank: rng.random_range(1..=8),
        lora_alpha: rng.random_range(0.5..16.0),
        lora_targets,
        ia3_blocks,
        m_tok: rng.random_range(0..=8),
        m_img: rng.random_range(0..=8),
        deep_prompts: rng.random_bool(0.3),
        adapter_bottleneck: rng.random_bool(0.5).then(|| rng.random_range(1..decoder.d)),
        seed: rng.random(),
    }
}

/// Overwrites every trainable array with `N(mean, std)` noise, keeping shapes.
pub fn randomize(state: &EpeftState, rng: &mut ChaCha8Rng, std: f64) {
    let values: BTreeMap<String, Tensor> = state
        .named_params()
        .into_iter()
        .map(|(name, _, v)| {
            let data: Vec<f64> = (0..v.elem_count()).map(|_| rng.random_range(-1.0..1.0) * std).collect();
            let t = Tensor::from_vec(data, v.dims(), &Device::Cpu).unwrap().to_dtype(v.dtype()).unwrap();
            (name, t)
        })
        .collect();
    state.load_values(&values).unwrap();
}

pub fn random_model(seed: u64, dtype: DType) -> SegModel {
    SegModel::new(TOY_PATCH, DecoderWeights::random(DecoderConfig::tiny(), seed, dtype).unwrap())
}

/// One synthetic image at `size`, its features, mask and two prompts.
pub fn sample(family: &str, size: usize, seed: u64, model: &SegModel) -> (FeatureGrid, BinaryMask, Vec<PointPrompt>) {
    let ex = make_synthetic_dataset(&DatasetSpec::new(family, 1).with_size(size), seed).unwrap().remove(0);
    let grid = model.encode(&ex.image).unwrap();
    let s = size as f32;
    (grid, ex.gt_mask, vec![PointPrompt::positive(0.4 * s, 0.5 * s), PointPrompt::negative(0.1 * s, 0.9 * s)])
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    (a.to_dtype(DType::F64).unwrap() - b.to_dtype(DType::F64).unwrap())
        .unwrap()
        .abs()
        .unwrap()
        .flatten_all()
        .unwrap()
        .max(0)
        .unwrap()
        .to_scalar::<f64>()
        .unwrap()
}
