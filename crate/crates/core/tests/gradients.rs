//! Analytic gradients of the segmentation loss against central differences,
//! in f64 on the tiny profile.

mod common;

use std::collections::BTreeMap;

use candle_core::{DType, Tensor};
use common::{random_model, randomize, rng, sample};
use rand::Rng;
use vplab_core::peft::{attach, EpeftConfig, Technique};
use vplab_core::segcore::{decode, encode_points};
use vplab_core::trainer::{segmentation_loss, LossConfig};

const EPS: f64 = 1e-3;
const REL_TOL: f64 = 1e-2;
/// Below this both derivatives are numerically zero.
const ABS_FLOOR: f64 = 1e-8;

#[test]
fn peft_gradients_match_finite_differences() {
    let model = random_model(11, DType::F64);
    let (grid, gt, points) = sample("blobs", 64, 4, &model);
    let tokens = encode_points(&points, grid.image_size(), &model.decoder.polarity_embeddings().unwrap()).unwrap();
    let cfg = EpeftConfig { m_tok: 3, m_img: 3, ..EpeftConfig::ensemble() };
    let state = attach(&cfg, &model.decoder).unwrap();
    let mut r = rng(17);
    // Fresh states have zero gradients for several arrays; move away from the init.
    randomize(&state, &mut r, 0.3);
    let loss_cfg = LossConfig::default();
    let loss = || -> Tensor {
        let ml = decode(&grid, &tokens, &model.decoder, Some(&state)).unwrap();
        segmentation_loss(&ml.logits().get(0).unwrap(), &gt, &loss_cfg).unwrap()
    };
    let value = |t: &Tensor| t.to_scalar::<f64>().unwrap();

    let grads = loss().backward().unwrap();
    let mut checked: BTreeMap<Technique, (usize, usize)> = BTreeMap::new();
    let mut failures = Vec::new();
    for (name, technique, var) in state.named_params() {
        let analytic = grads
            .get(var.as_tensor())
            .map(|g| g.flatten_all().unwrap().to_vec1::<f64>().unwrap())
            .unwrap_or_else(|| vec![0.0; var.elem_count()]);
        let original = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let n = var.elem_count().min(6);
        for _ in 0..n {
            let i = r.random_range(0..var.elem_count());
            let at = |delta: f64| {
                let mut v = original.clone();
                v[i] += delta;
                var.set(&Tensor::from_vec(v, var.dims(), var.device()).unwrap()).unwrap();
                value(&loss())
            };
            let numeric = (at(EPS) - at(-EPS)) / (2.0 * EPS);
            var.set(&Tensor::from_vec(original.clone(), var.dims(), var.device()).unwrap()).unwrap();
            let a = analytic[i];
            let ok = (a - numeric).abs() <= REL_TOL * a.abs().max(numeric.abs()) || a.abs().max(numeric.abs()) < ABS_FLOOR;
            let entry = checked.entry(technique).or_default();
            entry.0 += 1;
            if ok {
                entry.1 += 1;
            } else {
                failures.push(format!("{name}[{i}]: analytic {a:e} numeric {numeric:e}"));
            }
        }
    }
    for t in [Technique::Lora, Technique::Ia3, Technique::Prompts, Technique::Adapter, Technique::CondMlp] {
        assert!(checked.get(&t).is_some_and(|(n, _)| *n > 0), "{t:?} not sampled");
    }
    let total: usize = checked.values().map(|(n, _)| n).sum();
    let passed: usize = checked.values().map(|(_, p)| p).sum();
    assert!(passed as f64 >= 0.99 * total as f64, "{passed}/{total} passed; failures: {failures:#?}");
}
