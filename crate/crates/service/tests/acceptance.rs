//! One PASS/FAIL line per headline requirement.
//!
//! cargo test --release -p vplab-service --test acceptance

mod common;
#[path = "../../core/tests/common/mod.rs"]
mod core_common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use candle_core::{DType, Tensor};
use common::{create_project, examples, inside_point, png, spawn, upload, wait_job, Server};
use core_common::{max_abs_diff, random_config, random_model, randomize, rng, sample};
use rand::Rng;
use serde_json::{json, Value};
use vplab_core::image::BinaryMask;
use vplab_core::matcher::{build_reference, pseudolabel_for_grid, MatchParams};
use vplab_core::peft::{
    attach, load_delta, load_delta_for, merge_lora, save_delta, unmerge_lora, EpeftConfig, ParamCounts, Technique,
};
use vplab_core::segcore::{decode, encode_points, DecoderConfig, DecoderWeights, SegModel};
use vplab_core::trainer::{
    compare_peft_variants, evaluate_miou, finetune, kshot_experiment, make_synthetic_dataset, segmentation_loss,
    DatasetSpec, ExperimentConfig, LossConfig, Variant, VariantReport, FAMILIES,
};
use vplab_service::MaskPayload;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration, what: &str) -> Result<(), String> {
    ensure(elapsed < limit, || format!("{what} took {elapsed:.1?}, limit {limit:?}"))
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn identity_at_init() -> Outcome {
    let start = Instant::now();
    let model = random_model(3, DType::F32);
    let (grid, _, points) = sample("blobs", 64, 1, &model);
    let base = model.decoder.clone();
    let tokens = encode_points(&points, grid.image_size(), &base.polarity_embeddings().map_err(err)?).map_err(err)?;
    let plain = decode(&grid, &tokens, &base, None).map_err(err)?;
    let mut r = rng(20);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let cfg = random_config(&mut r, &DecoderConfig::tiny());
        let state = attach(&cfg, &base).map_err(|e| format!("{cfg:?}: {e}"))?;
        let out = decode(&grid, &tokens, &base, Some(&state)).map_err(err)?;
        worst = worst.max(max_abs_diff(plain.logits(), out.logits())).max(max_abs_diff(plain.iou_pred(), out.iou_pred()));
    }
    ensure(worst < 1e-5, || format!("max |Δ| = {worst:e}"))?;
    within(start.elapsed(), Duration::from_secs(30), "20 configs")?;
    Ok(format!("20 configs, max |Δ| {worst:.1e}, {:.1?}", start.elapsed()))
}

fn gradient_oracle() -> Outcome {
    const EPS: f64 = 1e-3;
    const TOL: f64 = 1e-2;
    let start = Instant::now();
    let model = random_model(11, DType::F64);
    let (grid, gt, points) = sample("patches", 64, 2, &model);
    let tokens = encode_points(&points, grid.image_size(), &model.decoder.polarity_embeddings().map_err(err)?).map_err(err)?;
    let state = attach(&EpeftConfig { m_tok: 2, m_img: 2, ..EpeftConfig::ensemble() }, &model.decoder).map_err(err)?;
    let mut r = rng(7);
    randomize(&state, &mut r, 0.3);
    let loss = || {
        let ml = decode(&grid, &tokens, &model.decoder, Some(&state)).unwrap();
        segmentation_loss(&ml.logits().get(0).unwrap(), &gt, &LossConfig::default()).unwrap()
    };
    let grads = loss().backward().map_err(err)?;
    let mut groups: BTreeMap<Technique, (usize, usize)> = BTreeMap::new();
    for (_, technique, var) in state.named_params() {
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            None => vec![0.0; var.elem_count()],
        };
        let original = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for _ in 0..var.elem_count().min(4) {
            let i = r.random_range(0..var.elem_count());
            let at = |delta: f64| {
                let mut v = original.clone();
                v[i] += delta;
                var.set(&Tensor::from_vec(v, var.dims(), var.device()).unwrap()).unwrap();
                loss().to_scalar::<f64>().unwrap()
            };
            let numeric = (at(EPS) - at(-EPS)) / (2.0 * EPS);
            var.set(&Tensor::from_vec(original.clone(), var.dims(), var.device()).unwrap()).unwrap();
            let a = analytic[i];
            let scale = a.abs().max(numeric.abs());
            let e = groups.entry(technique).or_default();
            e.0 += 1;
            e.1 += usize::from((a - numeric).abs() <= TOL * scale || scale < 1e-8);
        }
    }
    for t in [Technique::Lora, Technique::Ia3, Technique::Prompts, Technique::Adapter] {
        ensure(groups.contains_key(&t), || format!("{t:?} not sampled"))?;
    }
    let (n, ok) = groups.values().fold((0, 0), |acc, (n, ok)| (acc.0 + n, acc.1 + ok));
    ensure(ok as f64 >= 0.99 * n as f64, || format!("{ok}/{n} coordinates agree: {groups:?}"))?;
    within(start.elapsed(), Duration::from_secs(120), "gradient check")?;
    Ok(format!("{ok}/{n} coordinates over {} groups, {:.1?}", groups.len(), start.elapsed()))
}

fn merge_equivalence() -> Outcome {
    let model = random_model(4, DType::F32);
    let (grid, _, points) = sample("ribs", 64, 3, &model);
    let tokens = encode_points(&points, grid.image_size(), &model.decoder.polarity_embeddings().map_err(err)?).map_err(err)?;
    let state = attach(&EpeftConfig { lora_targets: vec!["*".into()], ..EpeftConfig::ensemble() }, &model.decoder).map_err(err)?;
    randomize(&state, &mut rng(5), 0.3);
    let unmerged = decode(&grid, &tokens, &model.decoder, Some(&state)).map_err(err)?;
    let merged_w = merge_lora(&state, &model.decoder).map_err(err)?;
    let merged = decode(&grid, &tokens, &merged_w, Some(&state)).map_err(err)?;
    let diff = max_abs_diff(unmerged.logits(), merged.logits());
    ensure(diff < 1e-4, || format!("merged vs unmerged logit diff {diff:e}"))?;
    let restored = unmerge_lora(&state, &merged_w).map_err(err)?;
    let mut worst = 0.0f64;
    for (name, t) in model.decoder.iter() {
        worst = worst.max(max_abs_diff(t, restored.get(name).map_err(err)?));
    }
    ensure(worst < 1e-6, || format!("unmerge leaves {worst:e} on the base"))?;
    Ok(format!("logit diff {diff:.1e}, restore diff {worst:.1e}"))
}

fn parameter_accounting(variants: &VariantReport) -> Outcome {
    let dec = DecoderConfig::tiny();
    let base = DecoderWeights::random(dec, 0, DType::F32).map_err(err)?;
    let mut r = rng(50);
    for i in 0..50 {
        let cfg = random_config(&mut r, &dec);
        let state = attach(&cfg, &base).map_err(err)?;
        // Element by element over every trainable array.
        let mut brute: BTreeMap<Technique, usize> = BTreeMap::new();
        for (_, t, var) in state.named_params() {
            let n = var.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap().len();
            *brute.entry(t).or_default() += n;
        }
        let counted = state.count_trainable();
        let total: usize = brute.values().sum();
        ensure(counted.total == total, || format!("config {i}: counted {} vs enumerated {total}", counted.total))?;
        for (t, n) in &brute {
            ensure(counted.get(*t) == *n, || format!("config {i}: {t:?} counted {} vs {n}", counted.get(*t)))?;
        }
        let closed = ParamCounts::closed_form(&cfg, &dec).map_err(err)?;
        ensure(closed == counted, || format!("config {i}: closed form {closed:?} vs {counted:?}"))?;
    }
    let sam = ParamCounts::closed_form(&EpeftConfig::ensemble(), &DecoderConfig::sam_scale()).map_err(err)?;
    ensure((100_000..=400_000).contains(&sam.total), || format!("SAM-scale total {}", sam.total))?;
    let rendered = variants.render();
    let line = rendered.lines().find(|l| l.starts_with("SAM-scale ensemble")).unwrap_or_default();
    ensure(line.contains(&sam.total.to_string()) && line.contains("201.1K"), || format!("report line {line:?}"))?;
    Ok(format!("50 configs exact; SAM-scale E-PEFT {} beside 201.1K", sam.total))
}

fn miou_oracle() -> Outcome {
    let mut r = rng(16);
    let (mut preds, mut gts) = (Vec::new(), Vec::new());
    let mut sum = 0.0f64;
    for _ in 0..100 {
        let (pd, gd) = (r.random_range(0.0..1.0), r.random_range(0.0..1.0));
        let p: Vec<bool> = (0..256).map(|_| r.random_bool(pd)).collect();
        let g: Vec<bool> = (0..256).map(|_| r.random_bool(gd)).collect();
        let inter = p.iter().zip(&g).filter(|(a, b)| **a && **b).count();
        let union = p.iter().zip(&g).filter(|(a, b)| **a || **b).count();
        sum += if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        preds.push(BinaryMask::from_fn(16, 16, |y, x| p[y * 16 + x]));
        gts.push(BinaryMask::from_fn(16, 16, |y, x| g[y * 16 + x]));
    }
    let oracle = 100.0 * sum / 100.0;
    let got = evaluate_miou(&preds, &gts).map_err(err)?;
    ensure(got == oracle, || format!("{got} vs oracle {oracle}"))?;
    let half = evaluate_miou(&[BinaryMask::from_fn(16, 16, |_, x| x < 8)], &[BinaryMask::full(16, 16)]).map_err(err)?;
    ensure(half == 50.0, || format!("half overlap gives {half}"))?;
    Ok(format!("100 pairs exact ({got:.4}), half overlap 50.0"))
}

/// Every family's first image used as its own reference.
fn self_consistency(model: &SegModel) -> Outcome {
    let mut ious = Vec::new();
    for family in FAMILIES {
        let ex = make_synthetic_dataset(&DatasetSpec::new(family, 1), 0).map_err(err)?.remove(0);
        let grid = model.encode(&ex.image).map_err(err)?;
        let reference = build_reference(&grid, &ex.gt_mask).map_err(err)?;
        let label = pseudolabel_for_grid(model, None, &reference, &grid, &MatchParams::default()).map_err(err)?;
        ious.push((family, label.mask.iou(&ex.gt_mask).map_err(err)?));
    }
    let detail = ious.iter().map(|(f, v)| format!("{f} {v:.3}")).collect::<Vec<_>>().join(", ");
    ensure(ious.iter().all(|(_, v)| *v >= 0.9), || format!("IoU below 0.9: {detail}"))?;
    Ok(detail)
}

fn kshot(model: &SegModel, cfg: &ExperimentConfig) -> Outcome {
    let start = Instant::now();
    let report = kshot_experiment(model, &FAMILIES, &[0, 5], cfg).map_err(err)?;
    let elapsed = start.elapsed();
    println!("{}", report.render());
    let (Some(a0), Some(a5)) = (report.average_at(0), report.average_at(5)) else {
        return Err("a column has no successful cell".into());
    };
    let gain = (a5 - a0) / a0;
    ensure(a5 >= a0 && gain >= 0.2, || format!("average {a0:.2} -> {a5:.2} ({:+.1}%)", 100.0 * gain))?;
    within(elapsed, Duration::from_secs(600), "k-shot harness")?;

    let data = make_synthetic_dataset(&DatasetSpec::new("blobs", 5).with_size(cfg.image_size), 9).map_err(err)?;
    let fresh = attach(&cfg.peft, &model.decoder).map_err(err)?;
    let t = Instant::now();
    finetune(model, &fresh, &data, &cfg.train, &mut |_| {}).map_err(err)?;
    let single = t.elapsed();
    within(single, Duration::from_secs(60), "single fine-tune")?;
    Ok(format!("average {a0:.2} -> {a5:.2} ({:+.0}%), harness {elapsed:.0?}, one fine-tune {single:.1?}", 100.0 * gain))
}

fn variant_comparison(report: &VariantReport) -> Outcome {
    println!("{}", report.render());
    let params = |v| report.row(v).map(|r| r.params).unwrap_or_default();
    let miou = |v| report.row(v).and_then(|r| r.miou.miou());
    ensure(Variant::ALL.iter().all(|v| report.row(*v).is_some()), || "missing variants".into())?;
    let (ia3, prompts, adapter, lora, ens) =
        (params(Variant::Ia3), params(Variant::Prompts), params(Variant::Adapter), params(Variant::Lora), params(Variant::Ensemble));
    ensure(ia3 < prompts && prompts < adapter.min(lora) && adapter.max(lora) < ens, || {
        format!("params IA3 {ia3}, prompts {prompts}, adapter {adapter}, LoRA {lora}, E-PEFT {ens}")
    })?;
    let (Some(frozen), Some(epeft)) = (miou(Variant::Frozen), miou(Variant::Ensemble)) else {
        return Err("frozen or E-PEFT cell failed".into());
    };
    ensure(epeft >= frozen + 5.0, || format!("E-PEFT {epeft:.2} vs frozen {frozen:.2}"))?;
    Ok(format!("params {ia3} < {prompts} < {adapter}/{lora} < {ens}; mIoU frozen {frozen:.2}, E-PEFT {epeft:.2}"))
}

fn checkpoint_round_trip() -> Outcome {
    let dec = DecoderConfig::tiny();
    let base = DecoderWeights::random(dec, 1, DType::F32).map_err(err)?;
    let mut r = rng(9);
    for _ in 0..10 {
        let cfg = random_config(&mut r, &dec);
        let state = attach(&cfg, &base).map_err(err)?;
        randomize(&state, &mut r, 1.0);
        let bytes = save_delta(&state).map_err(err)?;
        let again = save_delta(&load_delta(&bytes, &dec).map_err(err)?).map_err(err)?;
        ensure(again == bytes, || "save→load→save changed the bytes".into())?;
    }
    let bytes = save_delta(&attach(&EpeftConfig::ensemble(), &base).map_err(err)?).map_err(err)?;
    let other = DecoderConfig { d_mlp: dec.d_mlp * 2, ..dec };
    ensure(load_delta(&bytes, &other).is_err(), || "delta loaded onto another decoder".into())?;
    ensure(load_delta_for(&bytes, &dec, &EpeftConfig::lora_only()).is_err(), || "delta loaded under another config".into())?;
    Ok("10 configs byte-identical; other decoder and other config rejected".into())
}

async fn submit(c: &reqwest::Client, s: &Server, id: &str, path: &str, body: Value) -> Result<String, String> {
    let res = c.post(s.url(&format!("/projects/{id}/{path}"))).json(&body).send().await.map_err(err)?;
    ensure(res.status() == 202, || format!("{path}: {}", res.status()))?;
    let v: Value = res.json().await.map_err(err)?;
    Ok(v["job_id"].as_str().unwrap_or_default().to_string())
}

async fn done(c: &reqwest::Client, s: &Server, job: &str) -> Result<Value, String> {
    let j = wait_job(c, s, job).await;
    ensure(j["state"] == "done", || format!("job {job}: {j}"))?;
    Ok(j)
}

async fn service_flow() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let c = reqwest::Client::new();
    let s = spawn(dir.path(), true).await;

    let id = create_project(&c, &s).await;
    let data = examples("blobs", 4, 31);
    let files = data.iter().enumerate().map(|(i, e)| (format!("{i}.png"), png(e))).collect();
    let up: Value = upload(&c, &s, &id, files).await.json().await.map_err(err)?;
    let images: Vec<String> = serde_json::from_value(up["image_ids"].clone()).map_err(err)?;

    let (x, y) = inside_point(&data[0].gt_mask);
    let res = c
        .put(s.url(&format!("/projects/{id}/reference")))
        .json(&json!({ "image_id": images[0], "points": [{ "x": x, "y": y, "polarity": "positive" }] }))
        .send()
        .await
        .map_err(err)?;
    ensure(res.status() == 200, || format!("reference: {}", res.status()))?;
    let res = c
        .post(s.url(&format!("/projects/{id}/reference/validate")))
        .json(&json!({ "mask_edits": MaskPayload::from_mask(&data[0].gt_mask) }))
        .send()
        .await
        .map_err(err)?;
    ensure(res.status() == 200, || format!("validate: {}", res.status()))?;

    done(&c, &s, &submit(&c, &s, &id, "match", json!({})).await?).await?;
    let res = c
        .put(s.url(&format!("/projects/{id}/labels/{}", images[1])))
        .json(&json!({ "mask": MaskPayload::from_mask(&data[1].gt_mask), "status": "refined" }))
        .send()
        .await
        .map_err(err)?;
    ensure(res.status() == 200, || format!("label: {}", res.status()))?;
    done(&c, &s, &submit(&c, &s, &id, "finetune", json!({ "train_config": { "epochs": 4 } })).await?).await?;
    let rematch = done(&c, &s, &submit(&c, &s, &id, "match", json!({})).await?).await?;
    ensure(rematch["result"]["checkpoint_id"] == "ckpt0001", || format!("re-match result {}", rematch["result"]))?;

    let res = c.get(s.url(&format!("/projects/{id}/export"))).send().await.map_err(err)?;
    ensure(res.status() == 200, || format!("export: {}", res.status()))?;
    let bytes = res.bytes().await.map_err(err)?;
    load_delta(&bytes, &DecoderConfig::tiny()).map_err(err)?;
    let jobs: Value = c.get(s.url(&format!("/projects/{id}/jobs"))).send().await.map_err(err)?.json().await.map_err(err)?;
    let states: Vec<String> = jobs["jobs"].as_array().into_iter().flatten().map(|j| j["state"].to_string()).collect();
    ensure(states.len() == 3 && states.iter().all(|st| st == "\"done\""), || format!("job states {states:?}"))?;
    s.shutdown();

    // Accepted while no worker runs, executed after the next start.
    let s = spawn(dir.path(), false).await;
    let queued = submit(&c, &s, &id, "match", json!({})).await?;
    s.shutdown();
    let s = spawn(dir.path(), true).await;
    done(&c, &s, &queued).await?;
    s.shutdown();
    Ok(format!("{} images, 3 jobs done, export {} bytes, queued job ran after restart", images.len(), bytes.len()))
}

fn run(name: &'static str, results: &mut Vec<(&'static str, Outcome, Duration)>, f: impl FnOnce() -> Outcome) {
    let start = Instant::now();
    let out = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let elapsed = start.elapsed();
    match &out {
        Ok(detail) => println!("PASS {name}: {detail}"),
        Err(detail) => println!("FAIL {name}: {detail}"),
    }
    results.push((name, out, elapsed));
}

fn main() {
    let model = SegModel::tiny_fixture().expect("fixture decoder");
    let exp = ExperimentConfig::default();
    let mut results = Vec::new();

    run("identity-at-init", &mut results, identity_at_init);
    run("gradient-oracle", &mut results, gradient_oracle);
    run("lora-merge-equivalence", &mut results, merge_equivalence);
    run("miou-oracle", &mut results, miou_oracle);
    run("checkpoint-round-trip", &mut results, checkpoint_round_trip);
    run("matcher-self-consistency", &mut results, || self_consistency(&model));
    run("kshot-improvement", &mut results, || kshot(&model, &exp));

    // One comparison run serves both the accounting and the ordering checks.
    let variants = catch_unwind(AssertUnwindSafe(|| compare_peft_variants(&model, &FAMILIES, 5, &exp)))
        .map_err(|_| "variant comparison panicked".to_string())
        .and_then(|r| r.map_err(err));
    run("parameter-accounting", &mut results, || parameter_accounting(variants.as_ref().map_err(Clone::clone)?));
    run("variant-comparison", &mut results, || variant_comparison(variants.as_ref().map_err(Clone::clone)?));
    run("service-integration", &mut results, || {
        let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build().map_err(err)?;
        rt.block_on(service_flow())
    });

    println!();
    for (name, out, elapsed) in &results {
        println!("{} {name} ({elapsed:.1?})", if out.is_ok() { "PASS" } else { "FAIL" });
    }
    let failed = results.iter().filter(|(_, o, _)| o.is_err()).count();
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
