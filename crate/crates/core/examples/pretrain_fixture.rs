//! Regenerates `fixtures/base_tiny.segc` by pretraining the tiny decoder on the
//! `shapes` family, then reports self-matching IoU per family.
//!
//! cargo run --release -p vplab-core --example pretrain_fixture -- [n] [epochs] [lr] [out]
//! cargo run --release -p vplab-core --example pretrain_fixture -- --eval FILE
//!
//! Set `VPLAB_INIT=FILE` to continue from existing weights instead of a random init.

use std::time::Instant;

use candle_core::DType;
use vplab_core::matcher::{build_reference, pseudolabel_for_grid, MatchParams};
use vplab_core::segcore::{DecoderConfig, DecoderWeights, SegModel, TOY_PATCH};
use vplab_core::trainer::{make_synthetic_dataset, pretrain_decoder, sample_training_prompts, DatasetSpec, TrainConfig, FAMILIES, PRETRAIN_FAMILY};

fn main() -> vplab_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    if args.get(1).map(String::as_str) == Some("--eval") {
        let bytes = std::fs::read(args.get(2).expect("--eval needs a file"))?;
        return report(SegModel::new(TOY_PATCH, DecoderWeights::from_segc_bytes(&bytes)?));
    }
    let n: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(8);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(2e-3);
    let out = args.get(4).cloned().unwrap_or_else(|| "crates/core/fixtures/base_tiny.segc".into());

    let mut weights = match std::env::var("VPLAB_INIT") {
        Ok(init) => DecoderWeights::from_segc_bytes(&std::fs::read(init)?)?,
        Err(_) => DecoderWeights::random(DecoderConfig::tiny(), 1, DType::F32)?,
    };
    let data = make_synthetic_dataset(&DatasetSpec::new(PRETRAIN_FAMILY, n), 1234)?;
    let start = Instant::now();
    // Step decay: 60% of the epochs at `lr`, then `lr / 3`, then `lr / 10`.
    let first = (epochs * 3).div_ceil(5);
    let second = (epochs - first).div_ceil(2);
    let phases = [(first, lr), (second, lr / 3.0), (epochs - first - second, lr / 10.0)];
    for (phase, (phase_epochs, phase_lr)) in phases.into_iter().enumerate() {
        if phase_epochs == 0 {
            continue;
        }
        let cfg = TrainConfig { epochs: phase_epochs, lr: phase_lr, batch_size: 8, seed: 1 + phase as u64, ..TrainConfig::default() };
        let model = SegModel::new(TOY_PATCH, weights);
        (weights, _) = pretrain_decoder(&model, &data, &cfg, &mut |e| {
            eprintln!("lr {phase_lr:.0e} epoch {}/{} loss {:.4} ({:.0?})", e.epoch, e.epochs, e.loss, start.elapsed())
        })?;
    }
    std::fs::write(&out, weights.to_segc_bytes()?)?;
    eprintln!("wrote {out}");

    report(SegModel::new(TOY_PATCH, weights))
}

fn report(model: SegModel) -> vplab_core::Result<()> {
    for fam in FAMILIES.iter().chain([&PRETRAIN_FAMILY]) {
        let exs = make_synthetic_dataset(&DatasetSpec::new(*fam, 8), 99)?;
        let mut ious = Vec::new();
        let mut oracle = Vec::new();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(5);
        for ex in &exs {
            let grid = model.encode(&ex.image)?;
            let reference = build_reference(&grid, &ex.gt_mask)?;
            let label = pseudolabel_for_grid(&model, None, &reference, &grid, &MatchParams::default())?;
            ious.push(label.mask.iou(&ex.gt_mask)?);
            let pts = sample_training_prompts(&ex.gt_mask, 8, &mut rng);
            oracle.push(model.predict(&grid, &pts, None, 0.0)?.mask.iou(&ex.gt_mask)?);
        }
        let fmt = |v: &[f64]| v.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>().join(" ");
        eprintln!("{fam:<8} self-match IoU {}   gt-prompted {}", fmt(&ious), fmt(&oracle));
    }
    Ok(())
}
