//! K-shot and PEFT-variant experiments over the synthetic families.
//!
//! Both harnesses run the full visual-prompting pipeline: the first training
//! image's ground truth serves as the validated reference, every other image
//! is matched against it, and fine-tuning uses ground truth in place of the
//! human-refined pseudolabels.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::finetune::{finetune, LabeledExample, Origin, TrainConfig};
use super::metrics::evaluate_miou;
use super::synthetic::{make_synthetic_dataset, DatasetSpec, DEFAULT_IMAGE_SIZE};
use crate::error::{Error, Result};
use crate::image::BinaryMask;
use crate::matcher::{build_reference, pseudolabel_for_grid, MatchParams, ReferenceSet};
use crate::peft::{attach, EpeftConfig, EpeftState, ParamCounts};
use crate::segcore::{DecoderConfig, FeatureGrid, SegModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub image_size: usize,
    /// Smallest held-out split per family; the split grows to match the largest shot count.
    pub min_test: usize,
    pub seed: u64,
    pub train: TrainConfig,
    pub peft: EpeftConfig,
    pub matching: MatchParams,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            image_size: DEFAULT_IMAGE_SIZE,
            min_test: 10,
            seed: 0,
            train: TrainConfig::default(),
            peft: EpeftConfig::ensemble(),
            matching: MatchParams::default(),
        }
    }
}

/// One family's data with a validated reference and a 50/50 train/test split.
struct FamilySplit {
    reference: ReferenceSet,
    train: Vec<(LabeledExample, FeatureGrid)>,
    test: Vec<(FeatureGrid, BinaryMask)>,
}

fn prepare_family(model: &SegModel, family: &str, max_shots: usize, cfg: &ExperimentConfig) -> Result<FamilySplit> {
    let half = max_shots.max(cfg.min_test).max(1);
    let spec = DatasetSpec::new(family, 2 * half).with_size(cfg.image_size);
    let mut data = make_synthetic_dataset(&spec, cfg.seed)?;
    data.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5151));
    let test_part = data.split_off(half);
    let grids: Vec<FeatureGrid> = data.par_iter().map(|ex| model.encode(&ex.image)).collect::<Result<_>>()?;
    let reference = build_reference(&grids[0], &data[0].gt_mask)?;
    let train = data
        .into_iter()
        .zip(grids)
        .map(|(mut ex, grid)| {
            // The pseudolabel's prompts come with the refined mask.
            let label = pseudolabel_for_grid(model, None, &reference, &grid, &cfg.matching)?;
            ex.prompts = (!label.prompts.is_empty()).then_some(label.prompts);
            ex.origin = Origin::RefinedPseudolabel;
            Ok((ex, grid))
        })
        .collect::<Result<_>>()?;
    let test = test_part
        .into_par_iter()
        .map(|ex| Ok((model.encode(&ex.image)?, ex.gt_mask)))
        .collect::<Result<_>>()?;
    Ok(FamilySplit { reference, train, test })
}

fn pipeline_miou(model: &SegModel, peft: Option<&EpeftState>, split: &FamilySplit, params: &MatchParams) -> Result<f64> {
    let preds: Vec<BinaryMask> = split
        .test
        .par_iter()
        .map(|(grid, _)| Ok(pseudolabel_for_grid(model, peft, &split.reference, grid, params)?.mask))
        .collect::<Result<_>>()?;
    let gts: Vec<BinaryMask> = split.test.iter().map(|(_, m)| m.clone()).collect();
    evaluate_miou(&preds, &gts)
}

fn tune(model: &SegModel, peft: &EpeftConfig, split: &FamilySplit, k: usize, train: &TrainConfig) -> Result<EpeftState> {
    if k > split.train.len() {
        return Err(Error::InvalidConfig(format!("{k} shots requested, {} training images", split.train.len())));
    }
    let state = attach(peft, &model.decoder)?;
    let data: Vec<LabeledExample> = split.train[..k].iter().map(|(ex, _)| ex.clone()).collect();
    let (trained, _) = finetune(model, &state, &data, train, &mut |_| {})?;
    Ok(trained)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum Cell {
    Ok { miou: f64 },
    Failed { error: String },
}

impl Cell {
    pub fn miou(&self) -> Option<f64> {
        match self {
            Cell::Ok { miou } => Some(*miou),
            Cell::Failed { .. } => None,
        }
    }

    fn from_result(r: Result<f64>) -> Self {
        match r {
            Ok(miou) => Cell::Ok { miou },
            Err(e) => Cell::Failed { error: e.to_string() },
        }
    }

    fn display(&self) -> String {
        self.miou().map_or_else(|| "failed".into(), |v| format!("{v:.2}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KShotRow {
    pub family: String,
    pub cells: Vec<Cell>,
}

/// Published k-shot results on the four real datasets, for side-by-side display.
pub const PAPER_KSHOT: [(&str, [f64; 4]); 5] = [
    ("Kvasir-Inst.", [40.28, 63.44, 63.33, 65.92]),
    ("PaxRay", [36.39, 48.61, 51.19, 50.97]),
    ("DeepCrack", [11.96, 19.27, 21.64, 23.71]),
    ("Corrosion CS", [4.06, 7.26, 8.14, 7.98]),
    ("Average", [23.17, 34.64, 36.07, 37.15]),
];
pub const PAPER_KSHOT_SHOTS: [usize; 4] = [0, 5, 10, 40];

/// mIoU in percent per family and shot count, plus the column averages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KShotReport {
    pub shots: Vec<usize>,
    pub rows: Vec<KShotRow>,
    /// Mean over the families whose cell succeeded; `None` when none did.
    pub average: Vec<Option<f64>>,
}

impl KShotReport {
    fn new(shots: Vec<usize>, rows: Vec<KShotRow>) -> Self {
        let average = (0..shots.len())
            .map(|j| {
                let vals: Vec<f64> = rows.iter().filter_map(|r| r.cells[j].miou()).collect();
                (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
            })
            .collect();
        Self { shots, rows, average }
    }

    pub fn average_at(&self, shots: usize) -> Option<f64> {
        self.shots.iter().position(|s| *s == shots).and_then(|j| self.average[j])
    }

    fn header(&self) -> Vec<String> {
        std::iter::once("dataset".to_string()).chain(self.shots.iter().map(|s| format!("{s}-shot"))).collect()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let to_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record(self.header()).map_err(to_err)?;
        for r in &self.rows {
            w.write_record(std::iter::once(r.family.clone()).chain(r.cells.iter().map(Cell::display)))
                .map_err(to_err)?;
        }
        let avg = self.average.iter().map(|a| a.map_or_else(|| "failed".into(), |v| format!("{v:.2}")));
        w.write_record(std::iter::once("Average".to_string()).chain(avg)).map_err(to_err)?;
        let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Plain-text table followed by the published reference values.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let header = self.header();
        let _ = write!(out, "{:<14}", header[0]);
        for h in &header[1..] {
            let _ = write!(out, "{h:>10}");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{:<14}", r.family);
            for c in &r.cells {
                let _ = write!(out, "{:>10}", c.display());
            }
            out.push('\n');
        }
        let _ = write!(out, "{:<14}", "Average");
        for a in &self.average {
            let _ = write!(out, "{:>10}", a.map_or_else(|| "failed".into(), |v| format!("{v:.2}")));
        }
        let _ = writeln!(out, "\n\nreference (real datasets, published):");
        let _ = write!(out, "{:<14}", "dataset");
        for s in PAPER_KSHOT_SHOTS {
            let _ = write!(out, "{:>10}", format!("{s}-shot"));
        }
        out.push('\n');
        for (name, vals) in PAPER_KSHOT {
            let _ = write!(out, "{name:<14}");
            for v in vals {
                let _ = write!(out, "{v:>10.2}");
            }
            out.push('\n');
        }
        out
    }
}

/// Runs the pipeline on every family at 0 shots, then fine-tunes a fresh
/// ensemble for each positive shot count and re-runs it on the held-out half.
/// A failing cell is recorded as failed instead of aborting the run.
pub fn kshot_experiment(
    model: &SegModel,
    families: &[&str],
    shots: &[usize],
    cfg: &ExperimentConfig,
) -> Result<KShotReport> {
    if shots.first() != Some(&0) || shots.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidConfig("shots must be strictly ascending and start at 0".into()));
    }
    let max_shots = *shots.last().expect("non-empty");
    let mut rows = Vec::new();
    for family in families {
        let split = prepare_family(model, family, max_shots, cfg)?;
        let cells = shots
            .iter()
            .map(|&k| {
                Cell::from_result(if k == 0 {
                    pipeline_miou(model, None, &split, &cfg.matching)
                } else {
                    tune(model, &cfg.peft, &split, k, &cfg.train)
                        .and_then(|state| pipeline_miou(model, Some(&state), &split, &cfg.matching))
                })
            })
            .collect();
        rows.push(KShotRow { family: family.to_string(), cells });
    }
    Ok(KShotReport::new(shots.to_vec(), rows))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Frozen,
    Adapter,
    Ia3,
    Prompts,
    Lora,
    Ensemble,
}

impl Variant {
    pub const ALL: [Variant; 6] =
        [Variant::Frozen, Variant::Adapter, Variant::Ia3, Variant::Prompts, Variant::Lora, Variant::Ensemble];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Frozen => "frozen",
            Variant::Adapter => "adapter",
            Variant::Ia3 => "ia3",
            Variant::Prompts => "prompts",
            Variant::Lora => "lora",
            Variant::Ensemble => "e-peft",
        }
    }

    /// The technique switches of this variant over `base`; `None` for the frozen model.
    pub fn config(self, base: &EpeftConfig) -> Option<EpeftConfig> {
        let only = |lora, ia3, prompts, adapter| EpeftConfig { lora, ia3, prompts, adapter, ..base.clone() };
        match self {
            Variant::Frozen => None,
            Variant::Adapter => Some(only(false, false, false, true)),
            Variant::Ia3 => Some(only(false, true, false, false)),
            Variant::Prompts => Some(only(false, false, true, false)),
            Variant::Lora => Some(only(true, false, false, false)),
            Variant::Ensemble => Some(only(true, true, true, true)),
        }
    }

    /// Published row for the corresponding model: (name, params, Kvasir-Seg mIoU).
    pub fn paper_reference(self) -> (&'static str, &'static str, f64) {
        match self {
            Variant::Frozen => ("SAM", "0", 72.88),
            Variant::Adapter => ("Adapter", "33.1K", 84.60),
            Variant::Ia3 => ("IA3", "5.6K", 85.63),
            Variant::Prompts => ("D-VPT", "12.8K", 86.65),
            Variant::Lora => ("LORA", "144.4K", 87.93),
            Variant::Ensemble => ("E-PEFT", "201.1K", 88.97),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantRow {
    pub variant: Variant,
    /// Trainable parameters on the decoder actually trained.
    pub params: usize,
    /// Closed-form trainable parameters on the SAM-scale decoder.
    pub params_sam_scale: usize,
    pub miou: Cell,
    pub per_family: Vec<(String, Cell)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub shots: usize,
    pub families: Vec<String>,
    pub rows: Vec<VariantRow>,
    /// Per-technique breakdown of the SAM-scale ensemble.
    pub sam_scale_ensemble: ParamCounts,
}

impl VariantReport {
    pub fn row(&self, v: Variant) -> Option<&VariantRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let to_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record(["variant", "params", "params_sam_scale", "miou", "paper_model", "paper_params", "paper_miou"])
            .map_err(to_err)?;
        for r in &self.rows {
            let (name, params, miou) = r.variant.paper_reference();
            w.write_record([
                r.variant.label().to_string(),
                r.params.to_string(),
                r.params_sam_scale.to_string(),
                r.miou.display(),
                name.to_string(),
                params.to_string(),
                format!("{miou:.2}"),
            ])
            .map_err(to_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn render(&self) -> String {
        let mut out = format!("{}-shot fine-tuning on {}\n\n", self.shots, self.families.join(", "));
        let _ = writeln!(
            out,
            "{:<10}{:>10}{:>12}{:>10}   | {:<8}{:>9}{:>12}",
            "variant", "params", "sam-scale", "mIoU", "paper", "params", "Kvasir-Seg"
        );
        for r in &self.rows {
            let (name, params, miou) = r.variant.paper_reference();
            let _ = writeln!(
                out,
                "{:<10}{:>10}{:>12}{:>10}   | {:<8}{:>9}{:>12.2}",
                r.variant.label(),
                r.params,
                r.params_sam_scale,
                r.miou.display(),
                name,
                params,
                miou
            );
        }
        let c = &self.sam_scale_ensemble;
        let _ = writeln!(
            out,
            "\nSAM-scale ensemble: {} trainable (published: 201.1K) = lora {} + ia3 {} + prompts {} + adapter {} + cond mlp {}",
            c.total, c.lora, c.ia3, c.prompts, c.adapter, c.cond_mlp
        );
        out
    }
}

/// Trains every variant with identical data, schedule and seed and evaluates
/// the matcher pipeline on the held-out halves of `families`.
pub fn compare_peft_variants(
    model: &SegModel,
    families: &[&str],
    shots: usize,
    cfg: &ExperimentConfig,
) -> Result<VariantReport> {
    if shots == 0 {
        return Err(Error::InvalidConfig("variant comparison needs at least one training shot".into()));
    }
    let splits: Vec<FamilySplit> = families.iter().map(|f| prepare_family(model, f, shots, cfg)).collect::<Result<_>>()?;
    let sam = DecoderConfig::sam_scale();
    let mut rows = Vec::new();
    for v in Variant::ALL {
        let peft = v.config(&cfg.peft);
        let (params, params_sam_scale) = match &peft {
            None => (0, 0),
            Some(p) => (attach(p, &model.decoder)?.count_trainable().total, ParamCounts::closed_form(p, &sam)?.total),
        };
        let per_family: Vec<(String, Cell)> = families
            .iter()
            .zip(&splits)
            .map(|(f, split)| {
                let r = match &peft {
                    None => pipeline_miou(model, None, split, &cfg.matching),
                    Some(p) => tune(model, p, split, shots, &cfg.train)
                        .and_then(|s| pipeline_miou(model, Some(&s), split, &cfg.matching)),
                };
                (f.to_string(), Cell::from_result(r))
            })
            .collect();
        let vals: Vec<f64> = per_family.iter().filter_map(|(_, c)| c.miou()).collect();
        let miou = if vals.len() == per_family.len() && !vals.is_empty() {
            Cell::Ok { miou: vals.iter().sum::<f64>() / vals.len() as f64 }
        } else {
            Cell::Failed { error: "at least one family failed".into() }
        };
        rows.push(VariantRow { variant: v, params, params_sam_scale, miou, per_family });
    }
    let sam_scale_ensemble = ParamCounts::closed_form(&Variant::Ensemble.config(&cfg.peft).expect("ensemble is trainable"), &sam)?;
    Ok(VariantReport { shots, families: families.iter().map(|f| f.to_string()).collect(), rows, sam_scale_ensemble })
}
