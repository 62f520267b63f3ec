//! Visual-prompting segmentation with ensemble parameter-efficient fine-tuning.
//!
//! The pipeline has four stages:
//!
//! 1. [`segcore`]: a frozen patch encoder and a two-way transformer mask
//!    decoder driven by point prompts.
//! 2. [`matcher`]: turns one validated reference mask into point prompts and
//!    pseudolabels on target images by cosine feature matching.
//! 3. [`peft`]: LoRA, IA3, gated memory tokens and adapters attached to the
//!    decoder, alone or together, with delta-only checkpoints.
//! 4. [`trainer`]: losses, fine-tuning, mIoU, synthetic data and the k-shot
//!    and variant-comparison experiments.
//!
//! ```
//! use vplab_core::image::ImageRgb;
//! use vplab_core::segcore::{PointPrompt, SegModel};
//!
//! let model = SegModel::tiny_fixture()?;
//! let img = ImageRgb::constant("grey", 64, 64, [0.5, 0.5, 0.5])?;
//! let grid = model.encode(&img)?;
//! let pred = model.predict(&grid, &[PointPrompt::positive(20.0, 20.0)], None, 0.0)?;
//! assert_eq!((pred.mask.height(), pred.mask.width()), (64, 64));
//! # Ok::<(), vplab_core::Error>(())
//! ```

pub mod error;
pub mod image;
pub mod matcher;
pub mod peft;
pub mod segcore;
pub mod tensorfile;
pub mod trainer;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/decoder.md")]
    mod decoder {}
    #[doc = include_str!("../../../book/src/techniques.md")]
    mod techniques {}
    #[doc = include_str!("../../../book/src/ensemble.md")]
    mod ensemble {}
    #[doc = include_str!("../../../book/src/matching.md")]
    mod matching {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
    #[doc = include_str!("../../../book/src/formats.md")]
    mod formats {}
}
