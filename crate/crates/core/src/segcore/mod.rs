//! Promptable segmentation model: frozen encoder, point-prompt encoder and a
//! two-way transformer mask decoder.

mod decoder;
mod encoder;
mod mask;
mod prompt;
mod weights;

pub use decoder::decode;
pub(crate) use decoder::{sigmoid, softplus};
pub use encoder::{encode_image, registry, EncoderRegistry, FeatureGrid, ImageEncoder, ToyPatchEncoder, TOY_PATCH};
pub use mask::{binarize, resize_bilinear, MaskLogits, DEFAULT_THRESHOLD};
pub use prompt::{encode_points, grid_pe, sinusoidal_pe, Polarity, PointPrompt, PolarityEmbeddings};
pub use weights::{tiny_fixture, AttentionSpec, DecoderConfig, DecoderWeights, LinearSpec, SEGC_MAGIC};

use crate::error::Result;
use crate::image::{BinaryMask, ImageRgb};
use crate::peft::EpeftState;

/// An encoder name plus frozen decoder weights.
#[derive(Debug, Clone)]
pub struct SegModel {
    pub encoder_id: String,
    pub decoder: DecoderWeights,
}

/// One decoded mask with the slot it came from.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub mask: BinaryMask,
    pub slot: usize,
    pub iou_pred: f32,
}

impl SegModel {
    pub fn new(encoder_id: impl Into<String>, decoder: DecoderWeights) -> Self {
        Self { encoder_id: encoder_id.into(), decoder }
    }

    /// Toy encoder with the shipped tiny decoder.
    pub fn tiny_fixture() -> Result<Self> {
        Ok(Self::new(TOY_PATCH, tiny_fixture()?))
    }

    pub fn encode(&self, img: &ImageRgb) -> Result<FeatureGrid> {
        encode_image(img, &self.encoder_id)
    }

    pub fn decode_points(
        &self,
        grid: &FeatureGrid,
        points: &[PointPrompt],
        peft: Option<&EpeftState>,
    ) -> Result<MaskLogits> {
        let tokens = encode_points(points, grid.image_size(), &self.decoder.polarity_embeddings()?)?;
        decode(grid, &tokens, &self.decoder, peft)
    }

    /// Decodes and binarises the slot with the highest predicted IoU.
    pub fn predict(
        &self,
        grid: &FeatureGrid,
        points: &[PointPrompt],
        peft: Option<&EpeftState>,
        threshold: f32,
    ) -> Result<Prediction> {
        let ml = self.decode_points(grid, points, peft)?;
        let slot = ml.best_slot()?;
        let mask = binarize(&ml, slot, threshold, grid.image_size())?;
        Ok(Prediction { mask, slot, iou_pred: ml.iou_values()?[slot] })
    }
}
