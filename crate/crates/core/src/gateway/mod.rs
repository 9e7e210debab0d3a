//! Narrow adapter around a promptable foundation segmentation model.
//!
//! The pipeline only ever touches the model through [`FoundationModel`]:
//! an image encoder producing an [`Embedding`], a prompt-conditioned mask
//! decoder returning three [`MaskProposal`]s, digests of both parameter sets,
//! and a fine-tuning hook for the mask decoder. [`toy::ToyFoundationModel`]
//! implements it without weights; [`remote::HttpAdapter`] forwards to an
//! external model server.

pub mod cache;
pub mod preprocess;
pub mod remote;
pub mod toy;

use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::data::{Manifest, RasterImage};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::prompt::Prompt;

pub use cache::EmbeddingCache;
pub use preprocess::{preprocess, ModelInput, PreprocParams};

/// Number of proposals a prompt yields (whole object, part, subpart).
pub const PROPOSALS_PER_PROMPT: usize = 3;

/// Frozen-encoder output, `channels x height x width` in C-row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
    pub encoder_id: String,
    pub preproc: PreprocParams,
}

impl Embedding {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        values: Vec<f32>,
        encoder_id: impl Into<String>,
        preproc: PreprocParams,
    ) -> Result<Self> {
        if values.len() != channels * height * width {
            return Err(Error::ShapeError(format!(
                "{} values for embedding shape {channels}x{height}x{width}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::ShapeError(format!("non-finite embedding value at {i}")));
        }
        Ok(Self {
            channels,
            height,
            width,
            values,
            encoder_id: encoder_id.into(),
            preproc,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.values[(c * self.height + y) * self.width + x]
    }

    /// Channels-last copy (`height x width x channels`).
    pub fn to_hwc(&self) -> Vec<f32> {
        let mut out = vec![0f32; self.values.len()];
        let plane = self.height * self.width;
        for c in 0..self.channels {
            for i in 0..plane {
                out[i * self.channels + c] = self.values[c * plane + i];
            }
        }
        out
    }

    pub fn payload_bytes(&self) -> Vec<u8> {
        self.values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskProposal {
    /// In original image coordinates.
    pub mask: BinaryMask,
    pub predicted_iou: f64,
    pub source_prompt: Prompt,
}

/// One supervised example for mask-decoder fine-tuning.
#[derive(Clone, Debug)]
pub struct FineTuneExample {
    pub image: RasterImage,
    pub embedding: Embedding,
    pub prompt: Prompt,
    pub target: BinaryMask,
}

pub trait FoundationModel: Send {
    fn encoder_id(&self) -> &str;

    /// Side of the square model input.
    fn target_side(&self) -> u32;

    fn embedding_shape(&self) -> [usize; 3];

    fn encode_image(&mut self, image: &RasterImage) -> Result<Embedding>;

    /// Raw proposals for an already validated prompt; see [`predict_masks`]
    /// for the checked entry point.
    fn propose(
        &mut self,
        image: &RasterImage,
        embedding: &Embedding,
        prompt: &Prompt,
    ) -> Result<Vec<MaskProposal>>;

    /// Digest over every image-encoder parameter.
    fn encoder_digest(&self) -> Result<String>;

    /// Digest over every mask-decoder parameter.
    fn mask_decoder_digest(&self) -> Result<String>;

    /// Trains the mask decoder only; returns mean loss per epoch.
    fn fine_tune_mask_decoder(
        &mut self,
        examples: &[FineTuneExample],
        epochs: usize,
        learning_rate: f64,
    ) -> Result<Vec<f64>>;
}

/// Which foundation model backs the pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[derive(Default)]
pub enum AdapterConfig {
    /// No model configured: every model call fails with `AdapterUnavailable`.
    #[default]
    None,
    Toy(toy::ToyConfig),
    Http { url: String },
}


pub fn open_adapter(config: &AdapterConfig) -> Result<Box<dyn FoundationModel>> {
    match config {
        AdapterConfig::None => Err(Error::AdapterUnavailable(
            "no foundation model weights configured and toy encoder not selected".into(),
        )),
        AdapterConfig::Toy(cfg) => Ok(Box::new(toy::ToyFoundationModel::new(cfg.clone())?)),
        AdapterConfig::Http { url } => Ok(Box::new(remote::HttpAdapter::connect(url)?)),
    }
}

/// Checked prediction: validates the prompt against the image bounds and the
/// adapter's output against the proposal contract.
pub fn predict_masks(
    model: &mut dyn FoundationModel,
    image: &RasterImage,
    embedding: &Embedding,
    prompt: &Prompt,
) -> Result<Vec<MaskProposal>> {
    prompt.validate(image.width, image.height)?;
    let proposals = model.propose(image, embedding, prompt)?;
    if proposals.len() != PROPOSALS_PER_PROMPT {
        return Err(Error::ShapeMismatch(format!(
            "adapter returned {} proposals, expected {PROPOSALS_PER_PROMPT}",
            proposals.len()
        )));
    }
    for p in &proposals {
        if p.mask.dims() != (image.width, image.height) {
            return Err(Error::ShapeMismatch(format!(
                "proposal mask {}x{} for a {}x{} image",
                p.mask.width(),
                p.mask.height(),
                image.width,
                image.height
            )));
        }
        if !(0.0..=1.0).contains(&p.predicted_iou) {
            return Err(Error::ShapeMismatch(format!(
                "predicted IoU {} outside [0, 1]",
                p.predicted_iou
            )));
        }
    }
    Ok(proposals)
}

/// Anything that can hand out frozen-encoder embeddings by sample id.
pub trait EmbeddingSource: Sync {
    fn embedding(&self, sample_id: &str) -> Result<Embedding>;
    fn encoder_digest(&self) -> Result<String>;
}

/// Get-or-compute embeddings for manifest samples through a shared adapter,
/// backed by an optional on-disk cache.
pub struct EmbeddingStore {
    manifest: Arc<Manifest>,
    model: Arc<Mutex<Box<dyn FoundationModel>>>,
    cache: Option<EmbeddingCache>,
}

impl EmbeddingStore {
    pub fn new(
        manifest: Arc<Manifest>,
        model: Arc<Mutex<Box<dyn FoundationModel>>>,
        cache: Option<EmbeddingCache>,
    ) -> Self {
        Self {
            manifest,
            model,
            cache,
        }
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn model(&self) -> &Arc<Mutex<Box<dyn FoundationModel>>> {
        &self.model
    }

    pub fn cache(&self) -> Option<&EmbeddingCache> {
        self.cache.as_ref()
    }

    /// Encodes an image with the shared adapter, bypassing cache and manifest.
    pub fn encode(&self, image: &RasterImage) -> Result<Embedding> {
        lock(&self.model).encode_image(image)
    }
}

pub(crate) fn lock<T: ?Sized>(m: &Mutex<T>) -> std::sync::MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

impl EmbeddingSource for EmbeddingStore {
    fn embedding(&self, sample_id: &str) -> Result<Embedding> {
        let sample = self
            .manifest
            .get(sample_id)
            .ok_or_else(|| Error::MissingEmbedding(sample_id.to_string()))?;
        let encoder_id = lock(&self.model).encoder_id().to_string();
        if let Some(cache) = &self.cache {
            if let Some(e) = cache.get(sample_id, &encoder_id)? {
                return Ok(e);
            }
        }
        let image = self.manifest.load_image(sample)?;
        let e = lock(&self.model).encode_image(&image)?;
        if let Some(cache) = &self.cache {
            cache.put(sample_id, &e)?;
        }
        Ok(e)
    }

    fn encoder_digest(&self) -> Result<String> {
        lock(&self.model).encoder_digest()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unconfigured_adapter_is_unavailable() {
        assert!(matches!(
            open_adapter(&AdapterConfig::None),
            Err(Error::AdapterUnavailable(_))
        ));
    }

    #[test]
    fn hwc_transpose() {
        let p = PreprocParams::new(2, 2, 2).unwrap();
        let e = Embedding::new(2, 1, 2, vec![1.0, 2.0, 3.0, 4.0], "t", p).unwrap();
        assert_eq!(e.to_hwc(), vec![1.0, 3.0, 2.0, 4.0]);
        assert_eq!(e.at(1, 0, 1), 4.0);
    }

    #[test]
    fn non_finite_embedding_rejected() {
        let p = PreprocParams::new(1, 1, 1).unwrap();
        assert!(Embedding::new(1, 1, 1, vec![f32::NAN], "t", p).is_err());
    }
}
