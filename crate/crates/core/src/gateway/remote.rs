//! HTTP bridge to an externally hosted foundation model.
//!
//! The server holds the weights; this side does preprocessing and the
//! coordinate mapping so the server only ever sees square model-space
//! inputs. Endpoints (all JSON):
//!
//! - `GET  /info` → `{encoder_id, target_side, embedding_shape: [C, H, W]}`
//! - `POST /encode {image_png_b64}` → `{shape: [C, H, W], data_b64}` (f32 LE)
//! - `POST /predict {image_png_b64, prompt}` → `{proposals: [{rle, predicted_iou}]}`
//!   with prompt and masks in model coordinates
//! - `GET  /digests` → `{encoder, mask_decoder}`
//! - `POST /fine_tune {examples: [{image_png_b64, prompt, target_rle}], epochs, learning_rate}`
//!   → `{losses}`

use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::preprocess::{preprocess, ModelInput};
use super::{Embedding, FineTuneExample, FoundationModel, MaskProposal};
use crate::data::RasterImage;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::prompt::Prompt;

#[derive(Debug, Deserialize)]
struct Info {
    encoder_id: String,
    target_side: u32,
    embedding_shape: [usize; 3],
}

#[derive(Serialize)]
struct EncodeRequest {
    image_png_b64: String,
}

#[derive(Deserialize)]
struct EncodeResponse {
    shape: [usize; 3],
    data_b64: String,
}

#[derive(Serialize)]
struct PredictRequest<'a> {
    image_png_b64: String,
    prompt: &'a Prompt,
}

#[derive(Deserialize)]
struct WireProposal {
    rle: String,
    predicted_iou: f64,
}

#[derive(Deserialize)]
struct PredictResponse {
    proposals: Vec<WireProposal>,
}

#[derive(Deserialize)]
struct Digests {
    encoder: String,
    mask_decoder: String,
}

#[derive(Serialize)]
struct WireExample {
    image_png_b64: String,
    prompt: Prompt,
    target_rle: String,
}

#[derive(Serialize)]
struct FineTuneRequest {
    examples: Vec<WireExample>,
    epochs: usize,
    learning_rate: f64,
}

#[derive(Deserialize)]
struct FineTuneResponse {
    losses: Vec<f64>,
}

pub struct HttpAdapter {
    base: String,
    agent: ureq::Agent,
    info: Info,
}

impl HttpAdapter {
    /// Connects and reads `/info`; any transport failure is `AdapterUnavailable`.
    pub fn connect(url: &str) -> Result<Self> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(600)))
            .build()
            .into();
        let base = url.trim_end_matches('/').to_string();
        let info: Info = get_json(&agent, &format!("{base}/info"))?;
        Ok(Self { base, agent, info })
    }

    fn model_png(input: &ModelInput) -> String {
        B64.encode(input.to_raster().to_png_bytes())
    }
}

fn unavailable(e: impl std::fmt::Display) -> Error {
    Error::AdapterUnavailable(e.to_string())
}

fn get_json<T: DeserializeOwned>(agent: &ureq::Agent, url: &str) -> Result<T> {
    agent
        .get(url)
        .call()
        .map_err(unavailable)?
        .body_mut()
        .read_json()
        .map_err(unavailable)
}

fn post_json<B: Serialize, T: DeserializeOwned>(agent: &ureq::Agent, url: &str, body: &B) -> Result<T> {
    agent
        .post(url)
        .send_json(body)
        .map_err(unavailable)?
        .body_mut()
        .read_json()
        .map_err(unavailable)
}

impl FoundationModel for HttpAdapter {
    fn encoder_id(&self) -> &str {
        &self.info.encoder_id
    }

    fn target_side(&self) -> u32 {
        self.info.target_side
    }

    fn embedding_shape(&self) -> [usize; 3] {
        self.info.embedding_shape
    }

    fn encode_image(&mut self, image: &RasterImage) -> Result<Embedding> {
        let input = preprocess(image, self.info.target_side)?;
        let resp: EncodeResponse = post_json(
            &self.agent,
            &format!("{}/encode", self.base),
            &EncodeRequest {
                image_png_b64: Self::model_png(&input),
            },
        )?;
        if resp.shape != self.info.embedding_shape {
            return Err(Error::ShapeMismatch(format!(
                "server returned shape {:?}, advertised {:?}",
                resp.shape, self.info.embedding_shape
            )));
        }
        let bytes = B64
            .decode(resp.data_b64)
            .map_err(|e| Error::DecodeFailure(e.to_string()))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::DecodeFailure("embedding payload not f32-aligned".into()));
        }
        let values = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let [c, h, w] = resp.shape;
        Embedding::new(c, h, w, values, self.info.encoder_id.clone(), input.preproc)
    }

    fn propose(&mut self, image: &RasterImage, _embedding: &Embedding, prompt: &Prompt) -> Result<Vec<MaskProposal>> {
        let input = preprocess(image, self.info.target_side)?;
        let model_prompt = input.preproc.prompt_to_model(prompt);
        let resp: PredictResponse = post_json(
            &self.agent,
            &format!("{}/predict", self.base),
            &PredictRequest {
                image_png_b64: Self::model_png(&input),
                prompt: &model_prompt,
            },
        )?;
        resp.proposals
            .into_iter()
            .map(|p| {
                let model_mask = BinaryMask::from_rle(&p.rle)?;
                Ok(MaskProposal {
                    mask: input.preproc.mask_to_image(&model_mask),
                    predicted_iou: p.predicted_iou,
                    source_prompt: prompt.clone(),
                })
            })
            .collect()
    }

    fn encoder_digest(&self) -> Result<String> {
        get_json::<Digests>(&self.agent, &format!("{}/digests", self.base)).map(|d| d.encoder)
    }

    fn mask_decoder_digest(&self) -> Result<String> {
        get_json::<Digests>(&self.agent, &format!("{}/digests", self.base)).map(|d| d.mask_decoder)
    }

    fn fine_tune_mask_decoder(
        &mut self,
        examples: &[FineTuneExample],
        epochs: usize,
        learning_rate: f64,
    ) -> Result<Vec<f64>> {
        let side = self.info.target_side;
        let examples = examples
            .iter()
            .map(|ex| {
                let input = preprocess(&ex.image, side)?;
                Ok(WireExample {
                    image_png_b64: Self::model_png(&input),
                    prompt: input.preproc.prompt_to_model(&ex.prompt),
                    target_rle: input.preproc.mask_to_frame(&ex.target, side, side).to_rle(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let resp: FineTuneResponse = post_json(
            &self.agent,
            &format!("{}/fine_tune", self.base),
            &FineTuneRequest {
                examples,
                epochs,
                learning_rate,
            },
        )?;
        Ok(resp.losses)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unreachable_server_is_unavailable() {
        // port 9 (discard) on loopback is closed in the sandbox
        assert!(matches!(
            HttpAdapter::connect("http://127.0.0.1:9"),
            Err(Error::AdapterUnavailable(_))
        ));
    }
}
