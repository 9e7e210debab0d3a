//! Lightweight domain decoder: three stride-2 transposed convolutions with
//! ReLU between them, a 1x1 head, bilinear resize to the target size and a
//! sigmoid.
//!
//! Parameters are stored as `f32`; forward and backward passes compute in
//! `f64`.

pub mod layers;

use std::io::Write;
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::digest::f32_digest;
use crate::error::{Error, Result};
use crate::gateway::Embedding;
use crate::mask::BinaryMask;
use layers::{AxisResample, Tensor, TAPS};

/// Probability clamp inside the loss.
pub const BCE_EPSILON: f64 = 1e-7;
/// Keeps sigmoid outputs strictly inside `(0, 1)`.
const PROB_FLOOR: f64 = 1e-12;
pub const STAGES: usize = 3;
pub const UPSAMPLE_FACTOR: usize = 1 << STAGES;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub in_channels: usize,
    pub channel_schedule: Vec<usize>,
    #[serde(default = "default_out_channels")]
    pub out_channels: usize,
    pub target_width: u32,
    pub target_height: u32,
    #[serde(default)]
    pub init_seed: u64,
    #[serde(default)]
    pub activation: Activation,
}

fn default_out_channels() -> usize {
    1
}

impl DecoderConfig {
    pub fn new(in_channels: usize, channel_schedule: Vec<usize>, target_width: u32, target_height: u32, init_seed: u64) -> Self {
        Self {
            in_channels,
            channel_schedule,
            out_channels: 1,
            target_width,
            target_height,
            init_seed,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_schedule.len() != STAGES {
            return Err(Error::InvalidConfig(format!(
                "channel schedule needs exactly {STAGES} stages, got {}",
                self.channel_schedule.len()
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.channel_schedule.contains(&0) {
            return Err(Error::InvalidConfig("channel counts must be at least 1".into()));
        }
        if self.target_width == 0 || self.target_height == 0 {
            return Err(Error::InvalidConfig("target size must be non-zero".into()));
        }
        Ok(())
    }

    pub fn layout(&self) -> Result<ParamLayout> {
        self.validate()?;
        let mut offset = 0;
        let mut take = |n: usize| {
            let r = offset..offset + n;
            offset += n;
            r
        };
        let mut stages = Vec::with_capacity(STAGES);
        let mut c_in = self.in_channels;
        for &c_out in &self.channel_schedule {
            let weight = take(TAPS * c_in * c_out);
            let bias = take(c_out);
            stages.push(StageLayout { c_in, c_out, weight, bias });
            c_in = c_out;
        }
        let head_weight = take(self.out_channels * c_in);
        let head_bias = take(self.out_channels);
        Ok(ParamLayout {
            stages,
            head_weight,
            head_bias,
            total: offset,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageLayout {
    pub c_in: usize,
    pub c_out: usize,
    pub weight: Range<usize>,
    pub bias: Range<usize>,
}

/// Offsets of each parameter group in the flat, stage-ordered vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    pub stages: Vec<StageLayout>,
    pub head_weight: Range<usize>,
    pub head_bias: Range<usize>,
    pub total: usize,
}

impl ParamLayout {
    /// Named parameter groups in storage order.
    pub fn groups(&self) -> Vec<(String, Range<usize>)> {
        let mut out = Vec::new();
        for (i, s) in self.stages.iter().enumerate() {
            out.push((format!("deconv{}.weight", i + 1), s.weight.clone()));
            out.push((format!("deconv{}.bias", i + 1), s.bias.clone()));
        }
        out.push(("head.weight".into(), self.head_weight.clone()));
        out.push(("head.bias".into(), self.head_bias.clone()));
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    config: DecoderConfig,
    layout: ParamLayout,
    values: Vec<f32>,
}

/// Fan-in scaled uniform initialisation with zero biases, deterministic in
/// `config.init_seed`. Deconvolution fan-in counts the 2x2 taps that reach
/// each output pixel.
pub fn init_decoder(config: &DecoderConfig) -> Result<DecoderParams> {
    let layout = config.layout()?;
    let mut values = vec![0f32; layout.total];
    let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
    for s in &layout.stages {
        let bound = (6.0 / (s.c_in * 4) as f64).sqrt();
        for v in &mut values[s.weight.clone()] {
            *v = rng.random_range(-bound..bound) as f32;
        }
    }
    let c_last = layout.stages[STAGES - 1].c_out;
    let bound = 1.0 / (c_last as f64).sqrt();
    for v in &mut values[layout.head_weight.clone()] {
        *v = rng.random_range(-bound..bound) as f32;
    }
    Ok(DecoderParams {
        config: config.clone(),
        layout,
        values,
    })
}

impl DecoderParams {
    pub fn zeros(config: &DecoderConfig) -> Result<Self> {
        let layout = config.layout()?;
        Ok(Self {
            config: config.clone(),
            values: vec![0.0; layout.total],
            layout,
        })
    }

    pub fn from_values(config: &DecoderConfig, values: Vec<f32>) -> Result<Self> {
        let layout = config.layout()?;
        if values.len() != layout.total {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters for a decoder needing {}",
                values.len(),
                layout.total
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("non-finite decoder parameter".into()));
        }
        Ok(Self {
            config: config.clone(),
            layout,
            values,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn param_digest(&self) -> String {
        f32_digest(&self.values)
    }

    pub fn values_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }

    pub fn forward(&self, embedding: &Embedding) -> Result<ProbMask> {
        decoder_forward(self, embedding)
    }

    /// Mean BCE against `target` and its gradient w.r.t. every parameter.
    pub fn loss_and_grad(&self, embedding: &Embedding, target: &BinaryMask) -> Result<(f64, Vec<f64>)> {
        loss_and_grad(&self.config, &self.values_f64(), embedding, target)
    }

    pub fn save_checkpoint(&self, path: &Path, epoch: usize) -> Result<()> {
        save_checkpoint(self, epoch, path)
    }
}

/// Per-pixel foreground probabilities, each strictly inside `(0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMask {
    width: u32,
    height: u32,
    values: Vec<f64>,
}

impl ProbMask {
    pub fn new(width: u32, height: u32, values: Vec<f64>) -> Result<Self> {
        if values.len() != width as usize * height as usize {
            return Err(Error::ShapeMismatch(format!(
                "{} probabilities for {width}x{height}",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
            return Err(Error::InvalidArgument(format!("probability {v} outside (0, 1)")));
        }
        Ok(Self { width, height, values })
    }

    pub fn filled(width: u32, height: u32, value: f64) -> Result<Self> {
        Self::new(width, height, vec![value; width as usize * height as usize])
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, x: u32, y: u32) -> f64 {
        self.values[y as usize * self.width as usize + x as usize]
    }
}

/// Foreground iff probability `>= tau`.
pub fn binarize(pred: &ProbMask, tau: f64) -> BinaryMask {
    BinaryMask::from_vec(
        pred.width,
        pred.height,
        pred.values.iter().map(|&p| p >= tau).collect(),
    )
    .expect("probability map dims are consistent")
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON)
}

/// Mean per-pixel binary cross-entropy with probabilities clamped to
/// `[BCE_EPSILON, 1 - BCE_EPSILON]`.
pub fn bce_loss(pred: &ProbMask, target: &BinaryMask) -> Result<f64> {
    if (pred.width, pred.height) != target.dims() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {}x{} vs target {}x{}",
            pred.width,
            pred.height,
            target.width(),
            target.height()
        )));
    }
    let sum: f64 = pred
        .values
        .iter()
        .zip(target.data())
        .map(|(&p, &y)| bce_term(p, y))
        .sum();
    Ok(sum / pred.values.len() as f64)
}

#[inline]
fn bce_term(p: f64, y: bool) -> f64 {
    let p = clamp_prob(p);
    if y {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

fn sigmoid(z: f64) -> f64 {
    let s = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    s.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

struct Trace {
    /// Stage inputs: the embedding, then each post-ReLU activation.
    acts: Vec<Tensor>,
    probs: Tensor,
}

fn check_embedding(config: &DecoderConfig, embedding: &Embedding) -> Result<()> {
    if embedding.channels != config.in_channels {
        return Err(Error::ShapeMismatch(format!(
            "embedding has {} channels, decoder expects {}",
            embedding.channels, config.in_channels
        )));
    }
    if embedding.height == 0 || embedding.width == 0 {
        return Err(Error::ShapeMismatch("empty embedding".into()));
    }
    Ok(())
}

fn resamplers(config: &DecoderConfig, embedding: &Embedding) -> (AxisResample, AxisResample) {
    (
        AxisResample::new(embedding.height * UPSAMPLE_FACTOR, config.target_height as usize),
        AxisResample::new(embedding.width * UPSAMPLE_FACTOR, config.target_width as usize),
    )
}

fn run_forward(config: &DecoderConfig, layout: &ParamLayout, params: &[f64], embedding: &Embedding) -> Result<Trace> {
    check_embedding(config, embedding)?;
    let mut acts = Vec::with_capacity(STAGES + 1);
    acts.push(Tensor {
        height: embedding.height,
        width: embedding.width,
        channels: embedding.channels,
        data: embedding.to_hwc().into_iter().map(f64::from).collect(),
    });
    for s in &layout.stages {
        let mut out = layers::deconv_forward(acts.last().unwrap(), &params[s.weight.clone()], &params[s.bias.clone()], s.c_out);
        layers::relu_in_place(&mut out);
        acts.push(out);
    }
    let logits = layers::pointwise_forward(
        acts.last().unwrap(),
        &params[layout.head_weight.clone()],
        &params[layout.head_bias.clone()],
        config.out_channels,
    );
    let (rows, cols) = resamplers(config, embedding);
    let mut probs = layers::resize_forward(&logits, &rows, &cols);
    for v in &mut probs.data {
        *v = sigmoid(*v);
    }
    Ok(Trace { acts, probs })
}

fn channel(t: &Tensor, c: usize) -> Vec<f64> {
    t.data.iter().skip(c).step_by(t.channels).copied().collect()
}

/// Foreground probabilities (output channel 0) at the configured target size.
pub fn decoder_forward(params: &DecoderParams, embedding: &Embedding) -> Result<ProbMask> {
    decoder_forward_channels(params, embedding).map(|mut v| v.swap_remove(0))
}

/// One probability map per output channel.
pub fn decoder_forward_channels(params: &DecoderParams, embedding: &Embedding) -> Result<Vec<ProbMask>> {
    let trace = run_forward(&params.config, &params.layout, &params.values_f64(), embedding)?;
    (0..params.config.out_channels)
        .map(|c| ProbMask::new(params.config.target_width, params.config.target_height, channel(&trace.probs, c)))
        .collect()
}

/// Mean BCE over every output channel (the binary target replicated across
/// channels) and its analytic gradient, for an arbitrary `f64` parameter
/// vector laid out per `config.layout()`.
pub fn loss_and_grad(config: &DecoderConfig, params: &[f64], embedding: &Embedding, target: &BinaryMask) -> Result<(f64, Vec<f64>)> {
    let layout = config.layout()?;
    check_params(&layout, params)?;
    check_target(config, target)?;
    let trace = run_forward(config, &layout, params, embedding)?;
    let c = config.out_channels;
    let n = trace.probs.data.len() as f64;

    let mut loss = 0.0;
    let mut grad_logits = Tensor::zeros(trace.probs.height, trace.probs.width, c);
    for (i, (&p, g)) in trace.probs.data.iter().zip(&mut grad_logits.data).enumerate() {
        let y = target.data()[i / c];
        loss += bce_term(p, y);
        // d/dz of the clamped loss vanishes where the clamp is active
        if p > BCE_EPSILON && p < 1.0 - BCE_EPSILON {
            *g = (p - if y { 1.0 } else { 0.0 }) / n;
        }
    }
    loss /= n;

    let mut grad = vec![0.0; layout.total];
    let (rows, cols) = resamplers(config, embedding);
    let grad_small = layers::resize_backward(&grad_logits, &rows, &cols);
    let head = layers::pointwise_backward(trace.acts.last().unwrap(), &params[layout.head_weight.clone()], &grad_small);
    grad[layout.head_weight.clone()].copy_from_slice(&head.weight);
    grad[layout.head_bias.clone()].copy_from_slice(&head.bias);
    let mut upstream = head.input;
    for (i, s) in layout.stages.iter().enumerate().rev() {
        layers::relu_backward_in_place(&mut upstream, &trace.acts[i + 1]);
        let g = layers::deconv_backward(&trace.acts[i], &params[s.weight.clone()], &upstream, i > 0);
        grad[s.weight.clone()].copy_from_slice(&g.weight);
        grad[s.bias.clone()].copy_from_slice(&g.bias);
        upstream = g.input;
    }
    Ok((loss, grad))
}

/// Loss only, for finite-difference checks.
pub fn loss_only(config: &DecoderConfig, params: &[f64], embedding: &Embedding, target: &BinaryMask) -> Result<f64> {
    let layout = config.layout()?;
    check_params(&layout, params)?;
    check_target(config, target)?;
    let trace = run_forward(config, &layout, params, embedding)?;
    let c = config.out_channels;
    let sum: f64 = trace
        .probs
        .data
        .iter()
        .enumerate()
        .map(|(i, &p)| bce_term(p, target.data()[i / c]))
        .sum();
    Ok(sum / trace.probs.data.len() as f64)
}

/// Sign pattern of every hidden ReLU; finite differences are only valid
/// between parameter vectors that share it.
pub fn activation_pattern(config: &DecoderConfig, params: &[f64], embedding: &Embedding) -> Result<Vec<bool>> {
    let layout = config.layout()?;
    check_params(&layout, params)?;
    let trace = run_forward(config, &layout, params, embedding)?;
    Ok(trace.acts[1..].iter().flat_map(|t| t.data.iter().map(|&v| v > 0.0)).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupCheck {
    pub name: String,
    pub checked: usize,
    /// Checked with a smaller step because `step` crosses a ReLU kink.
    pub reduced_step: usize,
    /// Kink within `MIN_FD_STEP` of the parameter; not checked.
    pub skipped: usize,
    pub max_relative_error: f64,
}

const MIN_FD_STEP: f64 = 1e-7;

/// Central-difference check of the analytic gradient on up to
/// `per_group` evenly spaced parameters of every group. Relative error is
/// `|analytic - numeric| / max(|analytic|, |numeric|, floor)`. A parameter
/// whose perturbation flips a ReLU is retried with the step quartered until
/// the activation pattern holds.
pub fn finite_difference_check(
    config: &DecoderConfig,
    params: &[f64],
    embedding: &Embedding,
    target: &BinaryMask,
    step: f64,
    per_group: usize,
    floor: f64,
) -> Result<Vec<GroupCheck>> {
    let (_, grad) = loss_and_grad(config, params, embedding, target)?;
    let base_pattern = activation_pattern(config, params, embedding)?;
    let mut out = Vec::new();
    for (name, range) in config.layout()?.groups() {
        let stride = (range.len() / per_group.max(1)).max(1);
        let mut check = GroupCheck {
            name,
            checked: 0,
            reduced_step: 0,
            skipped: 0,
            max_relative_error: 0.0,
        };
        for i in range.step_by(stride).take(per_group) {
            let mut h = step;
            let (plus, minus) = loop {
                let mut plus = params.to_vec();
                plus[i] += h;
                let mut minus = params.to_vec();
                minus[i] -= h;
                let stable = activation_pattern(config, &plus, embedding)? == base_pattern
                    && activation_pattern(config, &minus, embedding)? == base_pattern;
                if stable || h < MIN_FD_STEP {
                    break (stable.then_some(plus), minus);
                }
                h /= 4.0;
            };
            let Some(plus) = plus else {
                check.skipped += 1;
                continue;
            };
            if h < step {
                check.reduced_step += 1;
            }
            let numeric = (loss_only(config, &plus, embedding, target)? - loss_only(config, &minus, embedding, target)?)
                / (plus[i] - minus[i]);
            let scale = grad[i].abs().max(numeric.abs()).max(floor);
            check.max_relative_error = check.max_relative_error.max((grad[i] - numeric).abs() / scale);
            check.checked += 1;
        }
        out.push(check);
    }
    Ok(out)
}

fn check_params(layout: &ParamLayout, params: &[f64]) -> Result<()> {
    if params.len() != layout.total {
        return Err(Error::ShapeMismatch(format!(
            "{} parameters for a decoder needing {}",
            params.len(),
            layout.total
        )));
    }
    Ok(())
}

fn check_target(config: &DecoderConfig, target: &BinaryMask) -> Result<()> {
    if target.dims() != (config.target_width, config.target_height) {
        return Err(Error::ShapeMismatch(format!(
            "target mask {}x{} for decoder output {}x{}",
            target.width(),
            target.height(),
            config.target_width,
            config.target_height
        )));
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    config: DecoderConfig,
    param_digest: String,
    epoch: usize,
}

/// Layout: u32 little-endian header length, JSON header, f32 little-endian
/// parameters in stage order.
pub fn save_checkpoint(params: &DecoderParams, epoch: usize, path: &Path) -> Result<()> {
    let header = serde_json::to_vec(&CheckpointHeader {
        config: params.config.clone(),
        param_digest: params.param_digest(),
        epoch,
    })?;
    let mut bytes = Vec::with_capacity(4 + header.len() + 4 * params.len());
    bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header);
    for v in &params.values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Returns the parameters and the stored epoch; the digest is verified.
pub fn load_checkpoint(path: &Path) -> Result<(DecoderParams, usize)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |reason: &str| Error::CorruptEntry {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 4 {
        return Err(corrupt("truncated header length"));
    }
    let header_len = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    let header_end = 4usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[4..header_end])?;
    let payload = &bytes[header_end..];
    if payload.len() % 4 != 0 {
        return Err(corrupt("payload not f32-aligned"));
    }
    let values = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let params = DecoderParams::from_values(&header.config, values)?;
    if params.param_digest() != header.param_digest {
        return Err(corrupt("parameter digest mismatch"));
    }
    Ok((params, header.epoch))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::PreprocParams;

    fn embedding(c: usize, h: usize, w: usize, seed: u64) -> Embedding {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..c * h * w).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        Embedding::new(c, h, w, values, "test", PreprocParams::new(w as u32, h as u32, w as u32).unwrap()).unwrap()
    }

    #[test]
    fn zero_params_give_one_half() {
        let cfg = DecoderConfig::new(4, vec![3, 2, 2], 20, 12, 0);
        let p = DecoderParams::zeros(&cfg).unwrap();
        let out = p.forward(&embedding(4, 2, 3, 1)).unwrap();
        assert_eq!((out.width(), out.height()), (20, 12));
        assert!(out.values().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn schedule_must_have_three_stages() {
        let cfg = DecoderConfig::new(4, vec![3, 2], 8, 8, 0);
        assert!(matches!(init_decoder(&cfg), Err(Error::InvalidConfig(_))));
        let cfg = DecoderConfig::new(4, vec![3, 0, 2], 8, 8, 0);
        assert!(matches!(init_decoder(&cfg), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn init_is_seeded() {
        let a = DecoderConfig::new(16, vec![32, 16, 8], 128, 128, 1);
        let b = DecoderConfig { init_seed: 2, ..a.clone() };
        assert_eq!(init_decoder(&a).unwrap().param_digest(), init_decoder(&a).unwrap().param_digest());
        assert_ne!(init_decoder(&a).unwrap().param_digest(), init_decoder(&b).unwrap().param_digest());
        let p = init_decoder(&a).unwrap();
        for s in &p.layout().stages {
            assert!(p.values()[s.bias.clone()].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let cfg = DecoderConfig::new(4, vec![3, 2, 2], 16, 16, 0);
        let p = init_decoder(&cfg).unwrap();
        assert!(matches!(p.forward(&embedding(5, 2, 2, 0)), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn bce_values() {
        let half = ProbMask::filled(3, 2, 0.5).unwrap();
        let t = BinaryMask::from_fn(3, 2, |x, _| x == 1);
        assert!((bce_loss(&half, &t).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);

        let pred = ProbMask::new(2, 2, vec![0.9, 0.1, 0.8, 0.2]).unwrap();
        let t = BinaryMask::from_fn(2, 2, |x, _| x == 0);
        let expected = (2.0 * -(0.9f64).ln() + 2.0 * -(0.8f64).ln()) / 4.0;
        let got = bce_loss(&pred, &t).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 0.164252).abs() < 1e-6);

        let near = ProbMask::new(2, 1, vec![1.0 - 1e-12, 1e-12]).unwrap();
        let t = BinaryMask::from_fn(2, 1, |x, _| x == 0);
        assert!(bce_loss(&near, &t).unwrap() <= 1.2e-7);
        assert!(bce_loss(&near, &BinaryMask::new(3, 1)).is_err());
    }

    #[test]
    fn binarize_threshold_convention() {
        let half = ProbMask::filled(4, 4, 0.5).unwrap();
        assert_eq!(binarize(&half, 0.5).count_foreground(), 16);
        assert_eq!(binarize(&half, 0.51).count_foreground(), 0);
    }

    #[test]
    fn probabilities_stay_open_interval() {
        let cfg = DecoderConfig::new(2, vec![2, 2, 2], 16, 16, 0);
        let mut p = DecoderParams::zeros(&cfg).unwrap();
        let hb = p.layout().head_bias.clone();
        p.values_mut()[hb].fill(80.0);
        let out = p.forward(&embedding(2, 2, 2, 0)).unwrap();
        assert!(out.values().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn three_channel_mode_reads_channel_zero() {
        let mut cfg = DecoderConfig::new(3, vec![2, 2, 2], 16, 16, 5);
        cfg.out_channels = 3;
        let p = init_decoder(&cfg).unwrap();
        let e = embedding(3, 2, 2, 9);
        let chans = decoder_forward_channels(&p, &e).unwrap();
        assert_eq!(chans.len(), 3);
        assert_eq!(p.forward(&e).unwrap(), chans[0]);
    }

    #[test]
    fn checkpoint_round_trip_and_tamper() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let cfg = DecoderConfig::new(4, vec![3, 2, 2], 16, 16, 3);
        let p = init_decoder(&cfg).unwrap();
        p.save_checkpoint(&path, 7).unwrap();
        let (back, epoch) = load_checkpoint(&path).unwrap();
        assert_eq!((back, epoch), (p, 7));
        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::CorruptEntry { .. })));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cfg = DecoderConfig::new(3, vec![4, 3, 2], 13, 19, 11);
        let params = init_decoder(&cfg).unwrap().values_f64();
        let e = embedding(3, 2, 3, 4);
        let target = BinaryMask::from_fn(13, 19, |x, y| (x * 3 + y * 5) % 7 < 3);
        let checks = finite_difference_check(&cfg, &params, &e, &target, 1e-3, usize::MAX, 1e-9).unwrap();
        assert_eq!(checks.len(), 8);
        let reduced: usize = checks.iter().map(|c| c.reduced_step + c.skipped).sum();
        let total: usize = checks.iter().map(|c| c.skipped + c.checked).sum();
        assert!(reduced * 10 <= total, "{reduced} of {total} parameters sit near a kink");
        for c in &checks {
            assert!(c.checked > 0, "{}: every parameter skipped", c.name);
            assert!(c.max_relative_error < 1e-3, "{}: relative error {}", c.name, c.max_relative_error);
        }
    }
}
