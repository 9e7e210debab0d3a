//! Weight-free stand-in for the foundation model.
//!
//! The encoder is a frozen patch embedding: each cell of a fixed grid is
//! average-pooled onto a 4x4 sub-grid and the pooled colours are mapped by a
//! seeded random linear projection. The mask decoder derives three
//! nested candidate regions from the prompt with classical intensity
//! segmentation, passes them through a small trainable logistic refinement
//! head over the embedding, and scores each candidate by shape regularity.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::preprocess::{preprocess, ModelInput};
use super::{Embedding, FineTuneExample, FoundationModel, MaskProposal, PROPOSALS_PER_PROMPT};
use crate::data::RasterImage;
use crate::digest::f32_digest;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::optim::Adam;
use crate::prompt::{PointLabel, Prompt, PromptKind};

pub const TOY_GRID: usize = 16;
pub const TOY_CHANNELS: usize = 16;
pub const TOY_TARGET_SIDE: u32 = 128;
/// Colour channels the projection expects; grayscale is replicated.
const COLOURS: usize = 3;
/// Sub-grid side inside each patch.
const SUB: usize = 4;
const PROJECTION_INPUTS: usize = COLOURS * SUB * SUB;
/// Flood-fill luminance tolerances for subpart, part and whole proposals.
const POINT_TOLERANCES: [f32; 3] = [0.06, 0.12, 0.22];
const REFINE_ALPHA_INIT: f32 = 4.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub seed: u64,
    pub target_side: u32,
    pub grid: usize,
    pub channels: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            target_side: TOY_TARGET_SIDE,
            grid: TOY_GRID,
            channels: TOY_CHANNELS,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ToyEncoder {
    seed: u64,
    grid: usize,
    channels: usize,
    /// `channels x PROJECTION_INPUTS`, row-major.
    projection: Vec<f32>,
}

impl ToyEncoder {
    pub fn new(seed: u64, grid: usize, channels: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // weight variance 1 / inputs keeps outputs O(1) for inputs in [0, 1]
        let bound = (3.0 / PROJECTION_INPUTS as f32).sqrt();
        let projection = (0..channels * PROJECTION_INPUTS)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            seed,
            grid,
            channels,
            projection,
        }
    }

    pub fn id(&self, target_side: u32) -> String {
        format!(
            "toy-s{}-{}x{}x{}-side{}",
            self.seed, self.channels, self.grid, self.grid, target_side
        )
    }

    pub fn digest(&self) -> String {
        f32_digest(&self.projection)
    }

    pub fn encode(&self, input: &ModelInput, encoder_id: &str) -> Result<Embedding> {
        let g = self.grid;
        let divisible = |n: usize| n >= g && n.is_multiple_of(g) && (n / g).is_multiple_of(SUB);
        if !divisible(input.height) || !divisible(input.width) {
            return Err(Error::ShapeError(format!(
                "{}x{} input is not divisible into a {g}x{g} grid of {SUB}x{SUB}-pooled patches",
                input.width, input.height
            )));
        }
        if input.channels != 1 && input.channels != COLOURS {
            return Err(Error::ShapeError(format!("{} input channels", input.channels)));
        }
        let (sy, sx) = (input.height / g / SUB, input.width / g / SUB);
        let norm = 1.0 / (sy * sx) as f32;
        let mut values = vec![0f32; self.channels * g * g];
        let mut pooled = [0f32; PROJECTION_INPUTS];
        for gy in 0..g {
            for gx in 0..g {
                pooled.fill(0.0);
                for j in 0..SUB {
                    for i in 0..SUB {
                        let slot = &mut pooled[(j * SUB + i) * COLOURS..][..COLOURS];
                        for y in (gy * SUB + j) * sy..(gy * SUB + j + 1) * sy {
                            for x in (gx * SUB + i) * sx..(gx * SUB + i + 1) * sx {
                                for (k, v) in slot.iter_mut().enumerate() {
                                    let c = if input.channels == 1 { 0 } else { k };
                                    *v += input.at(x, y, c);
                                }
                            }
                        }
                    }
                }
                for v in &mut pooled {
                    *v *= norm;
                }
                for c in 0..self.channels {
                    let row = &self.projection[c * PROJECTION_INPUTS..(c + 1) * PROJECTION_INPUTS];
                    let v: f32 = row.iter().zip(&pooled).map(|(w, p)| w * p).sum();
                    values[(c * g + gy) * g + gx] = v;
                }
            }
        }
        Embedding::new(self.channels, g, g, values, encoder_id, input.preproc)
    }
}

/// Toy encoding with the default grid and channel count.
pub fn toy_encode(input: &ModelInput, seed: u64) -> Result<Embedding> {
    let enc = ToyEncoder::new(seed, TOY_GRID, TOY_CHANNELS);
    let id = enc.id(input.preproc.target_side);
    enc.encode(input, &id)
}

/// Trainable part of the toy mask decoder: per-pixel logit
/// `alpha * (2m - 1) + w . e(p) + b` over a candidate region `m` and the
/// embedding cell `e(p)` under the pixel. The initial parameters reproduce
/// the candidate regions exactly.
#[derive(Clone, Debug)]
pub struct RefineHead {
    /// `[alpha, bias, w_0 .. w_{C-1}]`
    params: Vec<f32>,
}

impl RefineHead {
    pub fn new(channels: usize) -> Self {
        let mut params = vec![0f32; 2 + channels];
        params[0] = REFINE_ALPHA_INIT;
        Self { params }
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    fn logits(&self, region: &BinaryMask, cells: &[usize], emb_hwc: &[f32], channels: usize) -> Vec<f32> {
        let (alpha, bias, w) = (self.params[0], self.params[1], &self.params[2..]);
        region
            .data()
            .iter()
            .zip(cells)
            .map(|(&m, &cell)| {
                let e = &emb_hwc[cell * channels..(cell + 1) * channels];
                let dot: f32 = w.iter().zip(e).map(|(a, b)| a * b).sum();
                alpha * if m { 1.0 } else { -1.0 } + dot + bias
            })
            .collect()
    }
}

pub struct ToyFoundationModel {
    config: ToyConfig,
    encoder: ToyEncoder,
    encoder_id: String,
    head: RefineHead,
}

impl ToyFoundationModel {
    pub fn new(config: ToyConfig) -> Result<Self> {
        if config.grid == 0 || config.channels == 0 || !(config.target_side as usize).is_multiple_of(config.grid) {
            return Err(Error::InvalidConfig(format!(
                "toy target side {} must be a positive multiple of grid {}",
                config.target_side, config.grid
            )));
        }
        let encoder = ToyEncoder::new(config.seed, config.grid, config.channels);
        let encoder_id = encoder.id(config.target_side);
        Ok(Self {
            head: RefineHead::new(config.channels),
            encoder,
            encoder_id,
            config,
        })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    pub fn head(&self) -> &RefineHead {
        &self.head
    }

    /// Embedding cell index (row-major over the grid) for every model pixel.
    fn cell_index(&self, side: usize, grid: usize) -> Vec<usize> {
        let mut cells = Vec::with_capacity(side * side);
        for y in 0..side {
            for x in 0..side {
                cells.push((y * grid / side) * grid + x * grid / side);
            }
        }
        cells
    }

    /// Candidate regions and their refined masks in model space.
    fn model_space_masks(
        &self,
        input: &ModelInput,
        embedding: &Embedding,
        prompt: &Prompt,
    ) -> Result<(Vec<BinaryMask>, Vec<Vec<f32>>)> {
        if embedding.width != embedding.height || embedding.channels != self.config.channels {
            return Err(Error::ShapeMismatch(format!(
                "toy decoder expects a square {}-channel embedding",
                self.config.channels
            )));
        }
        let side = input.width;
        let lum = box_blur(&input.luminance(), side, side);
        let (cw, ch) = input.preproc.content_dims();
        let content = (cw as usize, ch as usize);
        let regions = candidate_regions(&lum, side, content, &input.preproc.prompt_to_model(prompt));
        let cells = self.cell_index(side, embedding.width);
        let hwc = embedding.to_hwc();
        let logits = regions
            .iter()
            .map(|r| self.head.logits(r, &cells, &hwc, embedding.channels))
            .collect();
        Ok((regions, logits))
    }
}

fn mask_from_logits(side: usize, logits: &[f32]) -> BinaryMask {
    BinaryMask::from_vec(side as u32, side as u32, logits.iter().map(|&l| l >= 0.0).collect())
        .expect("logit count matches frame")
}

impl FoundationModel for ToyFoundationModel {
    fn encoder_id(&self) -> &str {
        &self.encoder_id
    }

    fn target_side(&self) -> u32 {
        self.config.target_side
    }

    fn embedding_shape(&self) -> [usize; 3] {
        [self.config.channels, self.config.grid, self.config.grid]
    }

    fn encode_image(&mut self, image: &RasterImage) -> Result<Embedding> {
        let input = preprocess(image, self.config.target_side)?;
        self.encoder.encode(&input, &self.encoder_id)
    }

    fn propose(&mut self, image: &RasterImage, embedding: &Embedding, prompt: &Prompt) -> Result<Vec<MaskProposal>> {
        let input = preprocess(image, self.config.target_side)?;
        let (_, logits) = self.model_space_masks(&input, embedding, prompt)?;
        let model_prompt = input.preproc.prompt_to_model(prompt);
        let proposals = logits
            .iter()
            .map(|l| {
                let model_mask = mask_from_logits(input.width, l);
                let score = proposal_score(&model_mask, &model_prompt);
                MaskProposal {
                    mask: input.preproc.mask_to_image(&model_mask),
                    predicted_iou: score,
                    source_prompt: prompt.clone(),
                }
            })
            .collect::<Vec<_>>();
        debug_assert_eq!(proposals.len(), PROPOSALS_PER_PROMPT);
        Ok(proposals)
    }

    fn encoder_digest(&self) -> Result<String> {
        Ok(self.encoder.digest())
    }

    fn mask_decoder_digest(&self) -> Result<String> {
        Ok(f32_digest(&self.head.params))
    }

    fn fine_tune_mask_decoder(
        &mut self,
        examples: &[FineTuneExample],
        epochs: usize,
        learning_rate: f64,
    ) -> Result<Vec<f64>> {
        const EPS: f32 = 1e-7;
        let mut adam = Adam::new(learning_rate, self.head.params.len());
        // candidate regions do not depend on the head; compute them once
        let mut prepared = Vec::with_capacity(examples.len());
        for ex in examples {
            let input = preprocess(&ex.image, self.config.target_side)?;
            let (regions, _) = self.model_space_masks(&input, &ex.embedding, &ex.prompt)?;
            let side = input.width;
            let target = input.preproc.mask_to_frame(&ex.target, side as u32, side as u32);
            let (cw, ch) = input.preproc.content_dims();
            let valid: Vec<bool> = (0..side * side)
                .map(|i| (i % side) < cw as usize && (i / side) < ch as usize)
                .collect();
            let prompt = input.preproc.prompt_to_model(&ex.prompt);
            prepared.push((regions, target, valid, ex.embedding.to_hwc(), ex.embedding.width, prompt, side));
        }
        let mut history = Vec::with_capacity(epochs);
        for epoch in 0..epochs {
            let mut epoch_loss = 0.0f64;
            for (regions, target, valid, hwc, grid, prompt, side) in &prepared {
                let side = *side;
                let cells = self.cell_index(side, *grid);
                let channels = self.config.channels;
                // supervise the proposal the decoder currently ranks first
                let best = regions
                    .iter()
                    .map(|r| {
                        let l = self.head.logits(r, &cells, hwc, channels);
                        proposal_score(&mask_from_logits(side, &l), prompt)
                    })
                    .enumerate()
                    .fold((0, f64::MIN), |acc, (i, s)| if s > acc.1 { (i, s) } else { acc })
                    .0;
                let region = &regions[best];
                let logits = self.head.logits(region, &cells, hwc, channels);
                let n = valid.iter().filter(|&&v| v).count().max(1) as f32;
                let mut grad = vec![0f32; self.head.params.len()];
                let mut loss = 0.0f64;
                for i in 0..logits.len() {
                    if !valid[i] {
                        continue;
                    }
                    let y = if target.data()[i] { 1.0 } else { 0.0 };
                    let p = 1.0 / (1.0 + (-logits[i]).exp());
                    let pc = p.clamp(EPS, 1.0 - EPS);
                    loss -= (y * pc.ln() + (1.0 - y) * (1.0 - pc).ln()) as f64;
                    if p <= EPS || p >= 1.0 - EPS {
                        continue;
                    }
                    let g = (p - y) / n;
                    grad[0] += g * if region.data()[i] { 1.0 } else { -1.0 };
                    grad[1] += g;
                    let e = &hwc[cells[i] * channels..(cells[i] + 1) * channels];
                    for (gw, ev) in grad[2..].iter_mut().zip(e) {
                        *gw += g * ev;
                    }
                }
                let loss = loss / n as f64;
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch });
                }
                epoch_loss += loss;
                adam.step(&mut self.head.params, &grad);
            }
            history.push(epoch_loss / prepared.len().max(1) as f64);
        }
        Ok(history)
    }
}

/// 3x3 mean filter with clamped edges.
fn box_blur(values: &[f32], width: usize, height: usize) -> Vec<f32> {
    let mut out = vec![0f32; values.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let sx = (x as i64 + dx).clamp(0, width as i64 - 1) as usize;
                    let sy = (y as i64 + dy).clamp(0, height as i64 - 1) as usize;
                    acc += values[sy * width + sx];
                }
            }
            out[y * width + x] = acc / 9.0;
        }
    }
    out
}

/// Otsu threshold over values in `[0, 1]`; `None` when no split separates
/// two non-empty classes.
fn otsu_threshold(values: impl Iterator<Item = f32> + Clone) -> Option<f32> {
    const BINS: usize = 256;
    let mut hist = [0usize; BINS];
    let mut total = 0usize;
    for v in values {
        hist[((v.clamp(0.0, 1.0) * (BINS - 1) as f32).round()) as usize] += 1;
        total += 1;
    }
    if total == 0 {
        return None;
    }
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0f64, 0f64);
    let mut best: Option<(f64, usize)> = None;
    for (k, &count) in hist.iter().enumerate().take(BINS - 1) {
        w0 += count as f64;
        sum0 += k as f64 * count as f64;
        let w1 = total as f64 - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let diff = sum0 / w0 - (sum_all - sum0) / w1;
        let between = w0 * w1 * diff * diff;
        if best.is_none_or(|(b, _)| between > b) {
            best = Some((between, k));
        }
    }
    // class 0 holds bins <= k
    best.map(|(_, k)| (k as f32 + 0.5) / (BINS - 1) as f32)
}

/// Three nested candidate regions (whole, part, subpart) in model space.
fn candidate_regions(lum: &[f32], side: usize, content: (usize, usize), prompt: &Prompt) -> Vec<BinaryMask> {
    let (cw, ch) = content;
    match prompt.kind {
        PromptKind::Box => {
            let [x0, y0, x1, y1] = prompt.bbox.expect("validated box prompt");
            let xs = (x0.floor().max(0.0) as usize).min(cw - 1)..(x1.ceil() as usize).clamp(1, cw);
            let ys = (y0.floor().max(0.0) as usize).min(ch - 1)..(y1.ceil() as usize).clamp(1, ch);
            let in_box = |i: usize| xs.contains(&(i % side)) && ys.contains(&(i / side));
            let box_vals = || (0..lum.len()).filter(|&i| in_box(i)).map(|i| lum[i]);
            let dark_t = otsu_threshold(box_vals()).unwrap_or(f32::INFINITY);
            let dark = |i: usize| in_box(i) && lum[i] < dark_t;
            let darkest_t = otsu_threshold((0..lum.len()).filter(|&i| dark(i)).map(|i| lum[i]))
                .unwrap_or(f32::NEG_INFINITY);
            let whole = frame_mask(side, dark);
            let part = frame_mask(side, |i| dark(i) && lum[i] >= darkest_t);
            // subpart: part restricted to the central ellipse of the box
            let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
            let (rx, ry) = (0.375 * (x1 - x0), 0.375 * (y1 - y0));
            let sub = frame_mask(side, |i| {
                let dx = ((i % side) as f64 + 0.5 - cx) / rx;
                let dy = ((i / side) as f64 + 0.5 - cy) / ry;
                part.data()[i] && dx * dx + dy * dy <= 1.0
            });
            vec![whole, part, sub]
        }
        PromptKind::Point | PromptKind::AutoGridPoint => {
            let [x, y] = prompt.point.expect("validated point prompt");
            let sx = (x.max(0.0) as usize).min(cw - 1);
            let sy = (y.max(0.0) as usize).min(ch - 1);
            let seed_val = lum[sy * side + sx];
            let background = prompt.label == Some(PointLabel::Background);
            let mut out: Vec<BinaryMask> = POINT_TOLERANCES
                .iter()
                .rev()
                .map(|&tol| {
                    let fill = flood_fill(lum, side, content, (sx, sy), seed_val, tol);
                    if background {
                        let inside = frame_mask(side, |i| (i % side) < cw && (i / side) < ch);
                        frame_mask(side, |i| inside.data()[i] && !fill.data()[i])
                    } else {
                        fill
                    }
                })
                .collect();
            out.truncate(PROPOSALS_PER_PROMPT);
            out
        }
    }
}

fn frame_mask(side: usize, f: impl Fn(usize) -> bool) -> BinaryMask {
    BinaryMask::from_vec(side as u32, side as u32, (0..side * side).map(f).collect())
        .expect("frame-sized mask")
}

fn flood_fill(
    lum: &[f32],
    side: usize,
    content: (usize, usize),
    seed: (usize, usize),
    seed_val: f32,
    tol: f32,
) -> BinaryMask {
    let (cw, ch) = content;
    let mut data = vec![false; side * side];
    let mut queue = VecDeque::new();
    let start = seed.1 * side + seed.0;
    data[start] = true;
    queue.push_back(seed);
    while let Some((x, y)) = queue.pop_front() {
        let neighbours = [
            (x.wrapping_sub(1), y),
            (x + 1, y),
            (x, y.wrapping_sub(1)),
            (x, y + 1),
        ];
        for (nx, ny) in neighbours {
            if nx >= cw || ny >= ch {
                continue;
            }
            let j = ny * side + nx;
            if !data[j] && (lum[j] - seed_val).abs() <= tol {
                data[j] = true;
                queue.push_back((nx, ny));
            }
        }
    }
    BinaryMask::from_vec(side as u32, side as u32, data).expect("frame-sized mask")
}

/// IoU between a mask and the ellipse with the same first and second
/// moments; 1 for a perfect filled ellipse, lower for ragged regions.
pub fn moment_ellipse_iou(mask: &BinaryMask) -> f64 {
    let n = mask.count_foreground();
    if n == 0 {
        return 0.0;
    }
    let (mut sx, mut sy) = (0f64, 0f64);
    for (x, y) in mask.foreground_pixels() {
        sx += x as f64;
        sy += y as f64;
    }
    let (mx, my) = (sx / n as f64, sy / n as f64);
    let (mut cxx, mut cyy, mut cxy) = (0f64, 0f64, 0f64);
    for (x, y) in mask.foreground_pixels() {
        let (dx, dy) = (x as f64 - mx, y as f64 - my);
        cxx += dx * dx;
        cyy += dy * dy;
        cxy += dx * dy;
    }
    // pixel-area variance so single pixels map to a unit-area ellipse
    cxx = cxx / n as f64 + 1.0 / 12.0;
    cyy = cyy / n as f64 + 1.0 / 12.0;
    cxy /= n as f64;
    let tr = cxx + cyy;
    let det = cxx * cyy - cxy * cxy;
    let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
    let (l1, l2) = (tr / 2.0 + disc, (tr / 2.0 - disc).max(1e-12));
    let theta = 0.5 * (2.0 * cxy).atan2(cxx - cyy);
    let (a, b) = (2.0 * l1.sqrt(), 2.0 * l2.sqrt());
    let (s, c) = theta.sin_cos();
    let (mut inter, mut ellipse) = (0usize, 0usize);
    let r = a.ceil() as i64 + 1;
    for y in (my as i64 - r)..=(my as i64 + r) {
        for x in (mx as i64 - r)..=(mx as i64 + r) {
            let (dx, dy) = (x as f64 - mx, y as f64 - my);
            let u = (dx * c + dy * s) / a;
            let v = (-dx * s + dy * c) / b;
            if u * u + v * v <= 1.0 {
                ellipse += 1;
                if x >= 0 && y >= 0 && (x as u32) < mask.width() && (y as u32) < mask.height() && mask.get(x as u32, y as u32) {
                    inter += 1;
                }
            }
        }
    }
    inter as f64 / (n + ellipse - inter) as f64
}

fn bounding_box(mask: &BinaryMask) -> Option<[f64; 4]> {
    let mut bb: Option<[u32; 4]> = None;
    for (x, y) in mask.foreground_pixels() {
        bb = Some(match bb {
            None => [x, y, x + 1, y + 1],
            Some([x0, y0, x1, y1]) => [x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1)],
        });
    }
    bb.map(|b| b.map(|v| v as f64))
}

fn box_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |r: [f64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Predicted-IoU stand-in: shape regularity, times agreement between the
/// mask's extent and the prompt box for box prompts.
fn proposal_score(model_mask: &BinaryMask, model_prompt: &Prompt) -> f64 {
    let regular = moment_ellipse_iou(model_mask);
    let score = match (model_prompt.kind, model_prompt.bbox, bounding_box(model_mask)) {
        (PromptKind::Box, Some(b), Some(mb)) => regular * box_iou(b, mb),
        (PromptKind::Box, _, None) => 0.0,
        _ => regular,
    };
    score.clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::predict_masks;
    use crate::synth::synthesize_scene;

    fn input_of(width: usize, height: usize, data: Vec<f32>) -> ModelInput {
        let preproc = crate::gateway::PreprocParams::new(width as u32, height as u32, width.max(height) as u32).unwrap();
        ModelInput {
            width,
            height,
            channels: 1,
            data,
            preproc,
        }
    }

    #[test]
    fn zero_image_embeds_to_zero() {
        let e = toy_encode(&input_of(64, 64, vec![0.0; 64 * 64]), 5).unwrap();
        assert_eq!(e.shape(), [16, 16, 16]);
        assert!(e.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_pixel_change_changes_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let a: Vec<f32> = (0..64 * 64).map(|_| rng.random::<f32>()).collect();
        let mut b = a.clone();
        b[17 * 64 + 40] += 0.5;
        let ea = toy_encode(&input_of(64, 64, a), 1).unwrap();
        let eb = toy_encode(&input_of(64, 64, b), 1).unwrap();
        assert_ne!(ea.values, eb.values);
    }

    #[test]
    fn indivisible_input_is_shape_error() {
        assert!(matches!(
            toy_encode(&input_of(100, 100, vec![0.0; 100 * 100]), 1),
            Err(Error::ShapeError(_))
        ));
    }

    #[test]
    fn synthetic_sample_embeds_to_configured_shape_deterministically() {
        let scene = synthesize_scene(1, 0, 128);
        let mut model = ToyFoundationModel::new(ToyConfig::default()).unwrap();
        let a = model.encode_image(&scene.image).unwrap();
        let b = model.encode_image(&scene.image).unwrap();
        assert_eq!(a.shape(), [16, 16, 16]);
        assert_eq!(a.payload_bytes(), b.payload_bytes());
    }

    #[test]
    fn box_prompt_recovers_pit_without_shadow() {
        let mut model = ToyFoundationModel::new(ToyConfig::default()).unwrap();
        let mut ious = Vec::new();
        for i in 0..10 {
            let scene = synthesize_scene(4, i, 128);
            let emb = model.encode_image(&scene.image).unwrap();
            for comp in scene.mask.connected_components() {
                let prompt = crate::prompt::box_prompt_from_mask(&comp).unwrap();
                let props = predict_masks(&mut model, &scene.image, &emb, &prompt).unwrap();
                assert_eq!(props.len(), 3);
                let best = crate::prompt::select_best_proposal(&props).unwrap();
                ious.push(best.mask.iou(&comp).unwrap());
            }
        }
        let mean = ious.iter().sum::<f64>() / ious.len() as f64;
        assert!(mean > 0.85, "mean box IoU {mean}");
    }

    #[test]
    fn moment_score_prefers_ellipses() {
        let disc = BinaryMask::from_fn(40, 40, |x, y| {
            let (dx, dy) = (x as f64 - 19.5, y as f64 - 19.5);
            dx * dx + dy * dy <= 100.0
        });
        let ring = BinaryMask::from_fn(40, 40, |x, y| {
            let (dx, dy) = (x as f64 - 19.5, y as f64 - 19.5);
            let r2 = dx * dx + dy * dy;
            (64.0..=100.0).contains(&r2)
        });
        assert!(moment_ellipse_iou(&disc) > 0.9);
        assert!(moment_ellipse_iou(&ring) < moment_ellipse_iou(&disc));
    }

    #[test]
    fn fine_tune_touches_only_mask_decoder() {
        let mut model = ToyFoundationModel::new(ToyConfig::default()).unwrap();
        let enc_before = model.encoder_digest().unwrap();
        let dec_before = model.mask_decoder_digest().unwrap();
        let scene = synthesize_scene(2, 0, 128);
        let embedding = model.encode_image(&scene.image).unwrap();
        let prompt = crate::prompt::box_prompt_from_mask(&scene.mask).unwrap();
        let ex = FineTuneExample {
            image: scene.image.clone(),
            embedding,
            prompt,
            target: scene.mask.clone(),
        };
        let losses = model.fine_tune_mask_decoder(&[ex], 20, 0.01).unwrap();
        assert_eq!(losses.len(), 20);
        assert!(losses[19] < losses[0]);
        assert_eq!(model.encoder_digest().unwrap(), enc_before);
        assert_ne!(model.mask_decoder_digest().unwrap(), dec_before);
    }
}
