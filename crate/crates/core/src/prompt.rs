//! Prompt construction, proposal selection and simulated annotation.
//!
//! Boxes use an exclusive-max convention everywhere: `(x0, y0, x1, y1)` covers
//! pixel columns `x0..x1` and rows `y0..y1`. Points are `(x, y)` in pixel
//! units of the original image.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::data::Manifest;
use crate::error::{Error, Result};
use crate::gateway::{lock, predict_masks, EmbeddingSource, EmbeddingStore, MaskProposal};
use crate::mask::{decode_mask, encode_mask, BinaryMask};

pub const SIMULATOR_ANNOTATOR: &str = "simulator";
pub const DEFAULT_GRID: usize = 32;
pub const DEFAULT_NMS_THRESHOLD: f64 = 0.7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    AutoGridPoint,
    Point,
    Box,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointLabel {
    Foreground,
    Background,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub kind: PromptKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub point: Option<[f64; 2]>,
    #[serde(default, rename = "box", skip_serializing_if = "Option::is_none")]
    pub bbox: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<PointLabel>,
}

impl Prompt {
    pub fn point(x: f64, y: f64) -> Self {
        Self {
            kind: PromptKind::Point,
            point: Some([x, y]),
            bbox: None,
            label: Some(PointLabel::Foreground),
        }
    }

    pub fn background_point(x: f64, y: f64) -> Self {
        Self {
            label: Some(PointLabel::Background),
            ..Self::point(x, y)
        }
    }

    pub fn grid_point(x: f64, y: f64) -> Self {
        Self {
            kind: PromptKind::AutoGridPoint,
            ..Self::point(x, y)
        }
    }

    pub fn bbox(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            kind: PromptKind::Box,
            point: None,
            bbox: Some([x0, y0, x1, y1]),
            label: None,
        }
    }

    /// Field consistency for the prompt's kind and bounds against a
    /// `width`x`height` image.
    pub fn validate(&self, width: u32, height: u32) -> Result<()> {
        let (w, h) = (width as f64, height as f64);
        match self.kind {
            PromptKind::Point | PromptKind::AutoGridPoint => {
                let [x, y] = self
                    .point
                    .ok_or_else(|| Error::InvalidPrompt("point prompt without a point".into()))?;
                if self.bbox.is_some() {
                    return Err(Error::InvalidPrompt("point prompt carries a box".into()));
                }
                if !(x.is_finite() && y.is_finite() && (0.0..w).contains(&x) && (0.0..h).contains(&y)) {
                    return Err(Error::InvalidPrompt(format!(
                        "point ({x}, {y}) outside {width}x{height} image"
                    )));
                }
            }
            PromptKind::Box => {
                let [x0, y0, x1, y1] = self
                    .bbox
                    .ok_or_else(|| Error::InvalidPrompt("box prompt without a box".into()))?;
                if self.point.is_some() || self.label.is_some() {
                    return Err(Error::InvalidPrompt("box prompt carries point fields".into()));
                }
                let finite = [x0, y0, x1, y1].iter().all(|v| v.is_finite());
                if !finite || x0 >= x1 || y0 >= y1 {
                    return Err(Error::InvalidPrompt(format!(
                        "degenerate box ({x0}, {y0}, {x1}, {y1})"
                    )));
                }
                if x0 < 0.0 || y0 < 0.0 || x1 > w || y1 > h {
                    return Err(Error::InvalidPrompt(format!(
                        "box ({x0}, {y0}, {x1}, {y1}) outside {width}x{height} image"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Foreground point at the mask pixel nearest the foreground centroid; ties
/// go to the first pixel in row-major order.
pub fn point_prompt_from_mask(gt: &BinaryMask) -> Result<Prompt> {
    let (mut sum_r, mut sum_c, mut n) = (0f64, 0f64, 0usize);
    for (x, y) in gt.foreground_pixels() {
        sum_r += y as f64;
        sum_c += x as f64;
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let (cr, cc) = (sum_r / n as f64, sum_c / n as f64);
    let mut best: Option<((u32, u32), f64)> = None;
    for (x, y) in gt.foreground_pixels() {
        let d = (y as f64 - cr).powi(2) + (x as f64 - cc).powi(2);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some(((x, y), d));
        }
    }
    let ((x, y), _) = best.expect("non-empty mask");
    Ok(Prompt::point(x as f64, y as f64))
}

/// Tight exclusive-max box around all foreground pixels.
pub fn box_prompt_from_mask(gt: &BinaryMask) -> Result<Prompt> {
    let mut bounds: Option<[u32; 4]> = None;
    for (x, y) in gt.foreground_pixels() {
        bounds = Some(match bounds {
            None => [x, y, x, y],
            Some([x0, y0, x1, y1]) => [x0.min(x), y0.min(y), x1.max(x), y1.max(y)],
        });
    }
    let [x0, y0, x1, y1] = bounds.ok_or(Error::EmptyMask)?;
    Ok(Prompt::bbox(x0 as f64, y0 as f64, (x1 + 1) as f64, (y1 + 1) as f64))
}

/// `g`x`g` grid of foreground point prompts at cell centres, row-major.
pub fn auto_grid_prompts(width: u32, height: u32, g: usize) -> Vec<Prompt> {
    let (w, h) = (width as f64, height as f64);
    let mut prompts = Vec::with_capacity(g * g);
    for j in 0..g {
        for i in 0..g {
            let x = (i as f64 + 0.5) * w / g as f64;
            let y = (j as f64 + 0.5) * h / g as f64;
            prompts.push(Prompt::grid_point(x, y));
        }
    }
    prompts
}

/// Index of the highest predicted IoU; ties resolve to the lowest index.
pub fn best_proposal_index(proposals: &[MaskProposal]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in proposals.iter().enumerate() {
        let score = if p.predicted_iou.is_nan() {
            f64::NEG_INFINITY
        } else {
            p.predicted_iou
        };
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((i, score));
        }
    }
    best.map(|(i, _)| i).ok_or(Error::EmptyList)
}

pub fn select_best_proposal(proposals: &[MaskProposal]) -> Result<&MaskProposal> {
    best_proposal_index(proposals).map(|i| &proposals[i])
}

/// Greedy mask NMS: visit proposals by descending predicted IoU (stable), keep
/// one iff its mask IoU with every kept mask is at most `iou_thresh`.
pub fn nms_filter(proposals: &[MaskProposal], iou_thresh: f64) -> Result<Vec<MaskProposal>> {
    if !(0.0..=1.0).contains(&iou_thresh) {
        return Err(Error::InvalidArgument(format!(
            "NMS threshold {iou_thresh} outside [0, 1]"
        )));
    }
    let mut order: Vec<usize> = (0..proposals.len()).collect();
    order.sort_by(|&a, &b| {
        proposals[b]
            .predicted_iou
            .partial_cmp(&proposals[a].predicted_iou)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut kept: Vec<MaskProposal> = Vec::new();
    for i in order {
        let candidate = &proposals[i];
        let mut keep = true;
        for k in &kept {
            if candidate.mask.iou(&k.mask)? > iou_thresh {
                keep = false;
                break;
            }
        }
        if keep {
            kept.push(candidate.clone());
        }
    }
    Ok(kept)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationMode {
    Automatic,
    Point,
    Box,
    ManualUi,
}

impl std::str::FromStr for AnnotationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "automatic" => Ok(Self::Automatic),
            "point" => Ok(Self::Point),
            "box" => Ok(Self::Box),
            "manual_ui" => Ok(Self::ManualUi),
            other => Err(Error::InvalidArgument(format!("unknown annotation mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationRecord {
    pub sample_id: String,
    pub mask: BinaryMask,
    pub prompts: Vec<Prompt>,
    pub mode: AnnotationMode,
    pub predicted_iou: f64,
    pub annotator: String,
    pub created_at: DateTime<Utc>,
}

impl AnnotationRecord {
    pub fn validate(&self, width: u32, height: u32) -> Result<()> {
        if self.mask.dims() != (width, height) {
            return Err(Error::ShapeMismatch(format!(
                "annotation mask {}x{} for a {width}x{height} sample",
                self.mask.width(),
                self.mask.height()
            )));
        }
        if self.mode == AnnotationMode::ManualUi && self.annotator == SIMULATOR_ANNOTATOR {
            return Err(Error::InvalidArgument(
                "manual annotations cannot be attributed to the simulator".into(),
            ));
        }
        Ok(())
    }
}

/// Service-side provenance kept alongside a committed record.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitMeta {
    pub session_id: String,
    pub nonce: String,
}

#[derive(Serialize, Deserialize)]
struct LogLine {
    sample_id: String,
    mask: PathBuf,
    prompts: Vec<Prompt>,
    mode: AnnotationMode,
    predicted_iou: f64,
    annotator: String,
    created_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    commit: Option<CommitMeta>,
}

/// Append-only JSON-lines annotation log. Masks live as raster files in a
/// `masks/` directory beside the log, referenced by relative path.
#[derive(Debug)]
pub struct AnnotationLog {
    path: PathBuf,
    writer: Mutex<usize>,
}

impl AnnotationLog {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let lines = Self::read_lines(&path)?.len();
        Ok(Self {
            path,
            writer: Mutex::new(lines),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    fn dir(&self) -> PathBuf {
        self.path.parent().map(Path::to_path_buf).unwrap_or_default()
    }

    fn read_lines(path: &Path) -> Result<Vec<LogLine>> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut out = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            out.push(serde_json::from_str(&line)?);
        }
        Ok(out)
    }

    pub fn append(&self, record: &AnnotationRecord, commit: Option<CommitMeta>) -> Result<()> {
        let mut count = lock(&self.writer);
        let safe_id: String = record
            .sample_id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect();
        let rel = PathBuf::from("masks").join(format!("{:06}-{safe_id}.png", *count));
        encode_mask(&record.mask, &self.dir().join(&rel))?;
        let line = LogLine {
            sample_id: record.sample_id.clone(),
            mask: rel,
            prompts: record.prompts.clone(),
            mode: record.mode,
            predicted_iou: record.predicted_iou,
            annotator: record.annotator.clone(),
            created_at: record.created_at,
            commit,
        };
        let mut json = serde_json::to_string(&line)?;
        json.push('\n');
        let mut file = OpenOptions::new()
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        file.write_all(json.as_bytes())
            .and_then(|_| file.flush())
            .map_err(|e| Error::io(&self.path, e))?;
        *count += 1;
        Ok(())
    }

    /// Every record in append order, with its commit provenance if any.
    pub fn read_all(&self) -> Result<Vec<(AnnotationRecord, Option<CommitMeta>)>> {
        let _guard = lock(&self.writer);
        let dir = self.dir();
        Self::read_lines(&self.path)?
            .into_iter()
            .map(|l| {
                let mask = decode_mask(&dir.join(&l.mask))?;
                Ok((
                    AnnotationRecord {
                        sample_id: l.sample_id,
                        mask,
                        prompts: l.prompts,
                        mode: l.mode,
                        predicted_iou: l.predicted_iou,
                        annotator: l.annotator,
                        created_at: l.created_at,
                    },
                    l.commit,
                ))
            })
            .collect()
    }

    pub fn records(&self) -> Result<Vec<AnnotationRecord>> {
        Ok(self.read_all()?.into_iter().map(|(r, _)| r).collect())
    }
}

/// Last record per sample id; later log entries supersede earlier ones.
pub fn latest_by_sample(records: &[AnnotationRecord]) -> BTreeMap<String, AnnotationRecord> {
    let mut out = BTreeMap::new();
    for r in records {
        out.insert(r.sample_id.clone(), r.clone());
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub grid: usize,
    pub nms_threshold: f64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            grid: DEFAULT_GRID,
            nms_threshold: DEFAULT_NMS_THRESHOLD,
        }
    }
}

/// Simulated annotation of `ids` from their ground truth.
///
/// Point and box modes prompt once per 8-connected GT component, keep the
/// best-scored proposal per prompt and commit the union. Automatic mode
/// prompts a grid, keeps the best proposal per grid point, applies NMS and
/// commits the union of the survivors.
pub fn simulate_annotation(
    store: &EmbeddingStore,
    ids: &[String],
    mode: AnnotationMode,
    config: &SimulationConfig,
) -> Result<Vec<AnnotationRecord>> {
    if mode == AnnotationMode::ManualUi {
        return Err(Error::InvalidArgument("manual_ui is not a simulated mode".into()));
    }
    let manifest: &Manifest = store.manifest();
    let mut records = Vec::with_capacity(ids.len());
    for id in ids {
        let sample = manifest
            .get(id)
            .ok_or_else(|| Error::UnknownSample(id.clone()))?;
        let gt = manifest.load_gt(sample)?;
        let image = manifest.load_image(sample)?;
        let embedding = store.embedding(id)?;
        let prompts = match mode {
            AnnotationMode::Point | AnnotationMode::Box => {
                let components = gt.connected_components();
                if components.is_empty() {
                    return Err(Error::EmptyMask);
                }
                components
                    .iter()
                    .map(|c| {
                        if mode == AnnotationMode::Point {
                            point_prompt_from_mask(c)
                        } else {
                            box_prompt_from_mask(c)
                        }
                    })
                    .collect::<Result<Vec<_>>>()?
            }
            _ => auto_grid_prompts(image.width, image.height, config.grid),
        };
        let mut chosen = Vec::with_capacity(prompts.len());
        {
            let mut model = lock(store.model());
            for prompt in &prompts {
                let proposals = predict_masks(model.as_mut(), &image, &embedding, prompt)?;
                chosen.push(select_best_proposal(&proposals)?.clone());
            }
        }
        if mode == AnnotationMode::Automatic {
            chosen = nms_filter(&chosen, config.nms_threshold)?;
        }
        let mut mask = BinaryMask::new(image.width, image.height);
        for p in &chosen {
            mask.union_with(&p.mask)?;
        }
        let predicted_iou = if chosen.is_empty() {
            0.0
        } else {
            chosen.iter().map(|p| p.predicted_iou).sum::<f64>() / chosen.len() as f64
        };
        records.push(AnnotationRecord {
            sample_id: id.clone(),
            mask,
            prompts,
            mode,
            predicted_iou,
            annotator: SIMULATOR_ANNOTATOR.to_string(),
            created_at: Utc::now(),
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from_rc(w: u32, h: u32, fg: &[(u32, u32)]) -> BinaryMask {
        let mut m = BinaryMask::new(w, h);
        for &(r, c) in fg {
            m.set(c, r, true);
        }
        m
    }

    fn proposal(mask: BinaryMask, score: f64) -> MaskProposal {
        MaskProposal {
            mask,
            predicted_iou: score,
            source_prompt: Prompt::point(0.0, 0.0),
        }
    }

    #[test]
    fn centroid_tie_breaks_row_major() {
        let m = mask_from_rc(6, 6, &[(2, 2), (2, 3), (3, 2), (3, 3)]);
        assert_eq!(point_prompt_from_mask(&m).unwrap().point, Some([2.0, 2.0]));
    }

    #[test]
    fn single_pixel_point() {
        let m = mask_from_rc(10, 10, &[(7, 7)]);
        assert_eq!(point_prompt_from_mask(&m).unwrap().point, Some([7.0, 7.0]));
    }

    #[test]
    fn hollow_square_snaps_to_top_edge() {
        let m = BinaryMask::from_fn(5, 5, |x, y| x == 0 || y == 0 || x == 4 || y == 4);
        // (row 0, col 2) -> x = 2, y = 0
        assert_eq!(point_prompt_from_mask(&m).unwrap().point, Some([2.0, 0.0]));
    }

    #[test]
    fn empty_mask_prompts_fail() {
        let m = BinaryMask::new(3, 3);
        assert!(matches!(point_prompt_from_mask(&m), Err(Error::EmptyMask)));
        assert!(matches!(box_prompt_from_mask(&m), Err(Error::EmptyMask)));
    }

    #[test]
    fn box_examples() {
        let m = BinaryMask::from_fn(10, 10, |x, y| (2..=5).contains(&y) && (3..=7).contains(&x));
        assert_eq!(box_prompt_from_mask(&m).unwrap().bbox, Some([3.0, 2.0, 8.0, 6.0]));
        let m = mask_from_rc(4, 4, &[(0, 0)]);
        assert_eq!(box_prompt_from_mask(&m).unwrap().bbox, Some([0.0, 0.0, 1.0, 1.0]));
        let m = BinaryMask::filled(4, 4, true);
        assert_eq!(box_prompt_from_mask(&m).unwrap().bbox, Some([0.0, 0.0, 4.0, 4.0]));
    }

    #[test]
    fn grid_examples() {
        let pts: Vec<_> = auto_grid_prompts(100, 100, 2).iter().map(|p| p.point.unwrap()).collect();
        assert_eq!(pts, vec![[25.0, 25.0], [75.0, 25.0], [25.0, 75.0], [75.0, 75.0]]);
        assert_eq!(auto_grid_prompts(10, 10, 1)[0].point, Some([5.0, 5.0]));
        assert_eq!(auto_grid_prompts(64, 64, 32).len(), 1024);
        assert!(auto_grid_prompts(64, 64, 32).iter().all(|p| p.kind == PromptKind::AutoGridPoint));
    }

    #[test]
    fn best_proposal_examples() {
        let m = BinaryMask::new(1, 1);
        let ps: Vec<_> = [0.3, 0.9, 0.5].iter().map(|&s| proposal(m.clone(), s)).collect();
        assert_eq!(best_proposal_index(&ps).unwrap(), 1);
        let ps: Vec<_> = [0.7, 0.7, 0.2].iter().map(|&s| proposal(m.clone(), s)).collect();
        assert_eq!(best_proposal_index(&ps).unwrap(), 0);
        assert_eq!(best_proposal_index(&ps[2..]).unwrap(), 0);
        assert!(matches!(best_proposal_index(&[]), Err(Error::EmptyList)));
    }

    #[test]
    fn nms_examples() {
        let a = BinaryMask::from_fn(4, 4, |x, _| x < 2);
        let b = a.complement();
        let same = nms_filter(&[proposal(a.clone(), 0.8), proposal(a.clone(), 0.9)], 0.7).unwrap();
        assert_eq!(same.len(), 1);
        assert_eq!(same[0].predicted_iou, 0.9);
        let disjoint = nms_filter(&[proposal(a, 0.1), proposal(b, 0.2)], 0.7).unwrap();
        assert_eq!(disjoint.len(), 2);
        assert!(nms_filter(&[], 1.5).is_err());
    }

    #[test]
    fn prompt_validation() {
        assert!(matches!(Prompt::point(-1.0, 5.0).validate(10, 10), Err(Error::InvalidPrompt(_))));
        assert!(Prompt::point(9.5, 0.0).validate(10, 10).is_ok());
        assert!(Prompt::bbox(0.0, 0.0, 10.0, 10.0).validate(10, 10).is_ok());
        assert!(Prompt::bbox(3.0, 0.0, 3.0, 4.0).validate(10, 10).is_err());
        assert!(Prompt::bbox(0.0, 0.0, 11.0, 4.0).validate(10, 10).is_err());
        let mut mixed = Prompt::bbox(0.0, 0.0, 1.0, 1.0);
        mixed.point = Some([0.0, 0.0]);
        assert!(mixed.validate(10, 10).is_err());
    }

    #[test]
    fn prompt_wire_format() {
        let json = serde_json::to_string(&Prompt::bbox(1.0, 2.0, 3.0, 4.0)).unwrap();
        assert_eq!(json, r#"{"kind":"box","box":[1.0,2.0,3.0,4.0]}"#);
        let p: Prompt = serde_json::from_str(r#"{"kind":"point","point":[3,4]}"#).unwrap();
        assert_eq!(p.point, Some([3.0, 4.0]));
    }

    #[test]
    fn log_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let log = AnnotationLog::open(dir.path().join("ann/log.jsonl")).unwrap();
        let rec = AnnotationRecord {
            sample_id: "a/b".into(),
            mask: BinaryMask::from_fn(5, 4, |x, y| x > y),
            prompts: vec![Prompt::bbox(0.0, 0.0, 5.0, 4.0)],
            mode: AnnotationMode::Box,
            predicted_iou: 0.5,
            annotator: SIMULATOR_ANNOTATOR.into(),
            created_at: Utc::now(),
        };
        log.append(&rec, None).unwrap();
        let meta = CommitMeta {
            session_id: "s".into(),
            nonce: "n".into(),
        };
        log.append(&rec, Some(meta.clone())).unwrap();
        let reopened = AnnotationLog::open(log.path()).unwrap();
        let all = reopened.read_all().unwrap();
        assert_eq!(all.len(), 2);
        assert_eq!(all[0].0, rec);
        assert_eq!(all[1].1, Some(meta));
    }
}
