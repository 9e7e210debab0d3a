//! Pixel metrics with foreground as the positive class.
//!
//! Division conventions: precision and recall are 0 for 0/0, F1 is 0 when
//! precision + recall is 0, and an IoU with an empty union is 1.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Manifest, Split};
use crate::decoder::{binarize, DecoderParams};
use crate::error::{Error, Result};
use crate::gateway::EmbeddingSource;
use crate::mask::BinaryMask;

pub const MIOU_DEFINITION: &str = "miou_def=two_class_pixel";
pub const ACCURACY_DEFINITION: &str = "accuracy_def=pixel";
pub const DEFAULT_TAU: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        Self { tp, fp, fn_, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Counts with background as the positive class.
    pub fn swapped(&self) -> Self {
        Self {
            tp: self.tn,
            fp: self.fn_,
            fn_: self.fp,
            tn: self.tp,
        }
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self::new(self.tp + o.tp, self.fp + o.fp, self.fn_ + o.fn_, self.tn + o.tn)
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |a, b| a + b)
    }
}

pub fn confusion_counts(pred: &BinaryMask, gt: &BinaryMask) -> Result<ConfusionCounts> {
    if pred.dims() != gt.dims() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MicroMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
}

pub fn micro_metrics(c: &ConfusionCounts) -> MicroMetrics {
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    MicroMetrics {
        precision,
        recall,
        f1: f1(precision, recall),
        accuracy: ratio(c.tp + c.tn, c.total()),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacroMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Unweighted mean of the foreground-positive and background-positive scores.
pub fn macro_metrics(c: &ConfusionCounts) -> MacroMetrics {
    let fg = micro_metrics(c);
    let bg = micro_metrics(&c.swapped());
    MacroMetrics {
        precision: (fg.precision + bg.precision) / 2.0,
        recall: (fg.recall + bg.recall) / 2.0,
        f1: (fg.f1 + bg.f1) / 2.0,
    }
}

fn class_iou(tp: u64, fp: u64, fn_: u64) -> f64 {
    let union = tp + fp + fn_;
    if union == 0 {
        1.0
    } else {
        tp as f64 / union as f64
    }
}

/// Mean of foreground and background IoU.
pub fn miou(c: &ConfusionCounts) -> f64 {
    (class_iou(c.tp, c.fp, c.fn_) + class_iou(c.tn, c.fn_, c.fp)) / 2.0
}

/// Foreground IoU of one image; 1 when both masks are empty.
pub fn image_iou(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let c = confusion_counts(pred, gt)?;
    Ok(class_iou(c.tp, c.fp, c.fn_))
}

pub fn mean_image_iou<'a>(pairs: impl IntoIterator<Item = (&'a BinaryMask, &'a BinaryMask)>) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for (p, g) in pairs {
        sum += image_iou(p, g)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyList);
    }
    Ok(sum / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub id: String,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub micro_precision: f64,
    pub micro_recall: f64,
    pub micro_f1: f64,
    pub accuracy: f64,
    pub miou: f64,
    pub mean_image_iou: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub counts: ConfusionCounts,
    pub per_image: Vec<ImageScore>,
    pub definitions: Vec<String>,
}

impl MetricsReport {
    /// Pooled-pixel report over `(id, prediction, ground truth)` triples.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a BinaryMask, &'a BinaryMask)>) -> Result<Self> {
        let mut counts = ConfusionCounts::default();
        let mut per_image = Vec::new();
        for (id, pred, gt) in pairs {
            let c = confusion_counts(pred, gt)?;
            counts = counts + c;
            per_image.push(ImageScore {
                id: id.to_string(),
                iou: class_iou(c.tp, c.fp, c.fn_),
            });
        }
        Self::from_counts(counts, per_image)
    }

    pub fn from_counts(counts: ConfusionCounts, per_image: Vec<ImageScore>) -> Result<Self> {
        if per_image.is_empty() {
            return Err(Error::EmptyList);
        }
        let micro = micro_metrics(&counts);
        let macro_ = macro_metrics(&counts);
        let mean_image_iou = per_image.iter().map(|s| s.iou).sum::<f64>() / per_image.len() as f64;
        Ok(Self {
            micro_precision: micro.precision,
            micro_recall: micro.recall,
            micro_f1: micro.f1,
            accuracy: micro.accuracy,
            miou: miou(&counts),
            mean_image_iou,
            macro_precision: macro_.precision,
            macro_recall: macro_.recall,
            macro_f1: macro_.f1,
            counts,
            per_image,
            definitions: vec![MIOU_DEFINITION.into(), ACCURACY_DEFINITION.into()],
        })
    }
}

/// Decoder predictions over every sample of `split`, binarised at `tau` and
/// compared with ground truth at the ground truth's resolution.
pub fn evaluate_model(
    params: &DecoderParams,
    manifest: &Manifest,
    embeddings: &dyn EmbeddingSource,
    split: Split,
    tau: f64,
) -> Result<MetricsReport> {
    let ids = manifest.ids(split);
    if ids.is_empty() {
        return Err(Error::EmptyList);
    }
    let scored: Vec<(String, ConfusionCounts)> = ids
        .par_iter()
        .map(|id| {
            let sample = manifest.get(id).ok_or_else(|| Error::UnknownSample(id.clone()))?;
            let gt = manifest.load_gt(sample)?;
            let embedding = embeddings.embedding(id)?;
            let mut pred = binarize(&params.forward(&embedding)?, tau);
            if pred.dims() != gt.dims() {
                pred = pred.resize_nearest(gt.width(), gt.height());
            }
            Ok((id.clone(), confusion_counts(&pred, &gt)?))
        })
        .collect::<Result<_>>()?;
    let counts = scored.iter().map(|(_, c)| *c).sum();
    let per_image = scored
        .into_iter()
        .map(|(id, c)| ImageScore {
            id,
            iou: class_iou(c.tp, c.fp, c.fn_),
        })
        .collect();
    MetricsReport::from_counts(counts, per_image)
}

/// A row of published comparison numbers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ReferenceRow {
    pub name: &'static str,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
}

pub const REFERENCE_DISTILLED_5: ReferenceRow = ReferenceRow {
    name: "distilled decoder, 5 samples (published)",
    macro_f1: 0.86,
    accuracy: 0.96,
    macro_precision: 0.89,
    macro_recall: 0.93,
};

pub const REFERENCE_MASK_RCNN: ReferenceRow = ReferenceRow {
    name: "Mask R-CNN baseline (published)",
    macro_f1: 0.811,
    accuracy: 0.774,
    macro_precision: 0.952,
    macro_recall: 0.706,
};

/// Plain-text table placing a report beside the published rows.
pub fn comparison_table(label: &str, report: &MetricsReport) -> String {
    let mut out = String::new();
    writeln!(out, "{:<44} {:>8} {:>8} {:>8} {:>8}", "model", "macro_f1", "accuracy", "macro_p", "macro_r").unwrap();
    let mut row = |name: &str, f: f64, a: f64, p: f64, r: f64| {
        writeln!(out, "{name:<44} {f:>8.3} {a:>8.3} {p:>8.3} {r:>8.3}").unwrap();
    };
    row(label, report.macro_f1, report.accuracy, report.macro_precision, report.macro_recall);
    for r in [REFERENCE_DISTILLED_5, REFERENCE_MASK_RCNN] {
        row(r.name, r.macro_f1, r.accuracy, r.macro_precision, r.macro_recall);
    }
    writeln!(
        out,
        "note: metric basis may differ; this run reports pooled pixel metrics ({ACCURACY_DEFINITION}, {MIOU_DEFINITION})"
    )
    .unwrap();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn block(rows: std::ops::Range<u32>, cols: std::ops::Range<u32>) -> BinaryMask {
        BinaryMask::from_fn(4, 4, |x, y| rows.contains(&y) && cols.contains(&x))
    }

    #[test]
    fn hand_counted_case() {
        let gt = block(0..2, 0..2);
        let pred = block(0..2, 1..3);
        let c = confusion_counts(&pred, &gt).unwrap();
        assert_eq!(c, ConfusionCounts::new(2, 2, 2, 10));
        let m = micro_metrics(&c);
        assert_eq!((m.precision, m.recall, m.f1, m.accuracy), (0.5, 0.5, 0.5, 0.75));
        let mac = macro_metrics(&c);
        assert!((mac.precision - (0.5 + 10.0 / 12.0) / 2.0).abs() < 1e-15);
        assert!((mac.precision - 0.6667).abs() < 1e-4);
        assert!((miou(&c) - (2.0 / 6.0 + 10.0 / 14.0) / 2.0).abs() < 1e-15);
        assert!((miou(&c) - 0.5238).abs() < 1e-4);
        assert!((image_iou(&pred, &gt).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn conventions() {
        let empty = BinaryMask::new(3, 3);
        let full = BinaryMask::filled(3, 3, true);
        let c = confusion_counts(&empty, &empty).unwrap();
        assert_eq!(c, ConfusionCounts::new(0, 0, 0, 9));
        assert_eq!(miou(&c), 1.0);
        assert_eq!(image_iou(&empty, &empty).unwrap(), 1.0);

        let m = micro_metrics(&ConfusionCounts::new(0, 0, 3, 1));
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));

        let c = confusion_counts(&full, &full).unwrap();
        let mac = macro_metrics(&c);
        assert_eq!(mac.f1, 0.5);
        let perfect = micro_metrics(&c);
        assert_eq!((perfect.precision, perfect.recall, perfect.f1, perfect.accuracy), (1.0, 1.0, 1.0, 1.0));
        assert!(confusion_counts(&full, &BinaryMask::new(2, 2)).is_err());
    }

    #[test]
    fn report_is_order_invariant() {
        let masks: Vec<BinaryMask> = (0..4).map(|i| BinaryMask::from_fn(5, 5, |x, y| (x + y * i) % 3 == 0)).collect();
        let ids = ["a", "b", "c", "d"];
        let forward: Vec<_> = (0..4).map(|i| (ids[i], &masks[i], &masks[(i + 1) % 4])).collect();
        let mut backward = forward.clone();
        backward.reverse();
        let a = MetricsReport::from_pairs(forward).unwrap();
        let b = MetricsReport::from_pairs(backward).unwrap();
        assert_eq!(a.counts, b.counts);
        assert_eq!(a.micro_f1, b.micro_f1);
        assert!((a.mean_image_iou - b.mean_image_iou).abs() < 1e-15);
        assert!(a.definitions.iter().any(|d| d == MIOU_DEFINITION));
    }

    #[test]
    fn comparison_table_carries_caveat() {
        let m = BinaryMask::filled(2, 2, true);
        let r = MetricsReport::from_pairs([("x", &m, &m)]).unwrap();
        let t = comparison_table("ours", &r);
        assert!(t.contains("metric basis may differ"));
        assert!(t.contains("0.811"));
    }
}
