//! Segmentation metrics: IoU, oIoU, mIoU, precision at IoU thresholds and
//! pixel-level precision/recall curves.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// IoU thresholds reported as `P@t`.
pub const PRECISION_THRESHOLDS: [f64; 5] = [0.5, 0.6, 0.7, 0.8, 0.9];

/// Integer pixel counts of one prediction/ground-truth pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Overlap {
    pub intersection: u64,
    pub union: u64,
}

impl Overlap {
    pub fn of(pred: &[bool], gt: &[bool]) -> Result<Self> {
        if pred.len() != gt.len() {
            return Err(Error::Shape(format!("prediction has {} pixels, ground truth {}", pred.len(), gt.len())));
        }
        let mut o = Overlap::default();
        for (&p, &t) in pred.iter().zip(gt) {
            o.intersection += u64::from(p && t);
            o.union += u64::from(p || t);
        }
        Ok(o)
    }

    /// Empty union counts as a perfect match.
    pub fn iou(&self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }
}

pub fn iou(pred: &[bool], gt: &[bool]) -> Result<f64> {
    Ok(Overlap::of(pred, gt)?.iou())
}

/// One point of a precision/recall curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub oiou: f64,
    pub miou: f64,
    /// `(t, fraction of samples with IoU > t)` for [`PRECISION_THRESHOLDS`].
    pub precision_at: Vec<(f64, f64)>,
    /// Empty unless probability maps were supplied.
    pub pr_curve: Vec<PrPoint>,
    pub sample_ious: Vec<f64>,
}

/// Scores binary predictions against ground truth.
pub fn evaluate(predictions: &[Vec<bool>], gts: &[Vec<bool>]) -> Result<EvalReport> {
    if predictions.is_empty() {
        return Err(Error::Usage("cannot evaluate an empty prediction list".into()));
    }
    if predictions.len() != gts.len() {
        return Err(Error::Shape(format!("{} predictions vs {} ground-truth masks", predictions.len(), gts.len())));
    }
    let overlaps = predictions.iter().zip(gts).map(|(p, t)| Overlap::of(p, t)).collect::<Result<Vec<_>>>()?;
    let inter: u64 = overlaps.iter().map(|o| o.intersection).sum();
    let union: u64 = overlaps.iter().map(|o| o.union).sum();
    let oiou = Overlap { intersection: inter, union }.iou();
    let sample_ious: Vec<f64> = overlaps.iter().map(Overlap::iou).collect();
    let miou = sample_ious.iter().sum::<f64>() / sample_ious.len() as f64;
    let precision_at = PRECISION_THRESHOLDS
        .iter()
        .map(|&t| {
            let hits = sample_ious.iter().filter(|&&v| v > t).count();
            (t, hits as f64 / sample_ious.len() as f64)
        })
        .collect();
    Ok(EvalReport { oiou, miou, precision_at, pr_curve: Vec::new(), sample_ious })
}

/// Like [`evaluate`] but from probability maps: masks are `p > 0.5` and the
/// PR curve is attached.
pub fn evaluate_probabilities(prob_maps: &[Vec<f64>], gts: &[Vec<bool>], num_thresholds: usize) -> Result<EvalReport> {
    let preds: Vec<Vec<bool>> = prob_maps.iter().map(|m| m.iter().map(|&p| p > 0.5).collect()).collect();
    let mut report = evaluate(&preds, gts)?;
    report.pr_curve = pr_curve(prob_maps, gts, num_thresholds)?;
    Ok(report)
}

/// Pixel-level (micro-averaged) PR curve at `num_thresholds` evenly spaced
/// thresholds in `[0, 1]`. A pixel is predicted positive when `p >= t`.
pub fn pr_curve(prob_maps: &[Vec<f64>], gts: &[Vec<bool>], num_thresholds: usize) -> Result<Vec<PrPoint>> {
    if prob_maps.len() != gts.len() {
        return Err(Error::Shape(format!("{} probability maps vs {} ground-truth masks", prob_maps.len(), gts.len())));
    }
    if num_thresholds < 2 {
        return Err(Error::Usage("a PR curve needs at least two thresholds".into()));
    }
    for (m, t) in prob_maps.iter().zip(gts) {
        if m.len() != t.len() {
            return Err(Error::Shape(format!("probability map has {} pixels, ground truth {}", m.len(), t.len())));
        }
        if m.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Data("probabilities must lie in [0, 1]".into()));
        }
    }
    let positives: u64 = gts.iter().flatten().map(|&y| u64::from(y)).sum();
    Ok((0..num_thresholds)
        .map(|k| {
            let t = k as f64 / (num_thresholds - 1) as f64;
            let (mut tp, mut fp) = (0u64, 0u64);
            for (m, g) in prob_maps.iter().zip(gts) {
                for (&p, &y) in m.iter().zip(g) {
                    if p >= t {
                        if y {
                            tp += 1;
                        } else {
                            fp += 1;
                        }
                    }
                }
            }
            let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
            let recall = if positives == 0 { 1.0 } else { tp as f64 / positives as f64 };
            PrPoint { threshold: t, precision, recall }
        })
        .collect())
}

/// Area under the PR curve by the trapezoid rule over recall. The curve is
/// extended flat to recall 0 from its lowest-recall point.
pub fn pr_auc(curve: &[PrPoint]) -> f64 {
    let mut pts: Vec<(f64, f64)> = curve.iter().map(|p| (p.recall, p.precision)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    if let Some(&(r, p)) = pts.first() {
        if r > 0.0 {
            pts.insert(0, (0.0, p));
        }
    }
    pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum()
}

impl EvalReport {
    pub fn precision(&self, t: f64) -> Option<f64> {
        self.precision_at.iter().find(|(k, _)| (k - t).abs() < 1e-12).map(|&(_, v)| v)
    }

    /// Human-readable summary.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "samples  {}", self.sample_ious.len());
        let _ = writeln!(s, "oIoU     {:.4}", self.oiou);
        let _ = writeln!(s, "mIoU     {:.4}", self.miou);
        for (t, v) in &self.precision_at {
            let _ = writeln!(s, "P@{t:.1}    {v:.4}");
        }
        if !self.pr_curve.is_empty() {
            let _ = writeln!(s, "PR-AUC   {:.4}  (pixel-level, micro-averaged)", pr_auc(&self.pr_curve));
        }
        s
    }

    /// Machine-readable `key = value` lines.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "samples = {}", self.sample_ious.len());
        let _ = writeln!(s, "oiou = {:?}", self.oiou);
        let _ = writeln!(s, "miou = {:?}", self.miou);
        for (t, v) in &self.precision_at {
            let _ = writeln!(s, "p_at_{:.1} = {v:?}", t);
        }
        if !self.pr_curve.is_empty() {
            let _ = writeln!(s, "pr_auc = {:?}", pr_auc(&self.pr_curve));
        }
        let ious: Vec<String> = self.sample_ious.iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(s, "sample_ious = {}", ious.join(","));
        s
    }
}

/// `threshold,precision,recall` rows with a header.
pub fn pr_curve_csv(curve: &[PrPoint]) -> String {
    let mut s = String::from("threshold,precision,recall\n");
    for p in curve {
        let _ = writeln!(s, "{:?},{:?},{:?}", p.threshold, p.precision, p.recall);
    }
    s
}
