//! Detection matching, precision/recall, average precision (formula-literal
//! and 101-point interpolated), mAP and confusion matrices.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::anchors::{iou, Label};
use crate::error::{Error, Result};
use crate::postprocess::{rank_cmp, Detection};

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Score threshold used when reporting precision, recall and the confusion matrix.
pub const REPORT_CONFIDENCE: f64 = 0.25;

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// Per prediction, in input order: true positive?
    pub tp: Vec<bool>,
    /// Per prediction: index of the matched ground truth.
    pub matched_gt: Vec<Option<usize>>,
    pub unmatched_gt: usize,
}

/// Greedy matching of score-sorted predictions: each takes the unmatched
/// same-category ground truth of highest IoU, provided IoU ≥ threshold.
pub fn match_detections(preds: &[Detection], gts: &[Label], iou_threshold: f64) -> MatchResult {
    let mut used = vec![false; gts.len()];
    let mut matched_gt = Vec::with_capacity(preds.len());
    for p in preds {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if used[g] || gt.category != p.category {
                continue;
            }
            let v = iou(&p.bbox, &gt.bbox);
            if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            used[g] = true;
        }
        matched_gt.push(best.map(|(g, _)| g));
    }
    MatchResult {
        tp: matched_gt.iter().map(Option::is_some).collect(),
        unmatched_gt: used.iter().filter(|u| !**u).count(),
        matched_gt,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrSeries {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    /// Set when there are no positives; recall is then reported as 0.
    pub recall_undefined: bool,
}

/// Cumulative precision and recall at every rank.
pub fn precision_recall(flags: &[bool], n_pos: usize) -> PrSeries {
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(flags.len());
    let mut recall = Vec::with_capacity(flags.len());
    for (r, &f) in flags.iter().enumerate() {
        tp += f as usize;
        precision.push(tp as f64 / (r + 1) as f64);
        recall.push(if n_pos == 0 {
            0.0
        } else {
            tp as f64 / n_pos as f64
        });
    }
    PrSeries {
        precision,
        recall,
        recall_undefined: n_pos == 0,
    }
}

/// `(1/n_pos) Σ_{r=1..n_pos} precision(r)·recall(r)` over ranked detections;
/// ranks beyond the list contribute zero.
pub fn ap_paper(flags: &[bool], n_pos: usize) -> f64 {
    if n_pos == 0 {
        return 0.0;
    }
    let pr = precision_recall(flags, n_pos);
    let sum: f64 = (0..n_pos.min(flags.len()))
        .map(|r| pr.precision[r] * pr.recall[r])
        .sum();
    sum / n_pos as f64
}

/// Mean over recall points `{0, 0.01, …, 1}` of the best precision reached at
/// recall ≥ the point (zero when never reached).
pub fn ap_interp(precision: &[f64], recall: &[f64]) -> f64 {
    if precision.is_empty() {
        return 0.0;
    }
    // suffix maximum of precision; recall is non-decreasing along the list
    let mut envelope = precision.to_vec();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut sum = 0.0;
    let mut j = 0;
    for g in 0..=100 {
        let point = g as f64 / 100.0;
        while j < recall.len() && recall[j] < point {
            j += 1;
        }
        if j < recall.len() {
            sum += envelope[j];
        }
    }
    sum / 101.0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ApMode {
    Paper,
    Interp,
}

impl FromStr for ApMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(ApMode::Paper),
            "interp" => Ok(ApMode::Interp),
            other => Err(Error::Config(format!(
                "unknown AP mode {other:?} (expected paper or interp)"
            ))),
        }
    }
}

/// Detections and ground truth of one image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImageResult {
    pub detections: Vec<Detection>,
    pub labels: Vec<Label>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CategoryMetrics {
    pub category: usize,
    pub n_gt: usize,
    pub n_pred: usize,
    pub precision: f64,
    pub recall: f64,
    pub ap50: f64,
    pub ap5095: f64,
    /// False when the category has neither ground truth nor predictions.
    pub included: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub ap_mode: ApMode,
    pub categories: Vec<CategoryMetrics>,
    pub map50: f64,
    pub map5095: f64,
    pub confusion: ConfusionMatrix,
    pub notes: Vec<String>,
}

fn ranked(dets: &[Detection]) -> Vec<Detection> {
    let mut d = dets.to_vec();
    d.sort_by(rank_cmp);
    d
}

/// Ranked `(score, tp)` pairs of one category across images at one IoU threshold.
fn category_flags(images: &[ImageResult], category: usize, thr: f64) -> (Vec<bool>, usize) {
    let mut scored: Vec<(Detection, usize, bool)> = Vec::new();
    let mut n_pos = 0;
    for (i, img) in images.iter().enumerate() {
        let preds: Vec<Detection> = ranked(&img.detections)
            .into_iter()
            .filter(|d| d.category == category)
            .collect();
        let gts: Vec<Label> = img
            .labels
            .iter()
            .filter(|l| l.category == category)
            .copied()
            .collect();
        n_pos += gts.len();
        let m = match_detections(&preds, &gts, thr);
        scored.extend(preds.into_iter().zip(m.tp).map(|(d, tp)| (d, i, tp)));
    }
    scored.sort_by(|a, b| rank_cmp(&a.0, &b.0).then(a.1.cmp(&b.1)));
    (scored.into_iter().map(|(_, _, tp)| tp).collect(), n_pos)
}

/// Precision and recall over detections scoring at least `conf`.
fn operating_point(images: &[ImageResult], category: usize, conf: f64) -> (f64, f64) {
    let filtered: Vec<ImageResult> = images
        .iter()
        .map(|img| ImageResult {
            detections: img
                .detections
                .iter()
                .filter(|d| d.score >= conf)
                .copied()
                .collect(),
            labels: img.labels.clone(),
        })
        .collect();
    let (flags, n_pos) = category_flags(&filtered, category, 0.5);
    let tp = flags.iter().filter(|f| **f).count();
    let precision = if flags.is_empty() {
        0.0
    } else {
        tp as f64 / flags.len() as f64
    };
    let recall = if n_pos == 0 {
        0.0
    } else {
        tp as f64 / n_pos as f64
    };
    (precision, recall)
}

/// Per-category and mean metrics. AP@50 uses `mode`; AP@50-95 is always
/// interpolated. Categories with no ground truth and no predictions are left
/// out of the means.
pub fn evaluate(images: &[ImageResult], n_categories: usize, mode: ApMode) -> MetricsReport {
    let thresholds = coco_thresholds();
    let mut categories = Vec::with_capacity(n_categories);
    let mut notes = Vec::new();
    for c in 0..n_categories {
        let n_gt: usize = images
            .iter()
            .map(|i| i.labels.iter().filter(|l| l.category == c).count())
            .sum();
        let n_pred: usize = images
            .iter()
            .map(|i| i.detections.iter().filter(|d| d.category == c).count())
            .sum();
        let included = n_gt > 0 || n_pred > 0;
        if !included {
            notes.push(format!(
                "category {c} has no ground truth and no predictions; excluded from mAP"
            ));
        } else if n_gt == 0 {
            notes.push(format!(
                "category {c} has no ground truth; recall undefined, AP = 0"
            ));
        }
        let ap_at = |thr: f64, mode: ApMode| {
            let (flags, n_pos) = category_flags(images, c, thr);
            match mode {
                ApMode::Paper => ap_paper(&flags, n_pos),
                ApMode::Interp => {
                    if n_pos == 0 {
                        0.0
                    } else {
                        let pr = precision_recall(&flags, n_pos);
                        ap_interp(&pr.precision, &pr.recall)
                    }
                }
            }
        };
        let ap50 = ap_at(0.5, mode);
        let ap5095 = thresholds
            .iter()
            .map(|&t| ap_at(t, ApMode::Interp))
            .sum::<f64>()
            / thresholds.len() as f64;
        let (precision, recall) = operating_point(images, c, REPORT_CONFIDENCE);
        categories.push(CategoryMetrics {
            category: c,
            n_gt,
            n_pred,
            precision,
            recall,
            ap50,
            ap5095,
            included,
        });
    }
    let used: Vec<&CategoryMetrics> = categories.iter().filter(|c| c.included).collect();
    let mean = |f: fn(&CategoryMetrics) -> f64| {
        if used.is_empty() {
            0.0
        } else {
            used.iter().map(|c| f(c)).sum::<f64>() / used.len() as f64
        }
    };
    let map50 = mean(|c| c.ap50);
    let map5095 = mean(|c| c.ap5095);
    MetricsReport {
        ap_mode: mode,
        map50,
        map5095,
        confusion: confusion_matrix(images, n_categories, 0.5, REPORT_CONFIDENCE),
        categories,
        notes,
    }
}

impl MetricsReport {
    /// `category,precision,recall,ap50,ap5095` rows plus `mAP50` and `mAP5095` summaries.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("category,precision,recall,ap50,ap5095\n");
        for c in &self.categories {
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{:.6},{:.6}",
                c.category, c.precision, c.recall, c.ap50, c.ap5095
            );
        }
        let _ = writeln!(s, "mAP50,,,{:.6},", self.map50);
        let _ = writeln!(s, "mAP5095,,,,{:.6}", self.map5095);
        s
    }

    pub fn mean_precision(&self) -> f64 {
        let used: Vec<_> = self.categories.iter().filter(|c| c.included).collect();
        if used.is_empty() {
            0.0
        } else {
            used.iter().map(|c| c.precision).sum::<f64>() / used.len() as f64
        }
    }

    pub fn mean_recall(&self) -> f64 {
        let used: Vec<_> = self.categories.iter().filter(|c| c.included).collect();
        if used.is_empty() {
            0.0
        } else {
            used.iter().map(|c| c.recall).sum::<f64>() / used.len() as f64
        }
    }
}

/// Counts indexed `[ground truth][prediction]`; the last row and column stand
/// for background (unmatched predictions and missed objects respectively).
#[derive(Clone, Debug, PartialEq)]
pub struct ConfusionMatrix {
    pub n_categories: usize,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn background(&self) -> usize {
        self.n_categories
    }

    /// Each row divided by its total (rows with no entries stay zero).
    pub fn normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let t: u64 = row.iter().sum();
                row.iter()
                    .map(|&v| if t == 0 { 0.0 } else { v as f64 / t as f64 })
                    .collect()
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let n = self.n_categories;
        let name = |i: usize| {
            if i == n {
                "background".to_string()
            } else {
                i.to_string()
            }
        };
        let mut s = String::from("gt\\pred");
        for j in 0..=n {
            let _ = write!(s, ",{}", name(j));
        }
        s.push('\n');
        for (i, row) in self.counts.iter().enumerate() {
            s.push_str(&name(i));
            for v in row {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }
}

/// Same-category greedy matching fills the diagonal; leftover predictions
/// then match leftover objects of other categories (IoU ≥ threshold) for the
/// off-diagonal cells; whatever remains goes to background.
pub fn confusion_matrix(
    images: &[ImageResult],
    n_categories: usize,
    iou_threshold: f64,
    conf_threshold: f64,
) -> ConfusionMatrix {
    let bg = n_categories;
    let mut counts = vec![vec![0u64; n_categories + 1]; n_categories + 1];
    for img in images {
        let preds: Vec<Detection> = ranked(&img.detections)
            .into_iter()
            .filter(|d| d.score >= conf_threshold && d.category < n_categories)
            .collect();
        let mut gt_used = vec![false; img.labels.len()];
        let mut pred_used = vec![false; preds.len()];
        for (c, row) in counts.iter_mut().enumerate().take(n_categories) {
            let pi: Vec<usize> = (0..preds.len())
                .filter(|&i| preds[i].category == c)
                .collect();
            let gi: Vec<usize> = (0..img.labels.len())
                .filter(|&g| img.labels[g].category == c)
                .collect();
            let p: Vec<Detection> = pi.iter().map(|&i| preds[i]).collect();
            let g: Vec<Label> = gi.iter().map(|&i| img.labels[i]).collect();
            let m = match_detections(&p, &g, iou_threshold);
            for (k, mg) in m.matched_gt.iter().enumerate() {
                if let Some(j) = mg {
                    pred_used[pi[k]] = true;
                    gt_used[gi[*j]] = true;
                    row[c] += 1;
                }
            }
        }
        for (i, p) in preds.iter().enumerate() {
            if pred_used[i] {
                continue;
            }
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in img.labels.iter().enumerate() {
                if gt_used[g] || gt.category >= n_categories {
                    continue;
                }
                let v = iou(&p.bbox, &gt.bbox);
                if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            if let Some((g, _)) = best {
                gt_used[g] = true;
                pred_used[i] = true;
                counts[img.labels[g].category][p.category] += 1;
            } else {
                counts[bg][p.category] += 1;
            }
        }
        for (g, gt) in img.labels.iter().enumerate() {
            if !gt_used[g] && gt.category < n_categories {
                counts[gt.category][bg] += 1;
            }
        }
    }
    ConfusionMatrix {
        n_categories,
        counts,
    }
}
