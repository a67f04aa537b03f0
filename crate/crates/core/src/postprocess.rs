//! Decoding head outputs into detections, confidence filtering and
//! per-category greedy non-maximum suppression.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::Path;

use crate::anchors::{AnchorSet, BoxN};
use crate::attention::HeadOutput;
use crate::error::{Error, Result};

pub const DEFAULT_CONFIDENCE: f64 = 0.25;
pub const DEFAULT_NMS_IOU: f64 = 0.45;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BoxN,
    pub category: usize,
    pub score: f64,
}

impl Detection {
    pub fn new(category: usize, score: f64, bbox: BoxN) -> Self {
        Self {
            bbox,
            category,
            score,
        }
    }
}

/// Ranking order: score descending, then `(cy, cx, w, h, category)`.
pub fn rank_cmp(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.bbox.canonical_cmp(&b.bbox))
        .then(a.category.cmp(&b.category))
}

/// Detections with `score ≥ threshold`, original order kept.
pub fn filter_confidence(dets: &[Detection], threshold: f64) -> Vec<Detection> {
    dets.iter()
        .filter(|d| d.score >= threshold)
        .copied()
        .collect()
}

/// Greedy per-category suppression. Returns kept indices in rank order;
/// remaining ties fall back to the lower input index.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| rank_cmp(&dets[i], &dets[j]).then(i.cmp(&j)));
    let mut suppressed = vec![false; dets.len()];
    let mut kept = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        kept.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j]
                && dets[j].category == dets[i].category
                && dets[i].bbox.iou(&dets[j].bbox) > iou_threshold
            {
                suppressed[j] = true;
            }
        }
    }
    kept
}

/// One detection per anchor: arg-max category, joint score and the decoded
/// box clipped to the image.
pub fn decode_detections(out: &HeadOutput, anchors: &AnchorSet) -> Vec<Detection> {
    (0..out.n_anchors())
        .map(|a| {
            let bbox = anchors
                .decode(anchors.locate(a), out.box_params[a])
                .clamp_to_image();
            Detection::new(out.best_category(a), out.joint_score[a], bbox)
        })
        .collect()
}

/// Decode, confidence filter, NMS, then keep at most `max_dets` in rank order.
pub fn postprocess(
    out: &HeadOutput,
    anchors: &AnchorSet,
    confidence: f64,
    iou_threshold: f64,
    max_dets: usize,
) -> Vec<Detection> {
    let dets: Vec<Detection> = decode_detections(out, anchors)
        .into_iter()
        .filter(|d| d.score >= confidence && d.bbox.area() > 0.0)
        .collect();
    let mut kept: Vec<Detection> = nms(&dets, iou_threshold)
        .into_iter()
        .map(|i| dets[i])
        .collect();
    kept.truncate(max_dets);
    kept
}

/// `category score cx cy w h` per line, 6 significant digits.
pub fn format_detections(dets: &[Detection]) -> String {
    let mut s = String::new();
    for d in dets {
        let _ = writeln!(
            s,
            "{} {} {} {} {} {}",
            d.category,
            sig6(d.score),
            sig6(d.bbox.cx),
            sig6(d.bbox.cy),
            sig6(d.bbox.w),
            sig6(d.bbox.h)
        );
    }
    s
}

/// Formats with 6 significant digits, `%g` style.
pub fn sig6(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let exp = v.abs().log10().floor() as i32;
    if !(-5..6).contains(&exp) {
        let s = format!("{:.5e}", v);
        return trim_exp(&s);
    }
    let decimals = (5 - exp).max(0) as usize;
    let s = format!("{:.*}", decimals, v);
    trim_zeros(&s)
}

fn trim_zeros(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}

fn trim_exp(s: &str) -> String {
    match s.split_once('e') {
        Some((m, e)) => format!("{}e{}", trim_zeros(m), e),
        None => s.to_string(),
    }
}

pub fn write_detections(path: &Path, dets: &[Detection]) -> Result<()> {
    std::fs::write(path, format_detections(dets)).map_err(|e| Error::io(path, e))
}

/// Parses the output of [`format_detections`].
pub fn parse_detections(path: &Path, text: &str) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg,
        };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 6 {
            return Err(err(format!("expected 6 fields, found {}", f.len())));
        }
        let category = f[0]
            .parse::<usize>()
            .map_err(|e| err(format!("category {:?}: {e}", f[0])))?;
        let mut v = [0.0; 5];
        for (slot, s) in v.iter_mut().zip(&f[1..]) {
            *slot = s.parse::<f64>().map_err(|e| err(format!("{s:?}: {e}")))?;
        }
        out.push(Detection::new(
            category,
            v[0],
            BoxN::new(v[1], v[2], v[3], v[4]),
        ));
    }
    Ok(out)
}
