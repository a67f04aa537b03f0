//! Independent reference implementations used as test oracles.

#![allow(dead_code)]

use std::cmp::Ordering;

use adahead_core::anchors::BoxN;
use adahead_core::postprocess::Detection;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// IoU from corner coordinates, written without the library helpers.
pub fn iou_oracle(a: &BoxN, b: &BoxN) -> f64 {
    let (ax0, ay0, ax1, ay1) = (
        a.cx - a.w / 2.0,
        a.cy - a.h / 2.0,
        a.cx + a.w / 2.0,
        a.cy + a.h / 2.0,
    );
    let (bx0, by0, bx1, by1) = (
        b.cx - b.w / 2.0,
        b.cy - b.h / 2.0,
        b.cx + b.w / 2.0,
        b.cy + b.h / 2.0,
    );
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a.w * a.h + b.w * b.h - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn tie_break(a: &Detection, b: &Detection) -> Ordering {
    let ka = [a.bbox.cy, a.bbox.cx, a.bbox.w, a.bbox.h];
    let kb = [b.bbox.cy, b.bbox.cx, b.bbox.w, b.bbox.h];
    for (x, y) in ka.iter().zip(&kb) {
        match x.partial_cmp(y).unwrap() {
            Ordering::Equal => {}
            o => return o,
        }
    }
    a.category.cmp(&b.category)
}

/// Brute-force greedy suppression: repeatedly scan all alive detections for
/// the best one, keep it and kill its same-category overlaps.
pub fn nms_oracle(dets: &[Detection], threshold: f64) -> Vec<usize> {
    let mut alive = vec![true; dets.len()];
    let mut kept = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..dets.len() {
            if !alive[i] {
                continue;
            }
            best = match best {
                None => Some(i),
                Some(b) => {
                    let better = dets[i].score > dets[b].score
                        || (dets[i].score == dets[b].score
                            && tie_break(&dets[i], &dets[b]) == Ordering::Less);
                    Some(if better { i } else { b })
                }
            };
        }
        let Some(b) = best else { break };
        kept.push(b);
        alive[b] = false;
        for j in 0..dets.len() {
            if alive[j]
                && dets[j].category == dets[b].category
                && iou_oracle(&dets[b].bbox, &dets[j].bbox) > threshold
            {
                alive[j] = false;
            }
        }
    }
    kept
}

/// Exhaustive 101-point interpolated AP straight from ranked flags.
pub fn ap_interp_oracle(flags: &[bool], n_pos: usize) -> f64 {
    let mut points = Vec::new();
    let mut tp = 0;
    for (r, &f) in flags.iter().enumerate() {
        tp += f as usize;
        let recall = if n_pos == 0 {
            0.0
        } else {
            tp as f64 / n_pos as f64
        };
        points.push((tp as f64 / (r + 1) as f64, recall));
    }
    let mut sum = 0.0;
    for g in 0..=100 {
        let grid = g as f64 / 100.0;
        let best = points
            .iter()
            .filter(|(_, r)| *r >= grid)
            .map(|(p, _)| *p)
            .fold(0.0, f64::max);
        sum += best;
    }
    sum / 101.0
}

/// Random detections with deliberately coarse scores and boxes so that ties
/// and exact duplicates occur.
pub fn random_detections(rng: &mut ChaCha8Rng, n: usize, categories: usize) -> Vec<Detection> {
    (0..n)
        .map(|_| {
            let score = if rng.gen_bool(0.5) {
                rng.gen_range(1..=10) as f64 / 10.0
            } else {
                rng.gen_range(0.0..1.0)
            };
            let w = rng.gen_range(1..=8) as f64 / 20.0;
            let h = rng.gen_range(1..=8) as f64 / 20.0;
            let cx = rng.gen_range(0..=10) as f64 / 10.0;
            let cy = rng.gen_range(0..=10) as f64 / 10.0;
            Detection::new(rng.gen_range(0..categories), score, BoxN::new(cx, cy, w, h))
        })
        .collect()
}
