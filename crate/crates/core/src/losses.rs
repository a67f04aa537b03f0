//! Composite detection objective: class cross-entropy or focal loss with
//! inverse-frequency weights, squared-error box regression, squared no-object
//! confidence, and an optional objectness-quality term.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::anchors::{iou, AnchorSet, Assignment};
use crate::attention::HeadOutput;
use crate::error::{Error, Result};
use crate::ops::logistic;

/// Lower clamp applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

static CLAMP_EVENTS: AtomicU64 = AtomicU64::new(0);

/// Number of times a probability was raised to [`PROB_FLOOR`] since start-up.
pub fn clamp_events() -> u64 {
    CLAMP_EVENTS.load(Ordering::Relaxed)
}

fn clamp_prob(p: f64) -> f64 {
    if p < PROB_FLOOR {
        CLAMP_EVENTS.fetch_add(1, Ordering::Relaxed);
        PROB_FLOOR
    } else {
        p
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda_coord: f64,
    pub lambda_noobj: f64,
    pub gamma: f64,
    /// Per-category focal weights.
    pub alpha: Vec<f64>,
    pub use_focal_cls: bool,
    /// Train positive objectness toward the IoU of the decoded prediction.
    pub objectness_iou: bool,
}

impl LossConfig {
    pub fn new(n_categories: usize) -> Self {
        Self {
            lambda_coord: 5.0,
            lambda_noobj: 0.5,
            gamma: 2.0,
            alpha: vec![1.0; n_categories],
            use_focal_cls: true,
            objectness_iou: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.lambda_coord) || !positive(self.lambda_noobj) {
            return Err(Error::Config("loss weights must be positive".into()));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config("focal gamma must be >= 0".into()));
        }
        if self.alpha.is_empty() || !self.alpha.iter().all(|&a| positive(a)) {
            return Err(Error::Config(
                "focal alpha must be positive per category".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub cls: f64,
    pub coord: f64,
    pub noobj: f64,
    /// Positive-anchor objectness term; zero when disabled.
    pub obj: f64,
    pub total: f64,
}

/// `α_t = Σ w_i / w_t`.
pub fn class_weights(w: &[f64]) -> Result<Vec<f64>> {
    if w.is_empty() {
        return Err(Error::Validation(
            "class weights need at least one category".into(),
        ));
    }
    if let Some(t) = w.iter().position(|&x| !(x > 0.0 && x.is_finite())) {
        return Err(Error::Validation(format!(
            "category {t} has weight {}; weights must be positive (smooth zero counts first)",
            w[t]
        )));
    }
    let sum: f64 = w.iter().sum();
    Ok(w.iter().map(|&x| sum / x).collect())
}

/// `−α (1 − p)^γ log p` with `p` clamped to [`PROB_FLOOR`].
pub fn focal_term(p: f64, alpha: f64, gamma: f64) -> f64 {
    let p = clamp_prob(p).min(1.0);
    let l = -alpha * (1.0 - p).powf(gamma) * p.ln();
    l.max(0.0)
}

/// Plain `−log p` with the same clamp.
pub fn cross_entropy_term(p: f64) -> f64 {
    (-clamp_prob(p).min(1.0).ln()).max(0.0)
}

/// `p · d(focal)/dp`, the factor that turns into the softmax-logit gradient.
fn focal_p_dp(p: f64, alpha: f64, gamma: f64) -> f64 {
    if p < PROB_FLOOR {
        return 0.0;
    }
    let q = 1.0 - p;
    let mut g = -q.powf(gamma);
    if gamma != 0.0 && q > 0.0 {
        g += gamma * p * q.powf(gamma - 1.0) * p.ln();
    }
    alpha * g
}

fn check_label(label: usize, n: usize) -> Result<()> {
    if label >= n {
        return Err(Error::Validation(format!(
            "label {label} out of range for {n} categories"
        )));
    }
    Ok(())
}

/// Mean negative log-likelihood (or focal term) of the true category over
/// positive cells. Rows are probability vectors.
pub fn cls_loss(probs: &[Vec<f64>], labels: &[usize], cfg: &LossConfig) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::Validation(format!(
            "{} probability rows for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    if probs.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (row, &y) in probs.iter().zip(labels) {
        check_label(y, row.len())?;
        sum += if cfg.use_focal_cls {
            check_label(y, cfg.alpha.len())?;
            focal_term(row[y], cfg.alpha[y], cfg.gamma)
        } else {
            cross_entropy_term(row[y])
        };
    }
    Ok(sum / probs.len() as f64)
}

/// Mean over positives of `Σ_{x,y,w,h} (t̂ − t)²`; the flag is `false` when
/// there were no positives.
pub fn coord_loss(pred: &[[f64; 4]], target: &[[f64; 4]]) -> (f64, bool) {
    if pred.is_empty() {
        return (0.0, false);
    }
    let sum: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, t)| (0..4).map(|i| (p[i] - t[i]).powi(2)).sum::<f64>())
        .sum();
    (sum / pred.len() as f64, true)
}

/// Mean squared confidence over anchors with `negative[i]` set.
pub fn noobj_loss(confidence: &[f64], negative: &[bool]) -> f64 {
    let (sum, n) = confidence
        .iter()
        .zip(negative)
        .filter(|(_, &neg)| neg)
        .fold((0.0, 0usize), |(s, n), (&c, _)| (s + c * c, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// `cls + λ_coord·coord + λ_noobj·noobj + obj`.
pub fn total_loss(
    cls: f64,
    coord: f64,
    noobj: f64,
    obj: f64,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    for (name, v) in [
        ("cls", cls),
        ("coord", coord),
        ("noobj", noobj),
        ("obj", obj),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                op: format!("{name} loss"),
            });
        }
    }
    Ok(LossBreakdown {
        cls,
        coord,
        noobj,
        obj,
        total: cls + cfg.lambda_coord * coord + cfg.lambda_noobj * noobj + obj,
    })
}

/// Softmax of a logit row, max-shifted.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Gradients of the loss with respect to one image's raw head outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadGrads {
    pub class_logits: Vec<f64>,
    pub box_params: Vec<[f64; 4]>,
    pub objectness: Vec<f64>,
}

impl HeadGrads {
    fn zeros(out: &HeadOutput) -> Self {
        Self {
            class_logits: vec![0.0; out.class_logits.len()],
            box_params: vec![[0.0; 4]; out.n_anchors()],
            objectness: vec![0.0; out.n_anchors()],
        }
    }
}

/// IoU between each positive's decoded prediction and its ground truth.
/// Used as a constant regression target for positive objectness.
pub fn objectness_targets(
    out: &HeadOutput,
    assignment: &Assignment,
    anchors: &AnchorSet,
) -> Vec<f64> {
    assignment
        .positives
        .iter()
        .map(|p| {
            let pred = anchors.decode(anchors.locate(p.anchor), out.box_params[p.anchor]);
            iou(&pred, &p.bbox)
        })
        .collect()
}

/// Loss over a batch and its gradient with respect to every image's head
/// outputs. Every mean is taken over the whole batch. `obj_targets[i]` holds
/// one target per positive of image `i` (see [`objectness_targets`]).
pub fn head_loss(
    outputs: &[&HeadOutput],
    assignments: &[&Assignment],
    obj_targets: &[Vec<f64>],
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Vec<HeadGrads>)> {
    let n_pos: usize = assignments.iter().map(|a| a.positives.len()).sum();
    let n_neg: usize = assignments
        .iter()
        .map(|a| (0..a.matched.len()).filter(|&i| a.is_negative(i)).count())
        .sum();
    let inv_pos = if n_pos > 0 { 1.0 / n_pos as f64 } else { 0.0 };
    let inv_neg = if n_neg > 0 { 1.0 / n_neg as f64 } else { 0.0 };

    let (mut cls, mut coord, mut noobj, mut obj) = (0.0, 0.0, 0.0, 0.0);
    let mut grads = Vec::with_capacity(outputs.len());
    for ((out, a), targets) in outputs.iter().zip(assignments).zip(obj_targets) {
        let nc = out.n_categories;
        if a.matched.len() != out.n_anchors() {
            return Err(Error::Validation(format!(
                "assignment covers {} anchors, head produced {}",
                a.matched.len(),
                out.n_anchors()
            )));
        }
        let mut g = HeadGrads::zeros(out);
        for (pi, p) in a.positives.iter().enumerate() {
            check_label(p.category, nc)?;
            let row = out.class_row(p.anchor);
            let probs = softmax(row);
            let py = probs[p.category];
            // d(term)/dz_j = (p · dterm/dp) · (δ_jy − p_j)
            let (term, pdp) = if cfg.use_focal_cls {
                let alpha = cfg.alpha[p.category];
                (
                    focal_term(py, alpha, cfg.gamma),
                    focal_p_dp(py, alpha, cfg.gamma),
                )
            } else {
                (
                    cross_entropy_term(py),
                    if py < PROB_FLOOR { 0.0 } else { -1.0 },
                )
            };
            cls += term * inv_pos;
            let gz = &mut g.class_logits[p.anchor * nc..(p.anchor + 1) * nc];
            for (j, gj) in gz.iter_mut().enumerate() {
                let delta = if j == p.category { 1.0 } else { 0.0 };
                *gj = pdp * (delta - probs[j]) * inv_pos;
            }

            let t = out.box_params[p.anchor];
            for ((gi, ti), target) in g.box_params[p.anchor].iter_mut().zip(t).zip(p.target) {
                let d = ti - target;
                coord += d * d * inv_pos;
                *gi = cfg.lambda_coord * 2.0 * d * inv_pos;
            }

            if cfg.objectness_iou {
                let s = logistic(out.objectness[p.anchor]);
                let d = s - targets[pi];
                obj += d * d * inv_pos;
                g.objectness[p.anchor] = 2.0 * d * s * (1.0 - s) * inv_pos;
            }
        }
        for i in 0..out.n_anchors() {
            if a.is_negative(i) {
                let s = logistic(out.objectness[i]);
                noobj += s * s * inv_neg;
                g.objectness[i] = cfg.lambda_noobj * 2.0 * s * s * (1.0 - s) * inv_neg;
            }
        }
        grads.push(g);
    }
    let breakdown = total_loss(cls, coord, noobj, obj, cfg)?;
    Ok((breakdown, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn focal_derivative_matches_difference() {
        for &(p, g) in &[(0.3, 2.0), (0.8, 0.5), (0.5, 0.0), (0.999, 2.0)] {
            let h = 1e-7;
            let num = (focal_term(p + h, 1.3, g) - focal_term(p - h, 1.3, g)) / (2.0 * h);
            assert!(
                (p * num - focal_p_dp(p, 1.3, g)).abs() < 1e-6,
                "p={p} g={g}"
            );
        }
    }

    #[test]
    fn clamped_probability_is_counted() {
        let before = clamp_events();
        let v = focal_term(0.0, 1.0, 0.0);
        assert!((v - 1e-12f64.ln().abs()).abs() < 1e-9);
        assert!(clamp_events() > before);
    }
}
