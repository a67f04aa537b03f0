//! Normalized boxes, anchor grids derived from the input shape, box coding
//! and ground-truth assignment.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::ops::logistic;

/// Center-format box, all components fractions of the image width/height.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxN {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxN {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    /// Builds a box from corner coordinates `(x0, y0, x1, y1)`.
    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            cx: 0.5 * (x0 + x1),
            cy: 0.5 * (y0 + y1),
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        )
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    pub fn iou(&self, other: &BoxN) -> f64 {
        iou(self, other)
    }

    /// Clips the corners to the unit square.
    pub fn clamp_to_image(&self) -> BoxN {
        let (x0, y0, x1, y1) = self.corners();
        BoxN::from_corners(
            x0.clamp(0.0, 1.0),
            y0.clamp(0.0, 1.0),
            x1.clamp(0.0, 1.0),
            y1.clamp(0.0, 1.0),
        )
    }

    /// Center inside the unit square and a strictly positive size no larger than it.
    pub fn is_valid(&self) -> bool {
        (0.0..=1.0).contains(&self.cx)
            && (0.0..=1.0).contains(&self.cy)
            && self.w > 0.0
            && self.w <= 1.0
            && self.h > 0.0
            && self.h <= 1.0
    }

    /// Lexicographic order on `(cy, cx, w, h)`.
    pub fn canonical_cmp(&self, other: &BoxN) -> Ordering {
        self.cy
            .total_cmp(&other.cy)
            .then(self.cx.total_cmp(&other.cx))
            .then(self.w.total_cmp(&other.w))
            .then(self.h.total_cmp(&other.h))
    }
}

/// Intersection over union; zero when either box has no area.
pub fn iou(a: &BoxN, b: &BoxN) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if a.area() <= 0.0 || b.area() <= 0.0 || union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// IoU of two boxes sharing a center: `min(w)·min(h) / union`.
pub fn shape_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = a.0.min(b.0) * a.1.min(b.1);
    let union = a.0 * a.1 + b.0 * b.1 - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// A ground-truth object.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Label {
    pub category: usize,
    pub bbox: BoxN,
}

impl Label {
    pub fn new(category: usize, bbox: BoxN) -> Self {
        Self { category, bbox }
    }

    /// Order on `(cy, cx, category, w, h)`.
    pub fn canonical_cmp(&self, other: &Label) -> Ordering {
        self.bbox
            .cy
            .total_cmp(&other.bbox.cy)
            .then(self.bbox.cx.total_cmp(&other.bbox.cx))
            .then(self.category.cmp(&other.category))
            .then(self.bbox.w.total_cmp(&other.bbox.w))
            .then(self.bbox.h.total_cmp(&other.bbox.h))
    }
}

/// Anchor shape configuration in pixel units of the stride.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorConfig {
    pub strides: Vec<usize>,
    pub scales: Vec<f64>,
    pub aspect_ratios: Vec<f64>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            strides: vec![8, 16, 32],
            scales: vec![3.0, 4.0, 5.0],
            aspect_ratios: vec![1.0],
        }
    }
}

impl AnchorConfig {
    pub fn anchors_per_cell(&self) -> usize {
        self.scales.len() * self.aspect_ratios.len()
    }

    pub fn build(&self, input_h: usize, input_w: usize) -> Result<AnchorSet> {
        dynamic_anchors(
            input_h,
            input_w,
            &self.strides,
            &self.scales,
            &self.aspect_ratios,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorLevel {
    pub stride: usize,
    pub grid_w: usize,
    pub grid_h: usize,
    /// Normalized `(w, h)` per base anchor.
    pub sizes: Vec<(f64, f64)>,
}

impl AnchorLevel {
    pub fn cells(&self) -> usize {
        self.grid_w * self.grid_h
    }
}

/// Anchors for every level, flattened in `(level, y, x, b)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    pub input_h: usize,
    pub input_w: usize,
    pub levels: Vec<AnchorLevel>,
}

/// Location of one anchor in the flattened ordering.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AnchorRef {
    pub level: usize,
    pub y: usize,
    pub x: usize,
    pub b: usize,
}

impl AnchorSet {
    pub fn anchors_per_cell(&self) -> usize {
        self.levels[0].sizes.len()
    }

    pub fn n_anchors(&self) -> usize {
        self.levels.iter().map(|l| l.cells() * l.sizes.len()).sum()
    }

    fn level_offset(&self, level: usize) -> usize {
        self.levels[..level]
            .iter()
            .map(|l| l.cells() * l.sizes.len())
            .sum()
    }

    pub fn index(&self, r: AnchorRef) -> usize {
        let l = &self.levels[r.level];
        self.level_offset(r.level) + ((r.y * l.grid_w + r.x) * l.sizes.len() + r.b)
    }

    pub fn locate(&self, mut index: usize) -> AnchorRef {
        for (level, l) in self.levels.iter().enumerate() {
            let n = l.cells() * l.sizes.len();
            if index < n {
                let b = index % l.sizes.len();
                let cell = index / l.sizes.len();
                return AnchorRef {
                    level,
                    y: cell / l.grid_w,
                    x: cell % l.grid_w,
                    b,
                };
            }
            index -= n;
        }
        panic!("anchor index out of range");
    }

    pub fn decode(&self, r: AnchorRef, t: [f64; 4]) -> BoxN {
        let l = &self.levels[r.level];
        decode_box(r.x, r.y, l.grid_w, l.grid_h, l.sizes[r.b], t)
    }

    /// The anchor's own box centered in its cell.
    pub fn prior_box(&self, r: AnchorRef) -> BoxN {
        let l = &self.levels[r.level];
        let (w, h) = l.sizes[r.b];
        BoxN::new(
            (r.x as f64 + 0.5) / l.grid_w as f64,
            (r.y as f64 + 0.5) / l.grid_h as f64,
            w,
            h,
        )
    }
}

/// Grids of `ceil(input / stride)` cells and `|scales|·|ratios|` anchors of
/// pixel size `stride·scale·(√r, 1/√r)`, normalized by the input size.
pub fn dynamic_anchors(
    input_h: usize,
    input_w: usize,
    strides: &[usize],
    scales: &[f64],
    aspect_ratios: &[f64],
) -> Result<AnchorSet> {
    if input_h == 0 || input_w == 0 {
        return Err(Error::Config("input size must be positive".into()));
    }
    if strides.is_empty() || strides.contains(&0) {
        return Err(Error::Config("anchor strides must be positive".into()));
    }
    if scales.is_empty() || scales.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::Config("anchor scales must be positive".into()));
    }
    if aspect_ratios.is_empty() || aspect_ratios.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
        return Err(Error::Config(
            "anchor aspect ratios must be positive".into(),
        ));
    }
    let levels = strides
        .iter()
        .map(|&stride| {
            let mut sizes = Vec::with_capacity(scales.len() * aspect_ratios.len());
            for &s in scales {
                for &r in aspect_ratios {
                    let px = stride as f64 * s;
                    sizes.push((
                        px * r.sqrt() / input_w as f64,
                        px / r.sqrt() / input_h as f64,
                    ));
                }
            }
            AnchorLevel {
                stride,
                grid_w: input_w.div_ceil(stride),
                grid_h: input_h.div_ceil(stride),
                sizes,
            }
        })
        .collect();
    Ok(AnchorSet {
        input_h,
        input_w,
        levels,
    })
}

/// Smallest and largest normalized width/height produced by [`decode_box`].
pub const MIN_BOX_SIZE: f64 = 1e-12;

/// `cx = (i + σ(tx)) / S_x`, `w = a_w·exp(tw)` clamped to `(0, 1]`.
pub fn decode_box(
    cell_ix: usize,
    cell_iy: usize,
    grid_w: usize,
    grid_h: usize,
    anchor: (f64, f64),
    t: [f64; 4],
) -> BoxN {
    BoxN {
        cx: (cell_ix as f64 + logistic(t[0])) / grid_w as f64,
        cy: (cell_iy as f64 + logistic(t[1])) / grid_h as f64,
        w: (anchor.0 * t[2].exp()).clamp(MIN_BOX_SIZE, 1.0),
        h: (anchor.1 * t[3].exp()).clamp(MIN_BOX_SIZE, 1.0),
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Inverse of [`decode_box`]. The center must lie strictly inside the cell.
pub fn encode_box(
    gt: &BoxN,
    cell_ix: usize,
    cell_iy: usize,
    grid_w: usize,
    grid_h: usize,
    anchor: (f64, f64),
) -> Result<[f64; 4]> {
    let fx = gt.cx * grid_w as f64 - cell_ix as f64;
    let fy = gt.cy * grid_h as f64 - cell_iy as f64;
    if !(fx > 0.0 && fx < 1.0 && fy > 0.0 && fy < 1.0) {
        return Err(Error::Validation(format!(
            "box center ({}, {}) is not inside cell ({cell_ix}, {cell_iy}) of a {grid_w}x{grid_h} grid",
            gt.cx, gt.cy
        )));
    }
    if !(gt.w > 0.0 && gt.h > 0.0) {
        return Err(Error::Validation(format!(
            "box size ({}, {}) must be positive",
            gt.w, gt.h
        )));
    }
    Ok([
        logit(fx),
        logit(fy),
        (gt.w / anchor.0).ln(),
        (gt.h / anchor.1).ln(),
    ])
}

/// Fraction bounds used for regression targets so centers on a cell edge
/// still have finite offsets.
pub const TARGET_FRACTION: (f64, f64) = (0.01, 0.99);

/// Training target: like [`encode_box`] with the in-cell fraction clamped.
pub fn encode_target(
    gt: &BoxN,
    cell_ix: usize,
    cell_iy: usize,
    grid_w: usize,
    grid_h: usize,
    anchor: (f64, f64),
) -> [f64; 4] {
    let (lo, hi) = TARGET_FRACTION;
    let fx = (gt.cx * grid_w as f64 - cell_ix as f64).clamp(lo, hi);
    let fy = (gt.cy * grid_h as f64 - cell_iy as f64).clamp(lo, hi);
    [
        logit(fx),
        logit(fy),
        (gt.w.max(MIN_BOX_SIZE) / anchor.0).ln(),
        (gt.h.max(MIN_BOX_SIZE) / anchor.1).ln(),
    ]
}

/// Cell containing normalized coordinate `c` on an `n`-cell axis; a center on
/// a cell edge goes to the cell with the smaller index.
pub fn cell_of(c: f64, n: usize) -> usize {
    let v = (c * n as f64).ceil() - 1.0;
    if v <= 0.0 {
        0
    } else {
        (v as usize).min(n - 1)
    }
}

/// IoU above which a non-positive anchor is left out of the no-object loss.
pub const IGNORE_IOU: f64 = 0.5;

/// One positive anchor and its target.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Positive {
    pub anchor: usize,
    /// Index into the caller's ground-truth list.
    pub gt: usize,
    pub category: usize,
    pub bbox: BoxN,
    pub target: [f64; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// Per anchor: index of the matched ground truth, if positive.
    pub matched: Vec<Option<usize>>,
    /// Per anchor: excluded from the no-object loss.
    pub ignored: Vec<bool>,
    /// Positives in canonical ground-truth order.
    pub positives: Vec<Positive>,
    /// Ground truths that found no free anchor.
    pub unassigned: Vec<usize>,
}

impl Assignment {
    pub fn is_negative(&self, anchor: usize) -> bool {
        self.matched[anchor].is_none() && !self.ignored[anchor]
    }
}

/// Maps each object to the cell holding its center at every level and picks
/// the anchor of best shape IoU; across levels the best IoU wins, ties going
/// to the lower level and then the lower anchor. Objects are processed in
/// canonical order so the result does not depend on the input order; an
/// object whose best anchor is already taken falls back to its next best.
pub fn assign_targets(gts: &[Label], anchors: &AnchorSet, ignore_iou: f64) -> Assignment {
    let n = anchors.n_anchors();
    let mut matched = vec![None; n];
    let mut positives = Vec::with_capacity(gts.len());
    let mut unassigned = Vec::new();

    let mut order: Vec<usize> = (0..gts.len()).collect();
    order.sort_by(|&a, &b| gts[a].canonical_cmp(&gts[b]).then(a.cmp(&b)));

    for &g in &order {
        let gt = &gts[g];
        let mut candidates: Vec<(f64, AnchorRef)> = Vec::new();
        for (level, l) in anchors.levels.iter().enumerate() {
            let x = cell_of(gt.bbox.cx, l.grid_w);
            let y = cell_of(gt.bbox.cy, l.grid_h);
            for (b, &size) in l.sizes.iter().enumerate() {
                let score = shape_iou((gt.bbox.w, gt.bbox.h), size);
                candidates.push((score, AnchorRef { level, y, x, b }));
            }
        }
        // stable sort keeps (level, b) order among equal scores
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0));
        let free = candidates
            .iter()
            .map(|&(_, r)| r)
            .find(|&r| matched[anchors.index(r)].is_none());
        match free {
            Some(r) => {
                let idx = anchors.index(r);
                matched[idx] = Some(g);
                let l = &anchors.levels[r.level];
                positives.push(Positive {
                    anchor: idx,
                    gt: g,
                    category: gt.category,
                    bbox: gt.bbox,
                    target: encode_target(&gt.bbox, r.x, r.y, l.grid_w, l.grid_h, l.sizes[r.b]),
                });
            }
            None => unassigned.push(g),
        }
    }

    let mut ignored = vec![false; n];
    if !gts.is_empty() {
        for (i, ig) in ignored.iter_mut().enumerate() {
            if matched[i].is_some() {
                continue;
            }
            let prior = anchors.prior_box(anchors.locate(i));
            *ig = gts.iter().any(|gt| iou(&prior, &gt.bbox) > ignore_iou);
        }
    }

    Assignment {
        matched,
        ignored,
        positives,
        unassigned,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corner_boxes_iou_is_one_seventh() {
        let a = BoxN::from_corners(0.0, 0.0, 2.0, 2.0);
        let b = BoxN::from_corners(1.0, 1.0, 3.0, 3.0);
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn degenerate_box_has_zero_iou() {
        let a = BoxN::new(0.5, 0.5, 0.0, 0.2);
        assert_eq!(iou(&a, &a), 0.0);
    }

    #[test]
    fn edge_centers_go_to_lower_cell() {
        assert_eq!(cell_of(0.5, 4), 1);
        assert_eq!(cell_of(0.51, 4), 2);
        assert_eq!(cell_of(0.0, 4), 0);
        assert_eq!(cell_of(1.0, 4), 3);
    }

    #[test]
    fn locate_inverts_index() {
        let set = AnchorConfig::default().build(64, 96).unwrap();
        for i in 0..set.n_anchors() {
            assert_eq!(set.index(set.locate(i)), i);
        }
    }

    #[test]
    fn ignored_anchors_exclude_positives() {
        let set = dynamic_anchors(64, 64, &[16], &[2.0], &[1.0]).unwrap();
        let gt = Label::new(
            0,
            set.prior_box(AnchorRef {
                level: 0,
                y: 1,
                x: 1,
                b: 0,
            }),
        );
        let a = assign_targets(&[gt], &set, IGNORE_IOU);
        assert_eq!(a.positives.len(), 1);
        assert!(!a.ignored[a.positives[0].anchor]);
        assert!(!a.is_negative(a.positives[0].anchor));
    }
}
