//! The adaptive head: dynamic visual-feature attention over a feature pyramid
//! and the parallel class/box regression branches.
//!
//! Feature pyramids are brought to a common `L×S×C` view (stored as
//! `[L,H,W,C]`, `S = H·W`) at the median level's resolution. The attention
//! stack applies, in order and with no activation in between:
//!
//! * scale attention: `F · hard_sigmoid(f(mean_{S,C} F))`, one gate per level;
//! * spatial attention: a deformable, mask-weighted aggregation over `K`
//!   sampling points, averaged over levels and broadcast back to every level;
//! * task attention: `max(F_c·α1 + β1, F_c·α2 + β2)` with per-channel
//!   coefficients produced by a pooled two-layer hyper network.
//!
//! Every stage exists twice: as a tape function (`*_t`) used for training,
//! and as a pure tensor function for inference and testing.

pub(crate) mod kernels;

use rand::Rng;

use crate::error::{Error, Result};
use crate::init;
use crate::ops::{logistic, Activation};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Standardization epsilon inside the task-attention hyper network.
pub const THETA_EPS: f64 = 1e-5;

/// Bias of the final hyper-network layer giving `(0.9, 0.9, 0, 0)` after the shifted sigmoid.
pub fn near_identity_theta_bias() -> [f64; 4] {
    let a = (19.0f64).ln();
    [a, a, 0.0, 0.0]
}

/// Index of the median pyramid level; ties go to the lower index.
pub fn median_level(levels: usize) -> usize {
    levels.saturating_sub(1) / 2
}

/// Feature pyramid with `L` levels of shape `[H_l, W_l, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PyramidFeatures {
    levels: Vec<Tensor>,
}

impl PyramidFeatures {
    pub fn new(levels: Vec<Tensor>) -> Result<Self> {
        let first = levels
            .first()
            .ok_or_else(|| Error::shape("pyramid", "need at least one level"))?;
        if first.rank() != 3 {
            return Err(Error::shape(
                "pyramid",
                format!("levels must be [H,W,C], got {:?}", first.shape()),
            ));
        }
        let c = first.dim(2);
        for (i, l) in levels.iter().enumerate() {
            if l.rank() != 3 || l.dim(2) != c {
                return Err(Error::shape(
                    "pyramid",
                    format!("level {i} has shape {:?}, expected [H,W,{c}]", l.shape()),
                ));
            }
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> &[Tensor] {
        &self.levels
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn channels(&self) -> usize {
        self.levels[0].dim(2)
    }

    pub fn median_index(&self) -> usize {
        median_level(self.levels.len())
    }

    /// `[L, H_med, W_med, C]`: each level bilinearly resampled to the median level's size.
    pub fn common_view(&self) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self
            .levels
            .iter()
            .map(|l| {
                let shape = [1, l.dim(0), l.dim(1), l.dim(2)];
                tape.leaf(l.clone().reshape(&shape).expect("rank-3 level"))
            })
            .collect();
        let v = common_view_t(&mut tape, &vars)?;
        Ok(tape.value(v).clone())
    }
}

/// Stacks `[1,H_l,W_l,C]` levels into `[L,H_med,W_med,C]`.
pub fn common_view_t(tape: &mut Tape, levels: &[Var]) -> Result<Var> {
    let med = tape.shape(levels[median_level(levels.len())]).to_vec();
    let (h, w) = (med[1], med[2]);
    let resized: Vec<Var> = levels
        .iter()
        .map(|&l| {
            let s = tape.shape(l);
            if s[1] == h && s[2] == w {
                Ok(l)
            } else {
                tape.resize(l, h, w)
            }
        })
        .collect::<Result<_>>()?;
    tape.concat(&resized)
}

// ---------------------------------------------------------------------------
// scale attention

/// `f(·)`: a 1×1 convolution that treats the `L` per-level means as channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct ScaleVars {
    pub weight: Var,
    pub bias: Var,
}

impl ScaleParams {
    /// Identity map: unit diagonal, zero bias.
    pub fn identity(levels: usize) -> Self {
        Self {
            weight: Tensor::from_fn(&[levels, levels], |i| {
                if i / levels == i % levels {
                    1.0
                } else {
                    0.0
                }
            }),
            bias: Tensor::zeros(&[levels]),
        }
    }

    pub fn record(&self, tape: &mut Tape) -> ScaleVars {
        ScaleVars {
            weight: tape.leaf(self.weight.clone()),
            bias: tape.leaf(self.bias.clone()),
        }
    }
}

pub fn scale_attention_t(tape: &mut Tape, features: Var, p: ScaleVars) -> Result<Var> {
    let levels = tape.shape(features)[0];
    if tape.shape(p.weight) != [levels, levels] {
        return Err(Error::shape(
            "scale_attention",
            format!(
                "f weight must be [{levels},{levels}], got {:?}",
                tape.shape(p.weight)
            ),
        ));
    }
    let rank = tape.shape(features).len();
    let axes: Vec<usize> = (1..rank).collect();
    let means = tape.reduce_mean(features, &axes)?;
    let fused = tape.affine(means, p.weight, Some(p.bias))?;
    let gate = tape.activation(fused, Activation::HardSigmoid)?;
    tape.scale_rows(features, gate)
}

/// Scale-aware attention: every level is multiplied by its own gate.
pub fn scale_attention(features: &Tensor, params: &ScaleParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let f = tape.leaf(features.clone());
    let p = params.record(&mut tape);
    let out = scale_attention_t(&mut tape, f, p)?;
    Ok(tape.value(out).clone())
}

/// Per-level gates `hard_sigmoid(f(mean_{S,C} F))`.
pub fn scale_gates(features: &Tensor, params: &ScaleParams) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let f = tape.leaf(features.clone());
    let p = params.record(&mut tape);
    let axes: Vec<usize> = (1..features.rank()).collect();
    let means = tape.reduce_mean(f, &axes)?;
    let fused = tape.affine(means, p.weight, Some(p.bias))?;
    let gate = tape.activation(fused, Activation::HardSigmoid)?;
    Ok(tape.value(gate).data().to_vec())
}

// ---------------------------------------------------------------------------
// spatial attention

/// Sampling displacements, masks and per-level weights for `K` points at every
/// position of an `H×W` map.
///
/// * `offsets [H,W,K,2]`: `(dy, dx)` from the output position, base grid included;
/// * `masks [H,W,K]`: modulation `Δm_k`, already bounded;
/// * `weights [L,H,W,K]`: `w_{l,k}`.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingField {
    pub offsets: Tensor,
    pub masks: Tensor,
    pub weights: Tensor,
}

impl SamplingField {
    /// Every point samples the output position itself with unit mask and weight.
    pub fn degenerate(levels: usize, h: usize, w: usize, k: usize) -> Self {
        Self {
            offsets: Tensor::zeros(&[h, w, k, 2]),
            masks: Tensor::full(&[h, w, k], 1.0),
            weights: Tensor::full(&[levels, h, w, k], 1.0),
        }
    }
}

/// Base sampling grid for `K` points: a centred `s×s` lattice when `K = s²`
/// with `s` odd, otherwise every point starts at the origin.
pub fn base_points(k: usize) -> Vec<(f64, f64)> {
    let s = (k as f64).sqrt().round() as usize;
    if s * s == k && s % 2 == 1 {
        let r = (s / 2) as isize;
        (-r..=r)
            .flat_map(|dy| (-r..=r).map(move |dx| (dy as f64, dx as f64)))
            .collect()
    } else {
        vec![(0.0, 0.0); k]
    }
}

/// Index of the base point at the origin.
pub fn centre_point(k: usize) -> usize {
    base_points(k)
        .iter()
        .position(|&(y, x)| y == 0.0 && x == 0.0)
        .unwrap_or(0)
}

pub fn spatial_attention_t(
    tape: &mut Tape,
    features: Var,
    offsets: Var,
    masks: Var,
    weights: Var,
) -> Result<Var> {
    tape.deform_aggregate(features, offsets, masks, weights)
}

/// Spatial-aware attention with a given sampling field; out-of-map samples read zero.
pub fn spatial_attention(features: &Tensor, field: &SamplingField) -> Result<Tensor> {
    let k = field
        .masks
        .shape()
        .get(2)
        .copied()
        .ok_or_else(|| Error::shape("spatial_attention", "masks must be [H,W,K]"))?;
    if k == 0 {
        return Err(Error::Config("spatial attention needs K >= 1".into()));
    }
    let mut tape = Tape::new();
    let f = tape.leaf(features.clone());
    let o = tape.leaf(field.offsets.clone());
    let m = tape.leaf(field.masks.clone());
    let w = tape.leaf(field.weights.clone());
    let out = spatial_attention_t(&mut tape, f, o, m, w)?;
    Ok(tape.value(out).clone())
}

/// 3×3 convolution predicting `4K` channels per position:
/// `[dy_0, dx_0, .., dy_{K-1}, dx_{K-1}, m_0..m_{K-1}, w_0..w_{K-1}]`.
/// Displacements and masks are read from the median level; weights from every level.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingParams {
    pub k: usize,
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct SamplingVars {
    pub k: usize,
    pub weight: Var,
    pub bias: Var,
}

impl SamplingParams {
    /// Zero kernel; biases give zero displacement, unit mask and a unit weight on
    /// the centre point only.
    pub fn init(channels: usize, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("spatial attention needs K >= 1".into()));
        }
        Ok(Self {
            k,
            weight: Tensor::zeros(&[3, 3, channels, 4 * k]),
            bias: Tensor::from_parts(vec![4 * k], sampling_bias(k)),
        })
    }

    pub fn record(&self, tape: &mut Tape) -> SamplingVars {
        SamplingVars {
            k: self.k,
            weight: tape.leaf(self.weight.clone()),
            bias: tape.leaf(self.bias.clone()),
        }
    }
}

pub(crate) fn sampling_bias(k: usize) -> Vec<f64> {
    let mut b = vec![0.0; 4 * k];
    for m in &mut b[2 * k..3 * k] {
        *m = 1.0;
    }
    b[3 * k + centre_point(k)] = 1.0;
    b
}

/// Predicts `(offsets, masks, weights)` vars from `[L,H,W,C]` features.
pub fn sampling_field_t(
    tape: &mut Tape,
    features: Var,
    p: SamplingVars,
) -> Result<(Var, Var, Var)> {
    let k = p.k;
    if k == 0 {
        return Err(Error::Config("spatial attention needs K >= 1".into()));
    }
    let shape = tape.shape(features).to_vec();
    let (levels, h, w) = (shape[0], shape[1], shape[2]);
    let raw = tape.conv2d(features, p.weight, Some(p.bias), 1, 1)?;
    let med = tape.narrow(raw, 0, median_level(levels), 1)?;
    let delta = tape.narrow(med, 3, 0, 2 * k)?;
    let delta = tape.reshape(delta, &[h, w, k, 2])?;
    let base: Vec<f64> = base_points(k)
        .into_iter()
        .flat_map(|(y, x)| [y, x])
        .collect::<Vec<_>>()
        .repeat(h * w);
    let base = tape.leaf(Tensor::new(vec![h, w, k, 2], base)?);
    let offsets = tape.add(delta, base)?;
    let masks = tape.narrow(med, 3, 2 * k, k)?;
    let masks = tape.reshape(masks, &[h, w, k])?;
    let masks = tape.activation(masks, Activation::HardSigmoid)?;
    let weights = tape.narrow(raw, 3, 3 * k, k)?;
    Ok((offsets, masks, weights))
}

// ---------------------------------------------------------------------------
// task attention

/// Hyper network `θ`: pooled `[C] → affine [C/r] → standardize → affine [4C] → shifted sigmoid`.
#[derive(Clone, Debug, PartialEq)]
pub struct ThetaParams {
    pub fc1_weight: Tensor,
    pub fc1_bias: Tensor,
    pub fc2_weight: Tensor,
    pub fc2_bias: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct ThetaVars {
    pub fc1_weight: Var,
    pub fc1_bias: Var,
    pub fc2_weight: Var,
    pub fc2_bias: Var,
}

impl ThetaParams {
    /// Hidden width is `max(C/r, 1)`; the output bias starts at the near-identity
    /// coefficients `(0.9, 0.9, 0, 0)`.
    pub fn init<R: Rng>(rng: &mut R, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 {
            return Err(Error::Config(
                "theta reduction ratio must be positive".into(),
            ));
        }
        let hidden = (channels / reduction).max(1);
        let b = near_identity_theta_bias();
        Ok(Self {
            fc1_weight: init::fan_in_uniform(rng, &[channels, hidden], channels, 1.0),
            fc1_bias: Tensor::zeros(&[hidden]),
            fc2_weight: init::fan_in_uniform(rng, &[hidden, 4 * channels], hidden, 0.01),
            fc2_bias: Tensor::from_fn(&[4 * channels], |i| (b[i % 4] as f32) as f64),
        })
    }

    pub fn record(&self, tape: &mut Tape) -> ThetaVars {
        ThetaVars {
            fc1_weight: tape.leaf(self.fc1_weight.clone()),
            fc1_bias: tape.leaf(self.fc1_bias.clone()),
            fc2_weight: tape.leaf(self.fc2_weight.clone()),
            fc2_bias: tape.leaf(self.fc2_bias.clone()),
        }
    }
}

/// Per-channel coefficients `[C,4]` laid out `[α1, α2, β1, β2]`.
pub fn theta_t(tape: &mut Tape, features: Var, p: ThetaVars) -> Result<Var> {
    let shape = tape.shape(features).to_vec();
    let c = *shape.last().unwrap();
    let axes: Vec<usize> = (0..shape.len() - 1).collect();
    let pooled = tape.reduce_mean(features, &axes)?;
    let hidden = tape.affine(pooled, p.fc1_weight, Some(p.fc1_bias))?;
    let hidden = tape.standardize(hidden, THETA_EPS)?;
    let raw = tape.affine(hidden, p.fc2_weight, Some(p.fc2_bias))?;
    if tape.shape(raw) != [4 * c] {
        return Err(Error::shape(
            "task_attention",
            format!("theta output {:?} != [4·C = {}]", tape.shape(raw), 4 * c),
        ));
    }
    let coeffs = tape.activation(raw, Activation::ShiftedSigmoid)?;
    tape.reshape(coeffs, &[c, 4])
}

pub fn task_attention_t(tape: &mut Tape, features: Var, p: ThetaVars) -> Result<Var> {
    let coeffs = theta_t(tape, features, p)?;
    tape.task_modulate(features, coeffs)
}

/// Task-aware attention with coefficients from the hyper network.
pub fn task_attention(features: &Tensor, theta: &ThetaParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let f = tape.leaf(features.clone());
    let p = theta.record(&mut tape);
    let out = task_attention_t(&mut tape, f, p)?;
    Ok(tape.value(out).clone())
}

/// Task-aware attention with forced `[C,4]` coefficients `[α1, α2, β1, β2]`.
pub fn task_attention_forced(features: &Tensor, coeffs: &Tensor) -> Result<Tensor> {
    kernels::task_modulate(features, coeffs)
}

/// The hyper network's coefficients for `features`.
pub fn theta_coefficients(features: &Tensor, theta: &ThetaParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let f = tape.leaf(features.clone());
    let p = theta.record(&mut tape);
    let out = theta_t(&mut tape, f, p)?;
    Ok(tape.value(out).clone())
}

// ---------------------------------------------------------------------------
// full attention stack

#[derive(Clone, Debug, PartialEq)]
pub struct DvfParams {
    pub scale: ScaleParams,
    pub sampling: SamplingParams,
    pub theta: ThetaParams,
}

#[derive(Clone, Copy, Debug)]
pub struct DvfVars {
    pub scale: ScaleVars,
    pub sampling: SamplingVars,
    pub theta: ThetaVars,
}

impl DvfParams {
    pub fn init<R: Rng>(
        rng: &mut R,
        levels: usize,
        channels: usize,
        k: usize,
        reduction: usize,
    ) -> Result<Self> {
        Ok(Self {
            scale: ScaleParams::identity(levels),
            sampling: SamplingParams::init(channels, k)?,
            theta: ThetaParams::init(rng, channels, reduction)?,
        })
    }

    pub fn record(&self, tape: &mut Tape) -> DvfVars {
        DvfVars {
            scale: self.scale.record(tape),
            sampling: self.sampling.record(tape),
            theta: self.theta.record(tape),
        }
    }

    /// The sampling field the spatial stage would use on `features`.
    pub fn sampling_field(&self, features: &Tensor) -> Result<SamplingField> {
        let mut tape = Tape::new();
        let f = tape.leaf(features.clone());
        let p = self.sampling.record(&mut tape);
        let (o, m, w) = sampling_field_t(&mut tape, f, p)?;
        Ok(SamplingField {
            offsets: tape.value(o).clone(),
            masks: tape.value(m).clone(),
            weights: tape.value(w).clone(),
        })
    }
}

/// `W(F) = π_C(π_S(π_L(F)))` with no activation between the stages.
pub fn dvf_apply_t(tape: &mut Tape, features: Var, p: DvfVars) -> Result<Var> {
    let scaled = scale_attention_t(tape, features, p.scale)?;
    let (offsets, masks, weights) = sampling_field_t(tape, scaled, p.sampling)?;
    let spatial = spatial_attention_t(tape, scaled, offsets, masks, weights)?;
    task_attention_t(tape, spatial, p.theta)
}

pub fn dvf_apply(features: &Tensor, params: &DvfParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let f = tape.leaf(features.clone());
    let p = params.record(&mut tape);
    let out = dvf_apply_t(&mut tape, f, p)?;
    Ok(tape.value(out).clone())
}

// ---------------------------------------------------------------------------
// multi-scale convolution

/// Parallel 1×1, 3×3 and 5×5 "same" convolutions, summed.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiScaleParams {
    pub kernels: [Tensor; 3],
    pub biases: [Tensor; 3],
}

#[derive(Clone, Copy, Debug)]
pub struct MultiScaleVars {
    pub kernels: [Var; 3],
    pub biases: [Var; 3],
}

pub const MULTISCALE_SIZES: [usize; 3] = [1, 3, 5];

impl MultiScaleParams {
    pub fn zeros(channels: usize) -> Self {
        Self {
            kernels: MULTISCALE_SIZES.map(|k| Tensor::zeros(&[k, k, channels, channels])),
            biases: [(); 3].map(|_| Tensor::zeros(&[channels])),
        }
    }

    /// Each branch gets a third of the fan-in variance so the sum keeps unit gain.
    pub fn init<R: Rng>(rng: &mut R, channels: usize) -> Self {
        let fan: usize = MULTISCALE_SIZES.iter().map(|k| k * k * channels).sum();
        Self {
            kernels: MULTISCALE_SIZES
                .map(|k| init::fan_in_uniform(rng, &[k, k, channels, channels], fan, 2.0)),
            biases: [(); 3].map(|_| Tensor::zeros(&[channels])),
        }
    }

    pub fn record(&self, tape: &mut Tape) -> MultiScaleVars {
        MultiScaleVars {
            kernels: [0, 1, 2].map(|i| tape.leaf(self.kernels[i].clone())),
            biases: [0, 1, 2].map(|i| tape.leaf(self.biases[i].clone())),
        }
    }
}

pub fn multiscale_conv_t(tape: &mut Tape, input: Var, p: MultiScaleVars) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (i, &k) in MULTISCALE_SIZES.iter().enumerate() {
        let y = tape.conv2d(input, p.kernels[i], Some(p.biases[i]), 1, (k - 1) / 2)?;
        acc = Some(match acc {
            None => y,
            Some(a) => tape.add(a, y)?,
        });
    }
    Ok(acc.expect("three branches"))
}

/// Multi-scale convolution of one `[H,W,C]` level (or a `[N,H,W,C]` batch).
pub fn multiscale_conv(level: &Tensor, params: &MultiScaleParams) -> Result<Tensor> {
    let squeeze = level.rank() == 3;
    let input = if squeeze {
        level
            .clone()
            .reshape(&[1, level.dim(0), level.dim(1), level.dim(2)])?
    } else {
        level.clone()
    };
    let mut tape = Tape::new();
    let x = tape.leaf(input);
    let p = params.record(&mut tape);
    let y = multiscale_conv_t(&mut tape, x, p)?;
    let out = tape.value(y).clone();
    if squeeze {
        out.reshape(level.shape())
    } else {
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// joint-guided regression

/// Two branches with no shared layers. The class branch emits, per anchor,
/// `n_categories` class logits followed by one objectness logit; the box
/// branch emits `(tx, ty, tw, th)` per anchor.
#[derive(Clone, Debug, PartialEq)]
pub struct JgrParams {
    pub n_categories: usize,
    pub anchors_per_cell: usize,
    pub cls_hidden: (Tensor, Tensor),
    pub cls_out: (Tensor, Tensor),
    pub box_hidden: (Tensor, Tensor),
    pub box_out: (Tensor, Tensor),
}

#[derive(Clone, Copy, Debug)]
pub struct JgrVars {
    pub n_categories: usize,
    pub anchors_per_cell: usize,
    pub cls_hidden: (Var, Var),
    pub cls_out: (Var, Var),
    pub box_hidden: (Var, Var),
    pub box_out: (Var, Var),
}

/// Initial objectness logit; starts every anchor near "no object".
pub const OBJECTNESS_PRIOR: f64 = -4.0;

/// Slope of the leaky rectifier used throughout the network.
pub const LEAKY_SLOPE: f64 = 0.1;

impl JgrParams {
    pub fn init<R: Rng>(
        rng: &mut R,
        channels: usize,
        hidden: usize,
        n_categories: usize,
        anchors_per_cell: usize,
    ) -> Self {
        let cls_ch = anchors_per_cell * (n_categories + 1);
        let box_ch = anchors_per_cell * 4;
        let cls_bias = Tensor::from_fn(&[cls_ch], |i| {
            if i % (n_categories + 1) == n_categories {
                OBJECTNESS_PRIOR
            } else {
                0.0
            }
        });
        Self {
            n_categories,
            anchors_per_cell,
            cls_hidden: (
                init::conv_kernel(rng, 3, channels, hidden, 2.0),
                Tensor::zeros(&[hidden]),
            ),
            cls_out: (init::conv_kernel(rng, 1, hidden, cls_ch, 0.1), cls_bias),
            box_hidden: (
                init::conv_kernel(rng, 3, channels, hidden, 2.0),
                Tensor::zeros(&[hidden]),
            ),
            box_out: (
                init::conv_kernel(rng, 1, hidden, box_ch, 0.1),
                Tensor::zeros(&[box_ch]),
            ),
        }
    }

    /// All branch weights and biases zero.
    pub fn zeros(channels: usize, hidden: usize, n_categories: usize, anchors: usize) -> Self {
        let cls_ch = anchors * (n_categories + 1);
        Self {
            n_categories,
            anchors_per_cell: anchors,
            cls_hidden: (
                Tensor::zeros(&[3, 3, channels, hidden]),
                Tensor::zeros(&[hidden]),
            ),
            cls_out: (
                Tensor::zeros(&[1, 1, hidden, cls_ch]),
                Tensor::zeros(&[cls_ch]),
            ),
            box_hidden: (
                Tensor::zeros(&[3, 3, channels, hidden]),
                Tensor::zeros(&[hidden]),
            ),
            box_out: (
                Tensor::zeros(&[1, 1, hidden, anchors * 4]),
                Tensor::zeros(&[anchors * 4]),
            ),
        }
    }

    pub fn record(&self, tape: &mut Tape) -> JgrVars {
        let mut pair = |p: &(Tensor, Tensor)| (tape.leaf(p.0.clone()), tape.leaf(p.1.clone()));
        JgrVars {
            n_categories: self.n_categories,
            anchors_per_cell: self.anchors_per_cell,
            cls_hidden: pair(&self.cls_hidden),
            cls_out: pair(&self.cls_out),
            box_hidden: pair(&self.box_hidden),
            box_out: pair(&self.box_out),
        }
    }
}

fn branch_t(tape: &mut Tape, input: Var, hidden: (Var, Var), out: (Var, Var)) -> Result<Var> {
    let h = tape.conv2d(input, hidden.0, Some(hidden.1), 1, 1)?;
    let h = tape.activation(h, Activation::LeakyRelu(LEAKY_SLOPE))?;
    tape.conv2d(h, out.0, Some(out.1), 1, 0)
}

pub fn class_branch_t(tape: &mut Tape, input: Var, p: &JgrVars) -> Result<Var> {
    branch_t(tape, input, p.cls_hidden, p.cls_out)
}

pub fn box_branch_t(tape: &mut Tape, input: Var, p: &JgrVars) -> Result<Var> {
    branch_t(tape, input, p.box_hidden, p.box_out)
}

/// `logistic(class logit) · logistic(objectness logit)`.
pub fn joint_score(class_logit: f64, objectness_logit: f64) -> f64 {
    logistic(class_logit) * logistic(objectness_logit)
}

/// Per-anchor head outputs, anchors ordered `(level, y, x, b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput {
    pub n_categories: usize,
    /// `n_anchors × n_categories`, row-major.
    pub class_logits: Vec<f64>,
    pub box_params: Vec<[f64; 4]>,
    pub objectness: Vec<f64>,
    /// Joint score of the arg-max category.
    pub joint_score: Vec<f64>,
}

impl HeadOutput {
    pub fn n_anchors(&self) -> usize {
        self.objectness.len()
    }

    pub fn class_row(&self, anchor: usize) -> &[f64] {
        &self.class_logits[anchor * self.n_categories..(anchor + 1) * self.n_categories]
    }

    /// Arg-max category (lowest index on ties).
    pub fn best_category(&self, anchor: usize) -> usize {
        let row = self.class_row(anchor);
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        best
    }

    /// Flattens per-level branch outputs `cls [1,H,W,B(n+1)]`, `box [1,H,W,4B]`.
    pub fn assemble(
        levels: &[(&Tensor, &Tensor)],
        n_categories: usize,
        anchors_per_cell: usize,
    ) -> Result<Self> {
        let per = n_categories + 1;
        let mut out = HeadOutput {
            n_categories,
            class_logits: Vec::new(),
            box_params: Vec::new(),
            objectness: Vec::new(),
            joint_score: Vec::new(),
        };
        for (li, (cls, bx)) in levels.iter().enumerate() {
            let cells = cls.len() / (anchors_per_cell * per).max(1);
            if cls.len() != cells * anchors_per_cell * per
                || bx.len() != cells * anchors_per_cell * 4
            {
                return Err(Error::shape(
                    "jgr_forward",
                    format!(
                        "level {li}: class {:?} / box {:?} do not match {anchors_per_cell} anchors x {n_categories} categories",
                        cls.shape(),
                        bx.shape()
                    ),
                ));
            }
            for (c_row, b_row) in cls.data().chunks_exact(per).zip(bx.data().chunks_exact(4)) {
                out.class_logits.extend_from_slice(&c_row[..n_categories]);
                out.objectness.push(c_row[n_categories]);
                out.box_params
                    .push([b_row[0], b_row[1], b_row[2], b_row[3]]);
            }
        }
        out.joint_score = (0..out.n_anchors())
            .map(|a| {
                let c = out.best_category(a);
                joint_score(out.class_row(a)[c], out.objectness[a])
            })
            .collect();
        Ok(out)
    }
}

/// Order in which the two independent branches are evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BranchOrder {
    ClassFirst,
    BoxFirst,
    Concurrent,
}

fn run_branch(input: &Tensor, hidden: &(Tensor, Tensor), out: &(Tensor, Tensor)) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.leaf(input.clone());
    let h = (tape.leaf(hidden.0.clone()), tape.leaf(hidden.1.clone()));
    let o = (tape.leaf(out.0.clone()), tape.leaf(out.1.clone()));
    let y = branch_t(&mut tape, x, h, o)?;
    Ok(tape.value(y).clone())
}

/// Runs both branches on every `[1,H,W,C]` level and assembles the head output.
pub fn jgr_forward(
    levels: &[Tensor],
    params: &JgrParams,
    order: BranchOrder,
) -> Result<HeadOutput> {
    let mut per_level = Vec::with_capacity(levels.len());
    for level in levels {
        let (cls, bx) = match order {
            BranchOrder::ClassFirst => {
                let c = run_branch(level, &params.cls_hidden, &params.cls_out)?;
                let b = run_branch(level, &params.box_hidden, &params.box_out)?;
                (c, b)
            }
            BranchOrder::BoxFirst => {
                let b = run_branch(level, &params.box_hidden, &params.box_out)?;
                let c = run_branch(level, &params.cls_hidden, &params.cls_out)?;
                (c, b)
            }
            BranchOrder::Concurrent => {
                let precision = crate::tensor::precision();
                let (c, b) = std::thread::scope(|s| {
                    let c = s.spawn(|| {
                        crate::tensor::with_precision(precision, || {
                            run_branch(level, &params.cls_hidden, &params.cls_out)
                        })
                    });
                    let b = run_branch(level, &params.box_hidden, &params.box_out);
                    (c.join().expect("class branch panicked"), b)
                });
                (c?, b?)
            }
        };
        per_level.push((cls, bx));
    }
    let refs: Vec<(&Tensor, &Tensor)> = per_level.iter().map(|(c, b)| (c, b)).collect();
    HeadOutput::assemble(&refs, params.n_categories, params.anchors_per_cell)
}
