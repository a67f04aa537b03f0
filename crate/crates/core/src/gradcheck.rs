//! Central finite-difference checks of every differentiable operation.
//!
//! Each check reduces an operation's output to a scalar with a fixed random
//! projection, then compares the reverse-mode gradient of every probed input
//! element against `(f(x+ε) − f(x−ε)) / 2ε` with `ε = 1e−5·max(1, |x|)`.
//! The relative error is `|a − n| / max(|a|, |n|, 1e−8)`. Checks always run
//! in 64-bit mode.

use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::anchors::{assign_targets, AnchorConfig, AnchorSet, BoxN, Label, IGNORE_IOU};
use crate::attention::{
    box_branch_t, class_branch_t, dvf_apply_t, multiscale_conv_t, sampling_field_t,
    scale_attention_t, spatial_attention_t, task_attention_t, DvfParams, HeadOutput, JgrParams,
    MultiScaleParams, LEAKY_SLOPE,
};
use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::losses::{head_loss, objectness_targets, LossConfig};
use crate::model::{branch_seeds, Model, ModelConfig};
use crate::ops::Activation;
use crate::tape::{Tape, Var};
use crate::tensor::{with_precision, Precision, Tensor};

pub const TOLERANCE: f64 = 1e-4;
const REL_STEP: f64 = 1e-5;
const DENOM_FLOOR: f64 = 1e-8;
/// Elements probed per input tensor.
const MAX_PROBES: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Ops,
    Head,
    Loss,
    All,
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ops" => Ok(Scope::Ops),
            "head" => Ok(Scope::Head),
            "loss" => Ok(Scope::Loss),
            "all" => Ok(Scope::All),
            other => Err(Error::Config(format!(
                "unknown gradcheck scope {other:?} (expected ops, head, loss or all)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub probes: usize,
    pub max_rel_err: f64,
    /// `(input index, element index)` of the worst probe.
    pub worst: (usize, usize),
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= TOLERANCE
    }
}

#[derive(Clone, Debug, Default)]
pub struct Options {
    /// Scales the analytic gradient of the named check by 1.01, to confirm
    /// that a wrong gradient is caught.
    pub corrupt: Option<String>,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

fn probe_indices(rng: &mut ChaCha8Rng, len: usize) -> Vec<usize> {
    if len <= MAX_PROBES {
        (0..len).collect()
    } else {
        let mut v = sample(rng, len, MAX_PROBES).into_vec();
        v.sort_unstable();
        v
    }
}

/// Compares gradients of `Σ r ⊙ build(inputs)` for a fixed random `r`.
pub fn check_graph(
    name: &str,
    inputs: &[Tensor],
    seed: u64,
    opts: &Options,
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<CheckResult> {
    let eval = |xs: &[Tensor]| -> Result<(Tape, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok((tape, out))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (tape, out) = eval(inputs)?;
    let proj: Vec<f64> = (0..tape.value(out).len())
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let objective = |xs: &[Tensor]| -> Result<f64> {
        let (t, o) = eval(xs)?;
        Ok(t.value(o)
            .data()
            .iter()
            .zip(&proj)
            .map(|(a, b)| a * b)
            .sum())
    };
    let mut grads = tape.backward(&[(out, proj.clone())])?;
    let scale = if opts.corrupt.as_deref() == Some(name) {
        1.01
    } else {
        1.0
    };
    let mut analytic = Vec::with_capacity(inputs.len());
    for (i, input) in inputs.iter().enumerate() {
        let g = grads
            .take(Var::from_index(i))
            .unwrap_or_else(|| vec![0.0; input.len()]);
        analytic.push(g.into_iter().map(|v| v * scale).collect::<Vec<_>>());
    }
    let mut result = CheckResult {
        name: name.to_string(),
        probes: 0,
        max_rel_err: 0.0,
        worst: (0, 0),
    };
    let mut xs = inputs.to_vec();
    for (i, x) in inputs.iter().enumerate() {
        for j in probe_indices(&mut rng, x.len()) {
            let v = x.data()[j];
            let eps = REL_STEP * v.abs().max(1.0);
            xs[i].data_mut()[j] = v + eps;
            let up = objective(&xs)?;
            xs[i].data_mut()[j] = v - eps;
            let down = objective(&xs)?;
            xs[i].data_mut()[j] = v;
            let numeric = (up - down) / (2.0 * eps);
            let e = rel_err(analytic[i][j], numeric);
            result.probes += 1;
            if e > result.max_rel_err {
                result.max_rel_err = e;
                result.worst = (i, j);
            }
        }
    }
    Ok(result)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Values bounded away from zero, so kinks at 0 are never straddled.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn op_checks(opts: &Options, out: &mut Vec<CheckResult>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let r = &mut rng;
    let x = away_from_zero(r, &[2, 6, 5, 3]);
    let k = uniform(r, &[3, 3, 3, 4], -0.5, 0.5);
    let b = uniform(r, &[4], -0.5, 0.5);
    out.push(check_graph(
        "conv2d",
        &[x.clone(), k.clone(), b.clone()],
        1,
        opts,
        |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1),
    )?);
    out.push(check_graph(
        "conv2d_stride2",
        &[x.clone(), k, b],
        2,
        opts,
        |t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, 1),
    )?);
    let k1 = uniform(r, &[1, 1, 3, 5], -0.5, 0.5);
    out.push(check_graph(
        "conv2d_pointwise",
        &[x.clone(), k1],
        3,
        opts,
        |t, v| t.conv2d(v[0], v[1], None, 1, 0),
    )?);
    let a = uniform(r, &[4, 6], -1.0, 1.0);
    let w = uniform(r, &[6, 3], -1.0, 1.0);
    let bias = uniform(r, &[3], -1.0, 1.0);
    out.push(check_graph(
        "affine",
        &[a.clone(), w, bias],
        4,
        opts,
        |t, v| t.affine(v[0], v[1], Some(v[2])),
    )?);
    let a2 = uniform(r, &[4, 6], -1.0, 1.0);
    out.push(check_graph("add", &[a.clone(), a2], 5, opts, |t, v| {
        t.add(v[0], v[1])
    })?);
    let z = uniform(r, &[40], -4.0, 4.0);
    out.push(check_graph(
        "logistic",
        std::slice::from_ref(&z),
        6,
        opts,
        |t, v| t.activation(v[0], Activation::Logistic),
    )?);
    out.push(check_graph("shifted_sigmoid", &[z], 7, opts, |t, v| {
        t.activation(v[0], Activation::ShiftedSigmoid)
    })?);
    // Hard sigmoid is piecewise linear with kinks at ±1; keep probes off them.
    let hz = Tensor::from_fn(&[40], |i| {
        let m = r.gen_range(0.05..0.9);
        match i % 3 {
            0 => m,
            1 => -m,
            _ => 1.1 + m,
        }
    });
    out.push(check_graph("hard_sigmoid", &[hz], 8, opts, |t, v| {
        t.activation(v[0], Activation::HardSigmoid)
    })?);
    out.push(check_graph(
        "leaky_relu",
        &[away_from_zero(r, &[40])],
        9,
        opts,
        |t, v| t.activation(v[0], Activation::LeakyRelu(LEAKY_SLOPE)),
    )?);
    out.push(check_graph(
        "reduce_mean",
        std::slice::from_ref(&x),
        10,
        opts,
        |t, v| t.reduce_mean(v[0], &[1, 2]),
    )?);
    let rows = uniform(r, &[3, 4, 4, 2], -1.0, 1.0);
    let gate = uniform(r, &[3], 0.1, 1.0);
    out.push(check_graph(
        "scale_rows",
        &[rows, gate],
        11,
        opts,
        |t, v| t.scale_rows(v[0], v[1]),
    )?);
    out.push(check_graph(
        "resize_bilinear",
        std::slice::from_ref(&x),
        12,
        opts,
        |t, v| t.resize(v[0], 9, 4),
    )?);
    out.push(check_graph(
        "narrow",
        std::slice::from_ref(&x),
        13,
        opts,
        |t, v| t.narrow(v[0], 3, 1, 2),
    )?);
    let y = uniform(r, &[2, 6, 5, 3], -1.0, 1.0);
    out.push(check_graph("concat", &[x.clone(), y], 14, opts, |t, v| {
        t.concat(&[v[0], v[1]])
    })?);
    out.push(check_graph("reshape", &[x], 15, opts, |t, v| {
        t.reshape(v[0], &[12, 15])
    })?);
    out.push(check_graph(
        "standardize",
        &[uniform(r, &[3, 7], -2.0, 2.0)],
        16,
        opts,
        |t, v| t.standardize(v[0], 1e-5),
    )?);
    // Fractional offsets keep bilinear taps off integer grid lines.
    let (l, h, w, c, kp) = (3, 5, 4, 2, 4);
    let feats = uniform(r, &[l, h, w, c], -1.0, 1.0);
    let offs = Tensor::from_fn(&[h, w, kp, 2], |_| {
        let base: f64 = r.gen_range(-2.0..2.0f64).floor();
        base + r.gen_range(0.15..0.85)
    });
    let masks = uniform(r, &[h, w, kp], 0.1, 1.0);
    let wts = uniform(r, &[l, h, w, kp], -1.0, 1.0);
    out.push(check_graph(
        "deform_aggregate",
        &[feats.clone(), offs, masks, wts],
        17,
        opts,
        |t, v| t.deform_aggregate(v[0], v[1], v[2], v[3]),
    )?);
    // Distinct slopes keep the max in task modulation away from ties.
    let coeffs = Tensor::from_fn(&[c, 4], |i| [1.2, 0.3, 0.1, -0.2][i % 4]);
    out.push(check_graph(
        "task_modulate",
        &[feats, coeffs],
        18,
        opts,
        |t, v| t.task_modulate(v[0], v[1]),
    )?);
    Ok(())
}

/// Small pyramid-shaped tensor `[L,S,S,C]` for the attention checks.
fn head_fixture(r: &mut ChaCha8Rng) -> Result<(Tensor, DvfParams)> {
    let (l, s, c) = (3, 4, 8);
    let feats = uniform(r, &[l, s, s, c], -1.0, 1.0);
    let mut dvf = DvfParams::init(r, l, c, 4, 2)?;
    // Perturb the identity initializations so every path carries gradient.
    for t in [
        &mut dvf.scale.weight,
        &mut dvf.scale.bias,
        &mut dvf.sampling.weight,
    ] {
        for v in t.data_mut() {
            *v += r.gen_range(-0.1..0.1);
        }
    }
    for v in dvf.sampling.bias.data_mut() {
        *v += r.gen_range(-0.3..0.3);
    }
    Ok((feats, dvf))
}

fn head_checks(opts: &Options, out: &mut Vec<CheckResult>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let (feats, dvf) = head_fixture(&mut rng)?;
    let s = &dvf.scale;
    out.push(check_graph(
        "scale_attention",
        &[feats.clone(), s.weight.clone(), s.bias.clone()],
        31,
        opts,
        |t, v| {
            let p = crate::attention::ScaleVars {
                weight: v[1],
                bias: v[2],
            };
            scale_attention_t(t, v[0], p)
        },
    )?);
    let sp = &dvf.sampling;
    let k = sp.k;
    out.push(check_graph(
        "spatial_attention",
        &[feats.clone(), sp.weight.clone(), sp.bias.clone()],
        32,
        opts,
        |t, v| {
            let p = crate::attention::SamplingVars {
                k,
                weight: v[1],
                bias: v[2],
            };
            let (o, m, w) = sampling_field_t(t, v[0], p)?;
            spatial_attention_t(t, v[0], o, m, w)
        },
    )?);
    let th = &dvf.theta;
    out.push(check_graph(
        "task_attention",
        &[
            feats.clone(),
            th.fc1_weight.clone(),
            th.fc1_bias.clone(),
            th.fc2_weight.clone(),
            th.fc2_bias.clone(),
        ],
        33,
        opts,
        |t, v| {
            let p = crate::attention::ThetaVars {
                fc1_weight: v[1],
                fc1_bias: v[2],
                fc2_weight: v[3],
                fc2_bias: v[4],
            };
            task_attention_t(t, v[0], p)
        },
    )?);
    let mut inputs = vec![feats.clone()];
    inputs.extend(dvf_tensors(&dvf));
    out.push(check_graph("dvf_apply", &inputs, 34, opts, |t, v| {
        dvf_apply_t(t, v[0], dvf_vars(&v[1..], k))
    })?);

    let c = feats.dim(3);
    let ms = MultiScaleParams::init(&mut rng, c);
    let level = uniform(&mut rng, &[1, 4, 4, c], -1.0, 1.0);
    let mut inputs = vec![level.clone()];
    inputs.extend(ms.kernels.iter().cloned());
    inputs.extend(ms.biases.iter().cloned());
    out.push(check_graph(
        "multiscale_conv",
        &inputs,
        35,
        opts,
        |t, v| {
            let p = crate::attention::MultiScaleVars {
                kernels: [v[1], v[2], v[3]],
                biases: [v[4], v[5], v[6]],
            };
            multiscale_conv_t(t, v[0], p)
        },
    )?);

    let jgr = JgrParams::init(&mut rng, c, 5, 2, 2);
    let mut inputs = vec![level];
    for p in [&jgr.cls_hidden, &jgr.cls_out, &jgr.box_hidden, &jgr.box_out] {
        inputs.push(p.0.clone());
        inputs.push(p.1.clone());
    }
    let (nc, apc) = (jgr.n_categories, jgr.anchors_per_cell);
    out.push(check_graph("jgr_forward", &inputs, 36, opts, |t, v| {
        let p = crate::attention::JgrVars {
            n_categories: nc,
            anchors_per_cell: apc,
            cls_hidden: (v[1], v[2]),
            cls_out: (v[3], v[4]),
            box_hidden: (v[5], v[6]),
            box_out: (v[7], v[8]),
        };
        let cls = class_branch_t(t, v[0], &p)?;
        let bx = box_branch_t(t, v[0], &p)?;
        let cls = t.reshape(cls, &[t.value(cls).len()])?;
        let bx = t.reshape(bx, &[t.value(bx).len()])?;
        t.concat(&[cls, bx])
    })?);

    let x = uniform(&mut rng, &[1, 8, 8, 3], 0.0, 1.0);
    let kb = crate::init::conv_kernel(&mut rng, 3, 3, 6, 2.0);
    let bb = uniform(&mut rng, &[6], -0.1, 0.1);
    out.push(check_graph(
        "backbone_block",
        &[x, kb, bb],
        37,
        opts,
        |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
            t.activation(y, Activation::LeakyRelu(LEAKY_SLOPE))
        },
    )?);
    Ok(())
}

fn dvf_tensors(p: &DvfParams) -> Vec<Tensor> {
    vec![
        p.scale.weight.clone(),
        p.scale.bias.clone(),
        p.sampling.weight.clone(),
        p.sampling.bias.clone(),
        p.theta.fc1_weight.clone(),
        p.theta.fc1_bias.clone(),
        p.theta.fc2_weight.clone(),
        p.theta.fc2_bias.clone(),
    ]
}

fn dvf_vars(v: &[Var], k: usize) -> crate::attention::DvfVars {
    crate::attention::DvfVars {
        scale: crate::attention::ScaleVars {
            weight: v[0],
            bias: v[1],
        },
        sampling: crate::attention::SamplingVars {
            k,
            weight: v[2],
            bias: v[3],
        },
        theta: crate::attention::ThetaVars {
            fc1_weight: v[4],
            fc1_bias: v[5],
            fc2_weight: v[6],
            fc2_bias: v[7],
        },
    }
}

/// Random head outputs and labels over a tiny anchor set.
fn loss_fixture(
    r: &mut ChaCha8Rng,
    n_cat: usize,
) -> Result<(AnchorSet, Vec<HeadOutput>, Vec<Vec<Label>>)> {
    let anchors = AnchorConfig {
        strides: vec![8, 16],
        scales: vec![2.0, 3.0],
        aspect_ratios: vec![1.0],
    }
    .build(32, 32)?;
    let n = anchors.n_anchors();
    let mut outputs = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..2 {
        let out = HeadOutput {
            n_categories: n_cat,
            class_logits: (0..n * n_cat).map(|_| r.gen_range(-2.0..2.0)).collect(),
            box_params: (0..n)
                .map(|_| std::array::from_fn(|_| r.gen_range(-1.0..1.0)))
                .collect(),
            objectness: (0..n).map(|_| r.gen_range(-3.0..1.0)).collect(),
            joint_score: vec![0.0; n],
        };
        let gts: Vec<Label> = (0..3)
            .map(|_| {
                Label::new(
                    r.gen_range(0..n_cat),
                    BoxN::new(
                        r.gen_range(0.2..0.8),
                        r.gen_range(0.2..0.8),
                        r.gen_range(0.1..0.4),
                        r.gen_range(0.1..0.4),
                    ),
                )
            })
            .collect();
        outputs.push(out);
        labels.push(gts);
    }
    Ok((anchors, outputs, labels))
}

/// Field `f` of an anchor: class logits, then `tx,ty,tw,th`, then objectness.
fn field_mut(o: &mut HeadOutput, anchor: usize, f: usize) -> &mut f64 {
    let nc = o.n_categories;
    if f < nc {
        &mut o.class_logits[anchor * nc + f]
    } else if f < nc + 4 {
        &mut o.box_params[anchor][f - nc]
    } else {
        &mut o.objectness[anchor]
    }
}

/// Finite differences of `head_loss(...).total` in the head outputs.
fn check_head_loss(
    name: &str,
    cfg: &LossConfig,
    r: &mut ChaCha8Rng,
    opts: &Options,
) -> Result<CheckResult> {
    let (anchors, outputs, labels) = loss_fixture(r, cfg.alpha.len())?;
    let assignments: Vec<_> = labels
        .iter()
        .map(|l| assign_targets(l, &anchors, IGNORE_IOU))
        .collect();
    let targets: Vec<Vec<f64>> = outputs
        .iter()
        .zip(&assignments)
        .map(|(o, a)| objectness_targets(o, a, &anchors))
        .collect();
    let a_refs: Vec<_> = assignments.iter().collect();
    let total = |outs: &[HeadOutput]| -> Result<f64> {
        let refs: Vec<&HeadOutput> = outs.iter().collect();
        Ok(head_loss(&refs, &a_refs, &targets, cfg)?.0.total)
    };
    let refs: Vec<&HeadOutput> = outputs.iter().collect();
    let (_, grads) = head_loss(&refs, &a_refs, &targets, cfg)?;
    let scale = if opts.corrupt.as_deref() == Some(name) {
        1.01
    } else {
        1.0
    };
    let mut result = CheckResult {
        name: name.to_string(),
        probes: 0,
        max_rel_err: 0.0,
        worst: (0, 0),
    };
    let mut outs = outputs.clone();
    for (img, a) in assignments.iter().enumerate() {
        let n = outputs[img].n_anchors();
        let nc = outputs[img].n_categories;
        // Every positive anchor plus a sample of negatives.
        let mut probe: Vec<usize> = a.positives.iter().map(|p| p.anchor).collect();
        probe.extend(probe_indices(r, n).into_iter().take(8));
        for &anchor in &probe {
            let mut fields: Vec<(usize, f64)> = Vec::new();
            for j in 0..nc {
                fields.push((j, grads[img].class_logits[anchor * nc + j]));
            }
            for j in 0..4 {
                fields.push((nc + j, grads[img].box_params[anchor][j]));
            }
            fields.push((nc + 4, grads[img].objectness[anchor]));
            for (f, analytic) in fields {
                let v = *field_mut(&mut outs[img], anchor, f);
                let eps = REL_STEP * v.abs().max(1.0);
                *field_mut(&mut outs[img], anchor, f) = v + eps;
                let up = total(&outs)?;
                *field_mut(&mut outs[img], anchor, f) = v - eps;
                let down = total(&outs)?;
                *field_mut(&mut outs[img], anchor, f) = v;
                let e = rel_err(analytic * scale, (up - down) / (2.0 * eps));
                result.probes += 1;
                if e > result.max_rel_err {
                    result.max_rel_err = e;
                    result.worst = (img, anchor * (nc + 5) + f);
                }
            }
        }
    }
    Ok(result)
}

fn loss_checks(opts: &Options, out: &mut Vec<CheckResult>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    let mut focal = LossConfig::new(3);
    focal.alpha = vec![1.4, 6.5, 7.0];
    out.push(check_head_loss("loss_focal", &focal, &mut rng, opts)?);
    let mut ce = focal.clone();
    ce.use_focal_cls = false;
    out.push(check_head_loss("loss_cross_entropy", &ce, &mut rng, opts)?);
    let mut plain = focal.clone();
    plain.objectness_iou = false;
    out.push(check_head_loss(
        "loss_without_objectness",
        &plain,
        &mut rng,
        opts,
    )?);
    out.push(check_model_loss(&focal, opts)?);
    Ok(())
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        n_categories: 3,
        input_h: 32,
        input_w: 32,
        backbone: BackboneConfig {
            stem: 4,
            widths: vec![6, 8, 8],
            strides: vec![2, 4, 8],
            channels: 8,
        },
        anchor_scales: vec![3.0],
        anchor_ratios: vec![1.0],
        points: 4,
        reduction: 2,
        head_hidden: 6,
    }
}

/// `total_loss` through the whole model, differentiated in its parameters.
fn check_model_loss(cfg: &LossConfig, opts: &Options) -> Result<CheckResult> {
    const NAME: &str = "total_loss_full_head";
    let mut rng = ChaCha8Rng::seed_from_u64(59);
    let mc = tiny_model_config();
    let mut model = Model::init(&mut rng, mc.clone())?;
    // Move the sampling predictor off its zero initialization.
    for v in model.dvf.sampling.weight.data_mut() {
        *v = rng.gen_range(-0.05..0.05);
    }
    let anchors = mc.anchors()?;
    let image = uniform(&mut rng, &[1, 32, 32, 3], 0.0, 1.0);
    let labels = vec![
        Label::new(0, BoxN::new(0.3, 0.4, 0.25, 0.2)),
        Label::new(2, BoxN::new(0.7, 0.6, 0.2, 0.3)),
    ];
    let assignment = assign_targets(&labels, &anchors, IGNORE_IOU);
    let forward = |m: &Model| -> Result<(Tape, crate::model::ModelVars, HeadOutput)> {
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let vars = m.forward_t(&mut tape, x)?;
        let out = m.head_output(&tape, &vars)?;
        Ok((tape, vars, out))
    };
    let (tape, vars, out) = forward(&model)?;
    let targets = vec![objectness_targets(&out, &assignment, &anchors)];
    let loss_of = |m: &Model| -> Result<f64> {
        let (_, _, o) = forward(m)?;
        Ok(head_loss(&[&o], &[&assignment], &targets, cfg)?.0.total)
    };
    let (_, head_grads) = head_loss(&[&out], &[&assignment], &targets, cfg)?;
    let seeds = branch_seeds(&tape, &vars, &head_grads[0], mc.n_categories);
    let mut grads = tape.backward(&seeds)?;
    let scale = if opts.corrupt.as_deref() == Some(NAME) {
        1.01
    } else {
        1.0
    };
    let analytic: Vec<Vec<f64>> = vars
        .params
        .iter()
        .zip(model.tensors())
        .map(|(&p, (_, t))| grads.take(p).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    let mut result = CheckResult {
        name: NAME.to_string(),
        probes: 0,
        max_rel_err: 0.0,
        worst: (0, 0),
    };
    for (i, grad) in analytic.iter().enumerate() {
        for j in probe_indices(&mut rng, grad.len()).into_iter().take(6) {
            let v = model.tensors()[i].1.data()[j];
            let eps = REL_STEP * v.abs().max(1.0);
            model.tensors_mut()[i].data_mut()[j] = v + eps;
            let up = loss_of(&model)?;
            model.tensors_mut()[i].data_mut()[j] = v - eps;
            let down = loss_of(&model)?;
            model.tensors_mut()[i].data_mut()[j] = v;
            let e = rel_err(grad[j] * scale, (up - down) / (2.0 * eps));
            result.probes += 1;
            if e > result.max_rel_err {
                result.max_rel_err = e;
                result.worst = (i, j);
            }
        }
    }
    Ok(result)
}

/// Runs every check in `scope` in 64-bit mode.
pub fn run(scope: Scope, opts: &Options) -> Result<Vec<CheckResult>> {
    with_precision(Precision::F64, || {
        let mut out = Vec::new();
        if matches!(scope, Scope::Ops | Scope::All) {
            op_checks(opts, &mut out)?;
        }
        if matches!(scope, Scope::Head | Scope::All) {
            head_checks(opts, &mut out)?;
        }
        if matches!(scope, Scope::Loss | Scope::All) {
            loss_checks(opts, &mut out)?;
        }
        Ok(out)
    })
}

pub fn format_results(results: &[CheckResult]) -> String {
    let mut s = String::new();
    for r in results {
        s.push_str(&format!(
            "{:<26} {:>4} probes  max rel err {:.3e}  {}\n",
            r.name,
            r.probes,
            r.max_rel_err,
            if r.passed() { "ok" } else { "FAIL" }
        ));
    }
    s
}
