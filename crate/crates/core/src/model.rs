//! The full detector: backbone pyramid, multi-scale convolutions, the
//! attention stack with a residual connection back to each level, and the
//! two regression branches.

use std::fmt::Write as _;

use rand::Rng;

use crate::anchors::{AnchorConfig, AnchorSet};
use crate::attention::{
    box_branch_t, class_branch_t, common_view_t, dvf_apply_t, multiscale_conv_t, DvfParams,
    HeadOutput, JgrParams, MultiScaleParams, LEAKY_SLOPE,
};
use crate::backbone::{backbone_forward_t, BackboneConfig, BackboneParams};
use crate::config::{join, KeyValues};
use crate::error::{Error, Result};
use crate::ops::Activation;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_categories: usize,
    pub input_h: usize,
    pub input_w: usize,
    pub backbone: BackboneConfig,
    pub anchor_scales: Vec<f64>,
    pub anchor_ratios: Vec<f64>,
    /// Sampling points of the spatial attention.
    pub points: usize,
    /// Reduction ratio of the task-attention hyper network.
    pub reduction: usize,
    /// Hidden width of each regression branch.
    pub head_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let anchors = AnchorConfig::default();
        Self {
            n_categories: 3,
            input_h: 160,
            input_w: 160,
            backbone: BackboneConfig::default(),
            anchor_scales: anchors.scales,
            anchor_ratios: anchors.aspect_ratios,
            points: 9,
            reduction: 4,
            head_hidden: 32,
        }
    }
}

impl ModelConfig {
    pub fn anchor_config(&self) -> AnchorConfig {
        AnchorConfig {
            strides: self.backbone.strides.clone(),
            scales: self.anchor_scales.clone(),
            aspect_ratios: self.anchor_ratios.clone(),
        }
    }

    pub fn anchors(&self) -> Result<AnchorSet> {
        self.anchor_config().build(self.input_h, self.input_w)
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.anchor_scales.len() * self.anchor_ratios.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_categories == 0 {
            return Err(Error::Config("need at least one category".into()));
        }
        if self.input_h == 0 || self.input_w == 0 {
            return Err(Error::Config("input size must be positive".into()));
        }
        if self.points == 0 {
            return Err(Error::Config("spatial attention needs K >= 1".into()));
        }
        if self.reduction == 0 || self.head_hidden == 0 {
            return Err(Error::Config(
                "reduction and head_hidden must be positive".into(),
            ));
        }
        self.backbone.validate()?;
        self.anchors().map(|_| ())
    }

    /// Keys written under the `model.` prefix of a checkpoint and accepted in
    /// training configs.
    pub fn to_kv(&self, prefix: &str) -> String {
        let mut s = String::new();
        let b = &self.backbone;
        let _ = writeln!(s, "{prefix}categories = {}", self.n_categories);
        let _ = writeln!(s, "{prefix}input_h = {}", self.input_h);
        let _ = writeln!(s, "{prefix}input_w = {}", self.input_w);
        let _ = writeln!(s, "{prefix}stem = {}", b.stem);
        let _ = writeln!(s, "{prefix}widths = {}", join(&b.widths));
        let _ = writeln!(s, "{prefix}strides = {}", join(&b.strides));
        let _ = writeln!(s, "{prefix}channels = {}", b.channels);
        let _ = writeln!(s, "{prefix}anchor_scales = {}", join(&self.anchor_scales));
        let _ = writeln!(s, "{prefix}anchor_ratios = {}", join(&self.anchor_ratios));
        let _ = writeln!(s, "{prefix}points = {}", self.points);
        let _ = writeln!(s, "{prefix}reduction = {}", self.reduction);
        let _ = writeln!(s, "{prefix}head_hidden = {}", self.head_hidden);
        s
    }

    pub fn from_kv(kv: &mut KeyValues, prefix: &str) -> Result<Self> {
        let d = ModelConfig::default();
        let k = |name: &str| format!("{prefix}{name}");
        let cfg = ModelConfig {
            n_categories: kv.take_or(&k("categories"), d.n_categories)?,
            input_h: kv.take_or(&k("input_h"), d.input_h)?,
            input_w: kv.take_or(&k("input_w"), d.input_w)?,
            backbone: BackboneConfig {
                stem: kv.take_or(&k("stem"), d.backbone.stem)?,
                widths: kv.take_list(&k("widths"))?.unwrap_or(d.backbone.widths),
                strides: kv.take_list(&k("strides"))?.unwrap_or(d.backbone.strides),
                channels: kv.take_or(&k("channels"), d.backbone.channels)?,
            },
            anchor_scales: kv
                .take_list(&k("anchor_scales"))?
                .unwrap_or(d.anchor_scales),
            anchor_ratios: kv
                .take_list(&k("anchor_ratios"))?
                .unwrap_or(d.anchor_ratios),
            points: kv.take_or(&k("points"), d.points)?,
            reduction: kv.take_or(&k("reduction"), d.reduction)?,
            head_hidden: kv.take_or(&k("head_hidden"), d.head_hidden)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub backbone: BackboneParams,
    pub multiscale: MultiScaleParams,
    pub dvf: DvfParams,
    pub jgr: JgrParams,
}

/// Tape handles of every parameter plus the model outputs.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub params: Vec<Var>,
    pub class_maps: Vec<Var>,
    pub box_maps: Vec<Var>,
    pub dvf: Var,
}

impl Model {
    pub fn init<R: Rng>(rng: &mut R, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = config.backbone.channels;
        let levels = config.backbone.strides.len();
        let backbone = BackboneParams::init(rng, config.backbone.clone())?;
        let multiscale = MultiScaleParams::init(rng, c);
        let dvf = DvfParams::init(rng, levels, c, config.points, config.reduction)?;
        let jgr = JgrParams::init(
            rng,
            c,
            config.head_hidden,
            config.n_categories,
            config.anchors_per_cell(),
        );
        let mut m = Self {
            config,
            backbone,
            multiscale,
            dvf,
            jgr,
        };
        m.round_to_f32();
        Ok(m)
    }

    /// Parameters in a fixed order with stable names.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v = self.backbone.tensors();
        for (i, k) in [1, 3, 5].iter().enumerate() {
            v.push((
                format!("multiscale.k{k}.weight"),
                &self.multiscale.kernels[i],
            ));
        }
        for (i, k) in [1, 3, 5].iter().enumerate() {
            v.push((format!("multiscale.k{k}.bias"), &self.multiscale.biases[i]));
        }
        let d = &self.dvf;
        v.push(("dvf.scale.weight".into(), &d.scale.weight));
        v.push(("dvf.scale.bias".into(), &d.scale.bias));
        v.push(("dvf.sampling.weight".into(), &d.sampling.weight));
        v.push(("dvf.sampling.bias".into(), &d.sampling.bias));
        v.push(("dvf.theta.fc1.weight".into(), &d.theta.fc1_weight));
        v.push(("dvf.theta.fc1.bias".into(), &d.theta.fc1_bias));
        v.push(("dvf.theta.fc2.weight".into(), &d.theta.fc2_weight));
        v.push(("dvf.theta.fc2.bias".into(), &d.theta.fc2_bias));
        let j = &self.jgr;
        for (name, p) in [
            ("cls_hidden", &j.cls_hidden),
            ("cls_out", &j.cls_out),
            ("box_hidden", &j.box_hidden),
            ("box_out", &j.box_out),
        ] {
            v.push((format!("jgr.{name}.weight"), &p.0));
            v.push((format!("jgr.{name}.bias"), &p.1));
        }
        v
    }

    /// Mutable parameters in the order of [`Model::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.backbone.tensors_mut();
        let [k0, k1, k2] = &mut self.multiscale.kernels;
        v.extend([k0, k1, k2]);
        let [b0, b1, b2] = &mut self.multiscale.biases;
        v.extend([b0, b1, b2]);
        let d = &mut self.dvf;
        v.extend([
            &mut d.scale.weight,
            &mut d.scale.bias,
            &mut d.sampling.weight,
            &mut d.sampling.bias,
            &mut d.theta.fc1_weight,
            &mut d.theta.fc1_bias,
            &mut d.theta.fc2_weight,
            &mut d.theta.fc2_bias,
        ]);
        let j = &mut self.jgr;
        for p in [
            &mut j.cls_hidden,
            &mut j.cls_out,
            &mut j.box_hidden,
            &mut j.box_out,
        ] {
            v.push(&mut p.0);
            v.push(&mut p.1);
        }
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    /// Records every parameter as a leaf (in [`Model::tensors`] order) and runs
    /// the forward pass on a `[1,H,W,3]` image.
    pub fn forward_t(&self, tape: &mut Tape, image: Var) -> Result<ModelVars> {
        let bb = self.backbone.record(tape)?;
        let ms = self.multiscale.record(tape);
        let dv = self.dvf.record(tape);
        let jg = self.jgr.record(tape);
        let mut params = bb.all();
        params.extend(ms.kernels);
        params.extend(ms.biases);
        params.extend([
            dv.scale.weight,
            dv.scale.bias,
            dv.sampling.weight,
            dv.sampling.bias,
            dv.theta.fc1_weight,
            dv.theta.fc1_bias,
            dv.theta.fc2_weight,
            dv.theta.fc2_bias,
        ]);
        for p in [jg.cls_hidden, jg.cls_out, jg.box_hidden, jg.box_out] {
            params.push(p.0);
            params.push(p.1);
        }

        let leaky = Activation::LeakyRelu(LEAKY_SLOPE);
        let levels = backbone_forward_t(tape, image, &bb)?;
        let mut fused = Vec::with_capacity(levels.len());
        for &l in &levels {
            let m = multiscale_conv_t(tape, l, ms)?;
            fused.push(tape.activation(m, leaky)?);
        }
        let common = common_view_t(tape, &fused)?;
        let dvf = dvf_apply_t(tape, common, dv)?;
        let mut class_maps = Vec::with_capacity(levels.len());
        let mut box_maps = Vec::with_capacity(levels.len());
        for (l, &m) in fused.iter().enumerate() {
            let row = tape.narrow(dvf, 0, l, 1)?;
            let (h, w) = (tape.shape(m)[1], tape.shape(m)[2]);
            let row = if tape.shape(row)[1..3] == [h, w] {
                row
            } else {
                tape.resize(row, h, w)?
            };
            let g = tape.add(m, row)?;
            class_maps.push(class_branch_t(tape, g, &jg)?);
            box_maps.push(box_branch_t(tape, g, &jg)?);
        }
        Ok(ModelVars {
            params,
            class_maps,
            box_maps,
            dvf,
        })
    }

    /// Head outputs assembled from a recorded forward pass.
    pub fn head_output(&self, tape: &Tape, vars: &ModelVars) -> Result<HeadOutput> {
        let levels: Vec<(&Tensor, &Tensor)> = vars
            .class_maps
            .iter()
            .zip(&vars.box_maps)
            .map(|(&c, &b)| (tape.value(c), tape.value(b)))
            .collect();
        HeadOutput::assemble(
            &levels,
            self.config.n_categories,
            self.config.anchors_per_cell(),
        )
    }

    /// Head outputs and the post-attention feature tensor for one image.
    pub fn infer(&self, image: &Tensor) -> Result<(HeadOutput, Tensor)> {
        self.check_input(image)?;
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let vars = self.forward_t(&mut tape, x)?;
        let out = self.head_output(&tape, &vars)?;
        Ok((out, tape.value(vars.dvf).clone()))
    }

    pub fn check_input(&self, image: &Tensor) -> Result<()> {
        let want = [1, self.config.input_h, self.config.input_w, 3];
        if image.shape() != want {
            return Err(Error::shape(
                "model input",
                format!("expected {want:?}, got {:?}", image.shape()),
            ));
        }
        Ok(())
    }
}

/// Splits per-anchor gradients back into the per-level branch output layout.
pub fn branch_seeds(
    tape: &Tape,
    vars: &ModelVars,
    grads: &crate::losses::HeadGrads,
    n_categories: usize,
) -> Vec<(Var, Vec<f64>)> {
    let per = n_categories + 1;
    let mut seeds = Vec::with_capacity(2 * vars.class_maps.len());
    let mut anchor = 0;
    for (&c, &b) in vars.class_maps.iter().zip(&vars.box_maps) {
        let n = tape.value(b).len() / 4;
        let mut gc = vec![0.0; tape.value(c).len()];
        let mut gb = vec![0.0; n * 4];
        for a in 0..n {
            let g = anchor + a;
            gc[a * per..a * per + n_categories]
                .copy_from_slice(&grads.class_logits[g * n_categories..(g + 1) * n_categories]);
            gc[a * per + n_categories] = grads.objectness[g];
            gb[a * 4..a * 4 + 4].copy_from_slice(&grads.box_params[g]);
        }
        anchor += n;
        seeds.push((c, gc));
        seeds.push((b, gb));
    }
    seeds
}
