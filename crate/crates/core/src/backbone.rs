//! Small convolutional pyramid feeding the head: a stride-1 stem, stride-2
//! blocks, and 1×1 projections of selected blocks to a common channel count.

use rand::Rng;

use crate::attention::{PyramidFeatures, LEAKY_SLOPE};
use crate::error::{Error, Result};
use crate::init;
use crate::ops::Activation;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub stem: usize,
    /// Output width of each stride-2 block.
    pub widths: Vec<usize>,
    /// Output strides of the pyramid levels; each must be `2^i` for a block `i`.
    pub strides: Vec<usize>,
    /// Channel count of every pyramid level.
    pub channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stem: 8,
            widths: vec![16, 32, 64, 64, 64],
            strides: vec![8, 16, 32],
            channels: 64,
        }
    }
}

impl BackboneConfig {
    /// Index (1-based) of the block whose output has each level's stride.
    pub fn level_blocks(&self) -> Result<Vec<usize>> {
        self.strides
            .iter()
            .map(|&s| {
                if s == 0 || !s.is_power_of_two() {
                    return Err(Error::Config(format!("stride {s} is not a power of two")));
                }
                let b = s.trailing_zeros() as usize;
                if b == 0 || b > self.widths.len() {
                    return Err(Error::Config(format!(
                        "stride {s} needs {b} stride-2 blocks, only {} configured",
                        self.widths.len()
                    )));
                }
                Ok(b)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stem == 0 || self.channels == 0 || self.widths.contains(&0) {
            return Err(Error::Config("backbone widths must be positive".into()));
        }
        if self.strides.is_empty() {
            return Err(Error::Config(
                "backbone needs at least one output stride".into(),
            ));
        }
        let blocks = self.level_blocks()?;
        if blocks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("backbone strides must be increasing".into()));
        }
        Ok(())
    }
}

pub type ConvParams = (Tensor, Tensor);

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    pub config: BackboneConfig,
    pub stem: ConvParams,
    pub blocks: Vec<ConvParams>,
    pub projections: Vec<ConvParams>,
}

#[derive(Clone, Debug)]
pub struct BackboneVars {
    pub stem: (Var, Var),
    pub blocks: Vec<(Var, Var)>,
    pub projections: Vec<(Var, Var)>,
    level_blocks: Vec<usize>,
}

fn conv_init<R: Rng>(rng: &mut R, k: usize, cin: usize, cout: usize, gain: f64) -> ConvParams {
    (
        init::conv_kernel(rng, k, cin, cout, gain),
        Tensor::zeros(&[cout]),
    )
}

impl BackboneParams {
    pub fn init<R: Rng>(rng: &mut R, config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let stem = conv_init(rng, 3, 3, config.stem, 2.0);
        let mut blocks = Vec::with_capacity(config.widths.len());
        let mut cin = config.stem;
        for &w in &config.widths {
            blocks.push(conv_init(rng, 3, cin, w, 2.0));
            cin = w;
        }
        let projections = config
            .level_blocks()?
            .into_iter()
            .map(|b| conv_init(rng, 1, config.widths[b - 1], config.channels, 1.0))
            .collect();
        Ok(Self {
            config,
            stem,
            blocks,
            projections,
        })
    }

    /// Same shapes as [`BackboneParams::init`], every value zero.
    pub fn zeros(config: BackboneConfig) -> Result<Self> {
        let mut p = Self::init(&mut rand::rngs::mock::StepRng::new(0, 0), config)?;
        for t in p.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        Ok(p)
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v = vec![
            ("backbone.stem.weight".to_string(), &self.stem.0),
            ("backbone.stem.bias".to_string(), &self.stem.1),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            v.push((format!("backbone.block{}.weight", i + 1), &b.0));
            v.push((format!("backbone.block{}.bias", i + 1), &b.1));
        }
        for (i, p) in self.projections.iter().enumerate() {
            v.push((format!("backbone.proj{i}.weight"), &p.0));
            v.push((format!("backbone.proj{i}.bias"), &p.1));
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.stem.0, &mut self.stem.1];
        for b in &mut self.blocks {
            v.push(&mut b.0);
            v.push(&mut b.1);
        }
        for p in &mut self.projections {
            v.push(&mut p.0);
            v.push(&mut p.1);
        }
        v
    }

    /// Records leaves in the order of [`BackboneParams::tensors`].
    pub fn record(&self, tape: &mut Tape) -> Result<BackboneVars> {
        let mut pair = |p: &ConvParams| (tape.leaf(p.0.clone()), tape.leaf(p.1.clone()));
        let stem = pair(&self.stem);
        let blocks = self.blocks.iter().map(&mut pair).collect();
        let projections = self.projections.iter().map(&mut pair).collect();
        Ok(BackboneVars {
            stem,
            blocks,
            projections,
            level_blocks: self.config.level_blocks()?,
        })
    }

    /// Pyramid levels for one `[1,H,W,3]` image.
    pub fn forward(&self, image: &Tensor) -> Result<PyramidFeatures> {
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let vars = self.record(&mut tape)?;
        let levels = backbone_forward_t(&mut tape, x, &vars)?;
        PyramidFeatures::new(
            levels
                .into_iter()
                .map(|v| {
                    let t = tape.value(v);
                    t.clone().reshape(&t.shape()[1..])
                })
                .collect::<Result<_>>()?,
        )
    }
}

impl BackboneVars {
    pub fn all(&self) -> Vec<Var> {
        let mut v = vec![self.stem.0, self.stem.1];
        for b in self.blocks.iter().chain(&self.projections) {
            v.push(b.0);
            v.push(b.1);
        }
        v
    }
}

/// `[1,H_l,W_l,C]` levels for a `[1,H,W,3]` image.
pub fn backbone_forward_t(tape: &mut Tape, image: Var, p: &BackboneVars) -> Result<Vec<Var>> {
    let leaky = Activation::LeakyRelu(LEAKY_SLOPE);
    let x = tape.conv2d(image, p.stem.0, Some(p.stem.1), 1, 1)?;
    let mut x = tape.activation(x, leaky)?;
    let mut outputs = Vec::with_capacity(p.blocks.len());
    for &(k, b) in &p.blocks {
        let y = tape.conv2d(x, k, Some(b), 2, 1)?;
        x = tape.activation(y, leaky)?;
        outputs.push(x);
    }
    p.level_blocks
        .iter()
        .zip(&p.projections)
        .map(|(&blk, &(k, b))| tape.conv2d(outputs[blk - 1], k, Some(b), 1, 0))
        .collect()
}
