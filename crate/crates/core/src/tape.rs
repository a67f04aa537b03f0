//! Reverse-mode differentiation over recorded tensor ops.
//!
//! A [`Tape`] owns every intermediate value. Ops append nodes; [`Tape::backward`]
//! walks the nodes in exact reverse recording order and accumulates adjoints
//! additively into each parent. A tape is confined to one thread.

use crate::attention::kernels as attn;
use crate::error::{Error, Result};
use crate::ops::{self, Activation, ConvGeometry, Reduction, ResizePlan};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub(crate) fn from_index(i: usize) -> Self {
        Var(i)
    }

    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Constant,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
        cols: Option<Vec<f64>>,
    },
    Affine {
        input: Var,
        weights: Var,
        bias: Option<Var>,
        dims: (usize, usize, usize),
    },
    Add(Var, Var),
    Activation {
        input: Var,
        act: Activation,
    },
    ReduceMean {
        input: Var,
        reduction: Reduction,
    },
    ScaleRows {
        input: Var,
        gate: Var,
    },
    Resize {
        input: Var,
        plan: ResizePlan,
    },
    Narrow {
        input: Var,
        outer: usize,
        axis_len: usize,
        inner: usize,
        start: usize,
        len: usize,
    },
    Concat {
        inputs: Vec<Var>,
    },
    Reshape {
        input: Var,
    },
    Standardize {
        input: Var,
        eps: f64,
    },
    DeformAggregate {
        features: Var,
        offsets: Var,
        masks: Var,
        weights: Var,
    },
    TaskModulate {
        input: Var,
        coeffs: Var,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Conv2d { .. } => "conv2d",
            Op::Affine { .. } => "affine",
            Op::Add(..) => "add",
            Op::Activation { act, .. } => act.name(),
            Op::ReduceMean { .. } => "reduce_mean",
            Op::ScaleRows { .. } => "scale_rows",
            Op::Resize { .. } => "resize_bilinear",
            Op::Narrow { .. } => "narrow",
            Op::Concat { .. } => "concat",
            Op::Reshape { .. } => "reshape",
            Op::Standardize { .. } => "standardize",
            Op::DeformAggregate { .. } => "deform_aggregate",
            Op::TaskModulate { .. } => "task_modulate",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Constant,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        value.ensure_finite(op.name())?;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let geom = ConvGeometry::new(self.shape(input), self.shape(kernel), stride, pad)?;
        if let Some(b) = bias {
            if self.value(b).len() != geom.out_channels {
                return Err(Error::shape(
                    "conv2d",
                    format!(
                        "bias has {} values for Cout={}",
                        self.value(b).len(),
                        geom.out_channels
                    ),
                ));
            }
        }
        let (value, cols) = ops::conv2d_forward_cols(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
        );
        self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            },
        )
    }

    pub fn affine(&mut self, input: Var, weights: Var, bias: Option<Var>) -> Result<Var> {
        let value = ops::affine(
            self.value(input),
            self.value(weights),
            bias.map(|b| self.value(b)),
        )?;
        let dims = ops::affine_dims(self.shape(input), self.shape(weights))?;
        self.push(
            value,
            Op::Affine {
                input,
                weights,
                bias,
                dims,
            },
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", x.shape(), y.shape()),
            ));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let value = Tensor::from_parts(x.shape().to_vec(), data).rounded();
        self.push(value, Op::Add(a, b))
    }

    pub fn activation(&mut self, input: Var, act: Activation) -> Result<Var> {
        let value = act.forward(self.value(input));
        self.push(value, Op::Activation { input, act })
    }

    /// Mean over `axes`, dropping them.
    pub fn reduce_mean(&mut self, input: Var, axes: &[usize]) -> Result<Var> {
        let reduction = Reduction::new(self.shape(input), axes)?;
        let data = reduction.forward(self.value(input).data());
        let value = Tensor::from_parts(reduction.out_shape.clone(), data).rounded();
        self.push(value, Op::ReduceMean { input, reduction })
    }

    /// `out[i, ..] = input[i, ..] · gate[i]` with `gate` one value per leading index.
    pub fn scale_rows(&mut self, input: Var, gate: Var) -> Result<Var> {
        let (x, g) = (self.value(input), self.value(gate));
        if g.len() != x.dim(0) {
            return Err(Error::shape(
                "scale_rows",
                format!("gate has {} values for axis 0 of {:?}", g.len(), x.shape()),
            ));
        }
        let inner = x.len() / x.dim(0);
        let data = x
            .data()
            .chunks_exact(inner)
            .zip(g.data())
            .flat_map(|(row, &s)| row.iter().map(move |v| v * s))
            .collect();
        let value = Tensor::from_parts(x.shape().to_vec(), data).rounded();
        self.push(value, Op::ScaleRows { input, gate })
    }

    /// Bilinear resize of `[N,H,W,C]` to `[N,out_h,out_w,C]`.
    pub fn resize(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let plan = ResizePlan::new(self.shape(input), out_h, out_w)?;
        let value =
            Tensor::from_parts(plan.out_shape(), plan.forward(self.value(input).data())).rounded();
        self.push(value, Op::Resize { input, plan })
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let axis_len = shape[axis];
        let src = self.value(input).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * axis_len + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::from_parts(out_shape, data);
        self.push(
            value,
            Op::Narrow {
                input,
                outer,
                axis_len,
                inner,
                start,
                len,
            },
        )
    }

    /// Concatenation along axis 0.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &v in inputs {
            let t = self.value(v);
            if t.shape()[1..] != tail[..] {
                return Err(Error::shape(
                    "concat",
                    format!("trailing axes {:?} vs {:?}", &t.shape()[1..], tail),
                ));
            }
            rows += t.dim(0);
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let value = Tensor::from_parts(shape, data);
        self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
        )
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        self.push(value, Op::Reshape { input })
    }

    /// Standardizes each row over the last axis to zero mean and unit variance.
    pub fn standardize(&mut self, input: Var, eps: f64) -> Result<Var> {
        let value = ops::standardize(self.value(input), eps);
        self.push(value, Op::Standardize { input, eps })
    }

    /// Deformable aggregation; see [`crate::attention::spatial_attention`].
    pub fn deform_aggregate(
        &mut self,
        features: Var,
        offsets: Var,
        masks: Var,
        weights: Var,
    ) -> Result<Var> {
        let value = attn::deform_aggregate(
            self.value(features),
            self.value(offsets),
            self.value(masks),
            self.value(weights),
        )?;
        self.push(
            value,
            Op::DeformAggregate {
                features,
                offsets,
                masks,
                weights,
            },
        )
    }

    /// Channel-wise `max(x·α1 + β1, x·α2 + β2)` with `coeffs [C,4]`.
    pub fn task_modulate(&mut self, input: Var, coeffs: Var) -> Result<Var> {
        let value = attn::task_modulate(self.value(input), self.value(coeffs))?;
        self.push(value, Op::TaskModulate { input, coeffs })
    }

    /// Reverse sweep from the given output adjoints.
    pub fn backward(&self, seeds: &[(Var, Vec<f64>)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            if g.len() != self.value(*v).len() {
                return Err(Error::shape(
                    "backward",
                    format!(
                        "seed of {} values for node of {}",
                        g.len(),
                        self.value(*v).len()
                    ),
                ));
            }
            accumulate(&mut grads, *v, g.clone());
        }
        for idx in (0..self.nodes.len()).rev() {
            let (before, rest) = grads.split_at_mut(idx);
            let Some(dout) = rest[0].as_deref() else {
                continue;
            };
            let node = &self.nodes[idx];
            let contributions = self.node_backward(node, dout)?;
            for (v, g) in contributions {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite {
                        op: format!("{} (backward)", node.op.name()),
                    });
                }
                accumulate(before, v, g);
            }
        }
        Ok(Gradients { grads })
    }

    fn node_backward(&self, node: &Node, dout: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let out = match &node.op {
            Op::Leaf | Op::Constant => Vec::new(),
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            } => {
                let need_input = !matches!(self.nodes[input.0].op, Op::Constant);
                let (dx, dk, db) = ops::conv2d_backward(
                    geom,
                    self.value(*input).data(),
                    cols.as_deref(),
                    self.value(*kernel).data(),
                    dout,
                    need_input,
                );
                let mut v = vec![(*kernel, dk)];
                if let Some(dx) = dx {
                    v.push((*input, dx));
                }
                if let Some(b) = bias {
                    v.push((*b, db));
                }
                v
            }
            Op::Affine {
                input,
                weights,
                bias,
                dims: (rows, cin, cout),
            } => {
                let (dx, dw, db) = ops::affine_backward(
                    self.value(*input).data(),
                    self.value(*weights).data(),
                    dout,
                    *rows,
                    *cin,
                    *cout,
                );
                let mut v = vec![(*input, dx), (*weights, dw)];
                if let Some(b) = bias {
                    v.push((*b, db));
                }
                v
            }
            Op::Add(a, b) => vec![(*a, dout.to_vec()), (*b, dout.to_vec())],
            Op::Activation { input, act } => {
                let x = self.value(*input).data();
                let y = node.value.data();
                let dx = dout
                    .iter()
                    .zip(x.iter().zip(y))
                    .map(|(d, (&xi, &yi))| d * act.derivative(xi, yi))
                    .collect();
                vec![(*input, dx)]
            }
            Op::ReduceMean { input, reduction } => vec![(*input, reduction.backward(dout))],
            Op::ScaleRows { input, gate } => {
                let x = self.value(*input);
                let g = self.value(*gate).data();
                let inner = x.len() / x.dim(0);
                let mut dx = vec![0.0; x.len()];
                let mut dg = vec![0.0; g.len()];
                for (i, ((xr, dr), dxr)) in x
                    .data()
                    .chunks_exact(inner)
                    .zip(dout.chunks_exact(inner))
                    .zip(dx.chunks_exact_mut(inner))
                    .enumerate()
                {
                    let mut s = 0.0;
                    for j in 0..inner {
                        dxr[j] = dr[j] * g[i];
                        s += dr[j] * xr[j];
                    }
                    dg[i] = s;
                }
                vec![(*input, dx), (*gate, dg)]
            }
            Op::Resize { input, plan } => vec![(*input, plan.backward(dout))],
            Op::Narrow {
                input,
                outer,
                axis_len,
                inner,
                start,
                len,
            } => {
                let mut dx = vec![0.0; outer * axis_len * inner];
                for o in 0..*outer {
                    let dst = (o * axis_len + start) * inner;
                    let src = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&dout[src..src + len * inner]);
                }
                vec![(*input, dx)]
            }
            Op::Concat { inputs } => {
                let mut offset = 0;
                inputs
                    .iter()
                    .map(|&v| {
                        let n = self.value(v).len();
                        let g = dout[offset..offset + n].to_vec();
                        offset += n;
                        (v, g)
                    })
                    .collect()
            }
            Op::Reshape { input } => vec![(*input, dout.to_vec())],
            Op::Standardize { input, eps } => {
                let x = self.value(*input);
                let n = *x.shape().last().unwrap();
                vec![(*input, ops::standardize_backward(x.data(), dout, n, *eps))]
            }
            Op::DeformAggregate {
                features,
                offsets,
                masks,
                weights,
            } => {
                let g = attn::deform_aggregate_backward(
                    self.value(*features),
                    self.value(*offsets),
                    self.value(*masks),
                    self.value(*weights),
                    dout,
                );
                vec![
                    (*features, g.features),
                    (*offsets, g.offsets),
                    (*masks, g.masks),
                    (*weights, g.weights),
                ]
            }
            Op::TaskModulate { input, coeffs } => {
                let (dx, dc) =
                    attn::task_modulate_backward(self.value(*input), self.value(*coeffs), dout);
                vec![(*input, dx), (*coeffs, dc)]
            }
        };
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{with_precision, Precision};

    #[test]
    fn gradients_accumulate_over_fanout() {
        with_precision(Precision::F64, || {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
            let y = tape.add(x, x).unwrap();
            let z = tape.add(y, x).unwrap();
            let g = tape.backward(&[(z, vec![1.0, 1.0, 1.0])]).unwrap();
            assert_eq!(g.get(x).unwrap(), &[3.0, 3.0, 3.0]);
        });
    }

    #[test]
    fn reverse_sweep_skips_unreached_nodes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::scalar(1.0));
        let b = tape.leaf(Tensor::scalar(2.0));
        let c = tape.activation(a, Activation::Logistic).unwrap();
        let g = tape.backward(&[(c, vec![1.0])]).unwrap();
        assert!(g.get(b).is_none());
        assert!(g.get(a).is_some());
    }

    #[test]
    fn narrow_and_concat_are_inverse() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[3, 2, 2], |i| i as f64));
        let parts: Vec<Var> = (0..3).map(|i| tape.narrow(x, 0, i, 1).unwrap()).collect();
        let y = tape.concat(&parts).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        let mid = tape.narrow(x, 2, 1, 1).unwrap();
        assert_eq!(tape.value(mid).data(), &[1.0, 3.0, 5.0, 7.0, 9.0, 11.0]);
        let g = tape.backward(&[(mid, vec![1.0; 6])]).unwrap();
        assert_eq!(
            g.get(x).unwrap(),
            &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]
        );
    }

    #[test]
    fn non_finite_forward_names_op() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(f64::MAX));
        let err = tape.add(x, x).unwrap_err();
        assert!(matches!(err, Error::NonFinite { ref op } if op == "add"));
    }

    #[test]
    fn bad_seed_length_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[4]));
        assert!(tape.backward(&[(x, vec![1.0; 3])]).is_err());
    }
}
