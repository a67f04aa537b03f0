//! Forward kernels and their adjoints.
//!
//! Each public function here is a pure map from input tensors to a new
//! tensor. The `*_backward` companions are used by [`crate::tape`].

use std::borrow::Cow;
use std::cell::RefCell;

use crate::error::{Error, Result};
use crate::tensor::{precision, Precision, Tensor};

thread_local! {
    /// Single-precision operand copies reused across products on this thread.
    static F32_SCRATCH: RefCell<(Vec<f32>, Vec<f32>, Vec<f32>)> = RefCell::new(Default::default());
}

/// `c (= or +=) a · b` for an `m×k` by `k×n` product. Strides are given as
/// `(row, col)` so transposed operands need no copy.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|x| *x = 0.0);
        }
        return;
    }
    match precision() {
        Precision::F64 => unsafe {
            // SAFETY: callers size `a`, `b` and `c` to cover every strided
            // element of the m×k, k×n and m×n operands.
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                a_strides.0 as isize,
                a_strides.1 as isize,
                b.as_ptr(),
                b_strides.0 as isize,
                b_strides.1 as isize,
                if accumulate { 1.0 } else { 0.0 },
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        },
        Precision::F32 => F32_SCRATCH.with(|scratch| {
            let (a32, b32, c32) = &mut *scratch.borrow_mut();
            a32.clear();
            a32.extend(a.iter().map(|&x| x as f32));
            b32.clear();
            b32.extend(b.iter().map(|&x| x as f32));
            c32.clear();
            c32.resize(m * n, 0.0);
            unsafe {
                // SAFETY: same layout as the f64 branch, on converted copies.
                matrixmultiply::sgemm(
                    m,
                    k,
                    n,
                    1.0,
                    a32.as_ptr(),
                    a_strides.0 as isize,
                    a_strides.1 as isize,
                    b32.as_ptr(),
                    b_strides.0 as isize,
                    b_strides.1 as isize,
                    0.0,
                    c32.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
            if accumulate {
                for (dst, v) in c.iter_mut().zip(c32.iter()) {
                    *dst = (*dst as f32 + *v) as f64;
                }
            } else {
                for (dst, v) in c.iter_mut().zip(c32.iter()) {
                    *dst = *v as f64;
                }
            }
        }),
    }
}

/// Geometry of an NHWC convolution with a square `k×k` kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn new(
        input_shape: &[usize],
        kernel_shape: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if input_shape.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("input must be [N,H,W,Cin], got {input_shape:?}"),
            ));
        }
        if kernel_shape.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel must be [k,k,Cin,Cout], got {kernel_shape:?}"),
            ));
        }
        let (kh, kw) = (kernel_shape[0], kernel_shape[1]);
        if kh != kw || kh % 2 == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel axes 0,1 must be equal and odd, got {kh}x{kw}"),
            ));
        }
        if kernel_shape[2] != input_shape[3] {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input axis 3 (Cin={}) != kernel axis 2 (Cin={})",
                    input_shape[3], kernel_shape[2]
                ),
            ));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        let (h, w) = (input_shape[1], input_shape[2]);
        if h + 2 * pad < kh || w + 2 * pad < kh {
            return Err(Error::shape(
                "conv2d",
                format!("input axes 1,2 ({h}x{w}) smaller than kernel {kh} with pad {pad}"),
            ));
        }
        Ok(Self {
            batch: input_shape[0],
            height: h,
            width: w,
            in_channels: input_shape[3],
            kernel: kh,
            out_channels: kernel_shape[3],
            stride,
            pad,
            out_height: (h + 2 * pad - kh) / stride + 1,
            out_width: (w + 2 * pad - kh) / stride + 1,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [
            self.batch,
            self.out_height,
            self.out_width,
            self.out_channels,
        ]
    }

    fn rows(&self) -> usize {
        self.batch * self.out_height * self.out_width
    }

    fn patch(&self) -> usize {
        self.kernel * self.kernel * self.in_channels
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    /// Multiply-accumulate FLOPs: `2·k²·Cin·Cout·H'·W'` per image.
    pub fn flops(&self) -> u64 {
        2 * (self.kernel * self.kernel * self.in_channels * self.out_channels) as u64
            * (self.out_height * self.out_width * self.batch) as u64
    }

    fn im2col<'a>(&self, input: &'a [f64]) -> Cow<'a, [f64]> {
        if self.is_pointwise() {
            return Cow::Borrowed(input);
        }
        let (k, cin) = (self.kernel, self.in_channels);
        let patch = self.patch();
        let mut cols = vec![0.0; self.rows() * patch];
        let mut row = 0;
        for n in 0..self.batch {
            for oy in 0..self.out_height {
                for ox in 0..self.out_width {
                    let dst = &mut cols[row * patch..(row + 1) * patch];
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.width as isize {
                                continue;
                            }
                            let src =
                                ((n * self.height + iy as usize) * self.width + ix as usize) * cin;
                            let off = (ky * k + kx) * cin;
                            dst[off..off + cin].copy_from_slice(&input[src..src + cin]);
                        }
                    }
                    row += 1;
                }
            }
        }
        Cow::Owned(cols)
    }

    fn col2im(&self, cols: &[f64], dinput: &mut [f64]) {
        let (k, cin) = (self.kernel, self.in_channels);
        let patch = self.patch();
        let mut row = 0;
        for n in 0..self.batch {
            for oy in 0..self.out_height {
                for ox in 0..self.out_width {
                    let src = &cols[row * patch..(row + 1) * patch];
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.width as isize {
                                continue;
                            }
                            let dst =
                                ((n * self.height + iy as usize) * self.width + ix as usize) * cin;
                            let off = (ky * k + kx) * cin;
                            for (d, v) in
                                dinput[dst..dst + cin].iter_mut().zip(&src[off..off + cin])
                            {
                                *d += v;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// NHWC convolution: `input [N,H,W,Cin]`, `kernel [k,k,Cin,Cout]`, optional
/// `bias [Cout]`. Output spatial size is `floor((H + 2·pad − k)/stride) + 1`.
pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let g = ConvGeometry::new(input.shape(), kernel.shape(), stride, pad)?;
    if let Some(b) = bias {
        if b.len() != g.out_channels {
            return Err(Error::shape(
                "conv2d",
                format!("bias has {} values for Cout={}", b.len(), g.out_channels),
            ));
        }
    }
    Ok(conv2d_forward(
        &g,
        input.data(),
        kernel.data(),
        bias.map(|b| b.data()),
    ))
}

pub(crate) fn conv2d_forward(
    g: &ConvGeometry,
    input: &[f64],
    kernel: &[f64],
    bias: Option<&[f64]>,
) -> Tensor {
    conv2d_forward_cols(g, input, kernel, bias).0
}

/// Forward pass that also returns the unfolded input (`None` for pointwise
/// convolutions, which read the input directly).
pub(crate) fn conv2d_forward_cols(
    g: &ConvGeometry,
    input: &[f64],
    kernel: &[f64],
    bias: Option<&[f64]>,
) -> (Tensor, Option<Vec<f64>>) {
    let cols = g.im2col(input);
    let (m, kk, n) = (g.rows(), g.patch(), g.out_channels);
    let mut out = vec![0.0; m * n];
    gemm(m, kk, n, &cols, (kk, 1), kernel, (n, 1), &mut out, false);
    if let Some(b) = bias {
        for row in out.chunks_exact_mut(n) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
    }
    let cols = match cols {
        Cow::Owned(c) => Some(c),
        Cow::Borrowed(_) => None,
    };
    (
        Tensor::from_parts(g.output_shape().to_vec(), out).rounded(),
        cols,
    )
}

/// Gradients of a convolution with respect to input (when `need_input`),
/// kernel and bias. `cols` is the unfolded input if already available.
pub(crate) fn conv2d_backward(
    g: &ConvGeometry,
    input: &[f64],
    cols: Option<&[f64]>,
    kernel: &[f64],
    dout: &[f64],
    need_input: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let (m, kk, n) = (g.rows(), g.patch(), g.out_channels);
    let cols = match cols {
        Some(c) => Cow::Borrowed(c),
        None => g.im2col(input),
    };
    let mut dkernel = vec![0.0; kk * n];
    // colsᵀ [kk×m] · dout [m×n]
    gemm(kk, m, n, &cols, (1, kk), dout, (n, 1), &mut dkernel, false);
    let mut dbias = vec![0.0; n];
    for row in dout.chunks_exact(n) {
        for (d, v) in dbias.iter_mut().zip(row) {
            *d += v;
        }
    }
    if !need_input {
        return (None, dkernel, dbias);
    }
    let dinput = if g.is_pointwise() {
        let mut dx = vec![0.0; m * kk];
        gemm(m, n, kk, dout, (n, 1), kernel, (1, n), &mut dx, false);
        dx
    } else {
        let mut dcols = vec![0.0; m * kk];
        gemm(m, n, kk, dout, (n, 1), kernel, (1, n), &mut dcols, false);
        let mut dx = vec![0.0; g.batch * g.height * g.width * g.in_channels];
        g.col2im(&dcols, &mut dx);
        dx
    };
    (Some(dinput), dkernel, dbias)
}

/// Matrix-vector product over the last axis: `input [.., Cin] · weights [Cin, Cout] + bias`.
pub fn affine(input: &Tensor, weights: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (rows, cin, cout) = affine_dims(input.shape(), weights.shape())?;
    if let Some(b) = bias {
        if b.len() != cout {
            return Err(Error::shape(
                "affine",
                format!("bias has {} values for Cout={cout}", b.len()),
            ));
        }
    }
    let mut out = vec![0.0; rows * cout];
    gemm(
        rows,
        cin,
        cout,
        input.data(),
        (cin, 1),
        weights.data(),
        (cout, 1),
        &mut out,
        false,
    );
    if let Some(b) = bias {
        for row in out.chunks_exact_mut(cout) {
            for (o, bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
    }
    let mut shape = input.shape().to_vec();
    *shape.last_mut().unwrap() = cout;
    Ok(Tensor::from_parts(shape, out).rounded())
}

pub(crate) fn affine_dims(input: &[usize], weights: &[usize]) -> Result<(usize, usize, usize)> {
    if weights.len() != 2 {
        return Err(Error::shape(
            "affine",
            format!("weights must be [Cin,Cout], got {weights:?}"),
        ));
    }
    let cin = *input
        .last()
        .ok_or_else(|| Error::shape("affine", "input has no axes"))?;
    if cin != weights[0] {
        return Err(Error::shape(
            "affine",
            format!(
                "input last axis ({}) = {cin} != weights axis 0 = {}",
                input.len() - 1,
                weights[0]
            ),
        ));
    }
    Ok((input.iter().product::<usize>() / cin, cin, weights[1]))
}

pub(crate) fn affine_backward(
    input: &[f64],
    weights: &[f64],
    dout: &[f64],
    rows: usize,
    cin: usize,
    cout: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; rows * cin];
    gemm(
        rows,
        cout,
        cin,
        dout,
        (cout, 1),
        weights,
        (1, cout),
        &mut dx,
        false,
    );
    let mut dw = vec![0.0; cin * cout];
    gemm(
        cin,
        rows,
        cout,
        input,
        (1, cin),
        dout,
        (cout, 1),
        &mut dw,
        false,
    );
    let mut db = vec![0.0; cout];
    for row in dout.chunks_exact(cout) {
        for (d, v) in db.iter_mut().zip(row) {
            *d += v;
        }
    }
    (dx, dw, db)
}

/// Index map used by [`reduce_mean`]: output flat index for every input element.
pub(crate) struct Reduction {
    pub out_shape: Vec<usize>,
    pub kept_shape: Vec<usize>,
    pub map: Vec<usize>,
    pub count: usize,
}

impl Reduction {
    pub fn new(shape: &[usize], axes: &[usize]) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::shape("reduce_mean", "no reduction axes given"));
        }
        let mut reduce = vec![false; shape.len()];
        for &a in axes {
            if a >= shape.len() {
                return Err(Error::shape(
                    "reduce_mean",
                    format!("axis {a} out of range for rank {}", shape.len()),
                ));
            }
            if reduce[a] {
                return Err(Error::shape("reduce_mean", format!("axis {a} repeated")));
            }
            if shape[a] == 0 {
                return Err(Error::shape("reduce_mean", format!("axis {a} is empty")));
            }
            reduce[a] = true;
        }
        let kept_shape: Vec<usize> = shape
            .iter()
            .zip(&reduce)
            .map(|(&d, &r)| if r { 1 } else { d })
            .collect();
        let mut out_shape: Vec<usize> = shape
            .iter()
            .zip(&reduce)
            .filter(|(_, &r)| !r)
            .map(|(&d, _)| d)
            .collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let count = shape
            .iter()
            .zip(&reduce)
            .filter(|(_, &r)| r)
            .map(|(&d, _)| d)
            .product();
        // Output strides in the kept layout; reduced axes contribute stride 0.
        let mut strides = vec![0usize; shape.len()];
        let mut s = 1;
        for ax in (0..shape.len()).rev() {
            if !reduce[ax] {
                strides[ax] = s;
                s *= shape[ax];
            }
        }
        let total: usize = shape.iter().product();
        let mut map = Vec::with_capacity(total);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..total {
            map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
            for ax in (0..shape.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Ok(Self {
            out_shape,
            kept_shape,
            map,
            count,
        })
    }

    pub fn forward(&self, data: &[f64]) -> Vec<f64> {
        let n_out: usize = self.kept_shape.iter().product();
        let mut acc = vec![0.0; n_out];
        for (x, &o) in data.iter().zip(&self.map) {
            acc[o] += x;
        }
        let inv = self.count as f64;
        acc.iter_mut().for_each(|v| *v /= inv);
        acc
    }

    pub fn backward(&self, dout: &[f64]) -> Vec<f64> {
        let inv = self.count as f64;
        self.map.iter().map(|&o| dout[o] / inv).collect()
    }
}

/// Mean over `axes`. Reduced axes are dropped unless `keep_dims`, in which
/// case they remain with size 1. Summation runs in row-major input order.
pub fn reduce_mean(input: &Tensor, axes: &[usize], keep_dims: bool) -> Result<Tensor> {
    let r = Reduction::new(input.shape(), axes)?;
    let data = r.forward(input.data());
    let shape = if keep_dims { r.kept_shape } else { r.out_shape };
    Ok(Tensor::from_parts(shape, data).rounded())
}

#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `clamp((x + 1)/2, 0, 1)`.
#[inline]
pub fn hard_sigmoid(x: f64) -> f64 {
    ((x + 1.0) * 0.5).clamp(0.0, 1.0)
}

/// `2·logistic(x) − 1`, an odd map onto (−1, 1).
#[inline]
pub fn shifted_sigmoid(x: f64) -> f64 {
    (0.5 * x).tanh()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Logistic,
    HardSigmoid,
    ShiftedSigmoid,
    LeakyRelu(f64),
}

impl Activation {
    pub fn name(&self) -> &'static str {
        match self {
            Activation::Logistic => "logistic",
            Activation::HardSigmoid => "hard_sigmoid",
            Activation::ShiftedSigmoid => "shifted_sigmoid",
            Activation::LeakyRelu(_) => "leaky_relu",
        }
    }

    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        match *self {
            Activation::Logistic => logistic(x),
            Activation::HardSigmoid => hard_sigmoid(x),
            Activation::ShiftedSigmoid => shifted_sigmoid(x),
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
        }
    }

    /// dy/dx given input `x` and output `y`. Kinks take the zero (or left) branch.
    #[inline]
    pub fn derivative(&self, x: f64, y: f64) -> f64 {
        match *self {
            Activation::Logistic => y * (1.0 - y),
            Activation::HardSigmoid => {
                if x > -1.0 && x < 1.0 {
                    0.5
                } else {
                    0.0
                }
            }
            Activation::ShiftedSigmoid => 0.5 * (1.0 - y * y),
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
        }
    }

    pub fn forward(&self, input: &Tensor) -> Tensor {
        input.map(|x| self.apply(x)).rounded()
    }
}

/// Bilinear resampling taps along one axis, half-pixel centers
/// (`src = (dst + 0.5)·in/out − 0.5`, clamped to the valid range).
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct AxisTaps {
    pub taps: Vec<(usize, usize, f64)>,
}

impl AxisTaps {
    pub fn new(src_len: usize, dst_len: usize) -> Self {
        let scale = src_len as f64 / dst_len as f64;
        let taps = (0..dst_len)
            .map(|d| {
                let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(src_len - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect();
        Self { taps }
    }
}

/// Resize plan for `[N,H,W,C]` data.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct ResizePlan {
    pub batch: usize,
    pub src_h: usize,
    pub src_w: usize,
    pub channels: usize,
    pub ys: AxisTaps,
    pub xs: AxisTaps,
}

impl ResizePlan {
    pub fn new(shape: &[usize], out_h: usize, out_w: usize) -> Result<Self> {
        if shape.len() != 4 {
            return Err(Error::shape(
                "resize_bilinear",
                format!("expected [N,H,W,C], got {shape:?}"),
            ));
        }
        if out_h == 0 || out_w == 0 {
            return Err(Error::shape(
                "resize_bilinear",
                "target size must be positive",
            ));
        }
        Ok(Self {
            batch: shape[0],
            src_h: shape[1],
            src_w: shape[2],
            channels: shape[3],
            ys: AxisTaps::new(shape[1], out_h),
            xs: AxisTaps::new(shape[2], out_w),
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![
            self.batch,
            self.ys.taps.len(),
            self.xs.taps.len(),
            self.channels,
        ]
    }

    pub fn forward(&self, src: &[f64]) -> Vec<f64> {
        let (oh, ow, c) = (self.ys.taps.len(), self.xs.taps.len(), self.channels);
        let mut out = vec![0.0; self.batch * oh * ow * c];
        for n in 0..self.batch {
            let base = n * self.src_h * self.src_w * c;
            for (oy, &(y0, y1, fy)) in self.ys.taps.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in self.xs.taps.iter().enumerate() {
                    let dst = ((n * oh + oy) * ow + ox) * c;
                    let p00 = base + (y0 * self.src_w + x0) * c;
                    let p01 = base + (y0 * self.src_w + x1) * c;
                    let p10 = base + (y1 * self.src_w + x0) * c;
                    let p11 = base + (y1 * self.src_w + x1) * c;
                    for ch in 0..c {
                        let top = src[p00 + ch] * (1.0 - fx) + src[p01 + ch] * fx;
                        let bot = src[p10 + ch] * (1.0 - fx) + src[p11 + ch] * fx;
                        out[dst + ch] = top * (1.0 - fy) + bot * fy;
                    }
                }
            }
        }
        out
    }

    pub fn backward(&self, dout: &[f64]) -> Vec<f64> {
        let (oh, ow, c) = (self.ys.taps.len(), self.xs.taps.len(), self.channels);
        let mut dsrc = vec![0.0; self.batch * self.src_h * self.src_w * c];
        for n in 0..self.batch {
            let base = n * self.src_h * self.src_w * c;
            for (oy, &(y0, y1, fy)) in self.ys.taps.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in self.xs.taps.iter().enumerate() {
                    let src = ((n * oh + oy) * ow + ox) * c;
                    let corners = [
                        (base + (y0 * self.src_w + x0) * c, (1.0 - fy) * (1.0 - fx)),
                        (base + (y0 * self.src_w + x1) * c, (1.0 - fy) * fx),
                        (base + (y1 * self.src_w + x0) * c, fy * (1.0 - fx)),
                        (base + (y1 * self.src_w + x1) * c, fy * fx),
                    ];
                    for (p, wgt) in corners {
                        for ch in 0..c {
                            dsrc[p + ch] += wgt * dout[src + ch];
                        }
                    }
                }
            }
        }
        dsrc
    }
}

/// Bilinear resize of a `[N,H,W,C]` tensor with half-pixel centers.
pub fn resize_bilinear(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let plan = ResizePlan::new(input.shape(), out_h, out_w)?;
    Ok(Tensor::from_parts(plan.out_shape(), plan.forward(input.data())).rounded())
}

/// Per-row standardization over the last axis: `(x − mean)/sqrt(var + eps)`.
pub fn standardize(input: &Tensor, eps: f64) -> Tensor {
    let n = *input.shape().last().unwrap();
    let mut out = vec![0.0; input.len()];
    for (row, dst) in input.data().chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for (d, x) in dst.iter_mut().zip(row) {
            *d = (x - mean) * inv;
        }
    }
    Tensor::from_parts(input.shape().to_vec(), out).rounded()
}

pub(crate) fn standardize_backward(input: &[f64], dout: &[f64], n: usize, eps: f64) -> Vec<f64> {
    let mut dx = vec![0.0; input.len()];
    for ((row, dy), dst) in input
        .chunks_exact(n)
        .zip(dout.chunks_exact(n))
        .zip(dx.chunks_exact_mut(n))
    {
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + eps).sqrt();
        let y: Vec<f64> = row.iter().map(|x| (x - mean) * inv).collect();
        let mean_dy = dy.iter().sum::<f64>() / n as f64;
        let mean_dy_y = dy.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>() / n as f64;
        for i in 0..n {
            dst[i] = inv * (dy[i] - mean_dy - y[i] * mean_dy_y);
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::with_precision;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Direct-summation convolution used as an oracle.
    fn conv_direct(
        x: &Tensor,
        k: &Tensor,
        b: Option<&Tensor>,
        stride: usize,
        pad: usize,
    ) -> Tensor {
        let [n, h, w, ci] = [x.dim(0), x.dim(1), x.dim(2), x.dim(3)];
        let (ks, co) = (k.dim(0), k.dim(3));
        let oh = (h + 2 * pad - ks) / stride + 1;
        let ow = (w + 2 * pad - ks) / stride + 1;
        let mut out = Tensor::zeros(&[n, oh, ow, co]);
        for b_ in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    for o in 0..co {
                        let mut s = b.map_or(0.0, |b| b.data()[o]);
                        for ky in 0..ks {
                            for kx in 0..ks {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                for c in 0..ci {
                                    s += x.data()
                                        [((b_ * h + iy as usize) * w + ix as usize) * ci + c]
                                        * k.data()[((ky * ks + kx) * ci + c) * co + o];
                                }
                            }
                        }
                        out.data_mut()[((b_ * oh + oy) * ow + ox) * co + o] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_identity_kernel_is_identity() {
        with_precision(Precision::F64, || {
            let x = Tensor::from_fn(&[1, 3, 4, 2], |i| i as f64 * 0.5 - 2.0);
            let k = t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]);
            let y = conv2d(&x, &k, Some(&Tensor::zeros(&[2])), 1, 0).unwrap();
            assert_eq!(y, x);
        });
    }

    #[test]
    fn conv_zero_input_yields_bias() {
        with_precision(Precision::F64, || {
            let x = Tensor::zeros(&[2, 4, 4, 3]);
            let k = Tensor::from_fn(&[3, 3, 3, 2], |i| i as f64);
            let b = t(&[2], &[0.25, -1.5]);
            let y = conv2d(&x, &k, Some(&b), 1, 1).unwrap();
            for px in y.data().chunks(2) {
                assert_eq!(px, &[0.25, -1.5]);
            }
        });
    }

    #[test]
    fn conv_ramp_against_ones_kernel() {
        with_precision(Precision::F64, || {
            let x = Tensor::from_fn(&[1, 5, 5, 1], |i| i as f64);
            let k = Tensor::full(&[3, 3, 1, 1], 1.0);
            let y = conv2d(&x, &k, None, 1, 1).unwrap();
            assert_eq!(y.shape(), &[1, 5, 5, 1]);
            // top-left corner sees (0,0),(0,1),(1,0),(1,1) = 0 + 1 + 5 + 6
            assert_eq!(y.data()[0], 12.0);
            // centre sees rows 1..=3, cols 1..=3
            let centre: f64 = [6, 7, 8, 11, 12, 13, 16, 17, 18]
                .iter()
                .map(|&v| v as f64)
                .sum();
            assert_eq!(y.data()[12], centre);
            assert!(y.max_abs_diff(&conv_direct(&x, &k, None, 1, 1)) == 0.0);
        });
    }

    #[test]
    fn conv_matches_direct_summation_with_stride() {
        with_precision(Precision::F64, || {
            let x = Tensor::from_fn(&[2, 7, 6, 3], |i| ((i * 37 % 17) as f64 - 8.0) / 7.0);
            let k = Tensor::from_fn(&[3, 3, 3, 4], |i| ((i * 13 % 11) as f64 - 5.0) / 9.0);
            let b = Tensor::from_fn(&[4], |i| i as f64 * 0.1);
            let y = conv2d(&x, &k, Some(&b), 2, 1).unwrap();
            assert_eq!(y.shape(), &[2, 4, 3, 4]);
            assert!(y.max_abs_diff(&conv_direct(&x, &k, Some(&b), 2, 1)) < 1e-12);
        });
    }

    #[test]
    fn conv_shape_errors_name_axes() {
        let x = Tensor::zeros(&[1, 4, 4, 3]);
        let k = Tensor::zeros(&[3, 3, 2, 1]);
        let err = conv2d(&x, &k, None, 1, 1).unwrap_err().to_string();
        assert!(err.contains("axis 3") && err.contains("axis 2"), "{err}");
        let even = Tensor::zeros(&[2, 2, 3, 1]);
        assert!(conv2d(&x, &even, None, 1, 0).is_err());
    }

    #[test]
    fn reduce_mean_fixtures() {
        with_precision(Precision::F64, || {
            let v = t(&[4], &[1.0, 2.0, 3.0, 4.0]);
            assert_eq!(reduce_mean(&v, &[0], false).unwrap().data(), &[2.5]);
            let m = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
            let r = reduce_mean(&m, &[1], false).unwrap();
            assert_eq!(r.shape(), &[2]);
            assert_eq!(r.data(), &[2.0, 5.0]);
            let kept = reduce_mean(&m, &[1], true).unwrap();
            assert_eq!(kept.shape(), &[2, 1]);
            let c = Tensor::full(&[3, 2, 5], 1.75);
            assert!(reduce_mean(&c, &[0, 2], false)
                .unwrap()
                .data()
                .iter()
                .all(|&x| x == 1.75));
        });
    }

    #[test]
    fn reduce_mean_rejects_bad_axes() {
        let m = Tensor::zeros(&[2, 3]);
        assert!(reduce_mean(&m, &[], false).is_err());
        assert!(reduce_mean(&m, &[2], false).is_err());
        assert!(reduce_mean(&m, &[1, 1], false).is_err());
    }

    #[test]
    fn activation_fixtures() {
        assert_eq!(hard_sigmoid(0.0), 0.5);
        assert_eq!(hard_sigmoid(1.0), 1.0);
        assert_eq!(hard_sigmoid(-1.0), 0.0);
        assert_eq!(hard_sigmoid(0.5), 0.75);
        assert_eq!(shifted_sigmoid(0.0), 0.0);
        assert!((shifted_sigmoid(3f64.ln()) - 0.5).abs() <= 1e-15);
        assert!(shifted_sigmoid(40.0) <= 1.0 && shifted_sigmoid(40.0) > 0.999_999);
        assert_eq!(shifted_sigmoid(-0.7), -shifted_sigmoid(0.7));
    }

    #[test]
    fn affine_fixtures() {
        with_precision(Precision::F64, || {
            let x = t(&[2], &[1.0, 2.0]);
            let w = t(&[2, 2], &[1.0, 0.0, 1.0, 1.0]);
            let b = t(&[2], &[0.0, 1.0]);
            assert_eq!(affine(&x, &w, Some(&b)).unwrap().data(), &[3.0, 3.0]);
            let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
            let batch = Tensor::from_fn(&[3, 2], |i| i as f64 - 1.5);
            assert_eq!(affine(&batch, &eye, None).unwrap(), batch);
            let z = affine(&batch, &Tensor::zeros(&[2, 2]), Some(&b)).unwrap();
            assert!(z.data().chunks(2).all(|r| r == [0.0, 1.0]));
            assert!(affine(&batch, &Tensor::zeros(&[3, 2]), None).is_err());
        });
    }

    #[test]
    fn resize_fixtures() {
        with_precision(Precision::F64, || {
            let row = t(&[1, 1, 2, 1], &[0.0, 1.0]);
            let up = resize_bilinear(&row, 1, 4).unwrap();
            assert_eq!(up.data(), &[0.0, 0.25, 0.75, 1.0]);
            let x = Tensor::from_fn(&[1, 3, 5, 2], |i| i as f64);
            assert_eq!(resize_bilinear(&x, 3, 5).unwrap(), x);
            let c = Tensor::full(&[1, 4, 4, 1], 0.3);
            assert!(resize_bilinear(&c, 7, 3)
                .unwrap()
                .data()
                .iter()
                .all(|&v| (v - 0.3).abs() < 1e-15));
        });
    }

    #[test]
    fn resize_backward_is_adjoint() {
        with_precision(Precision::F64, || {
            let plan = ResizePlan::new(&[1, 5, 3, 2], 4, 7).unwrap();
            let x: Vec<f64> = (0..30).map(|i| (i as f64 * 0.37).sin()).collect();
            let y: Vec<f64> = (0..56).map(|i| (i as f64 * 0.91).cos()).collect();
            let ax = plan.forward(&x);
            let aty = plan.backward(&y);
            let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-12);
        });
    }

    #[test]
    fn standardize_rows() {
        with_precision(Precision::F64, || {
            let x = t(&[2, 3], &[1.0, 2.0, 3.0, -4.0, 0.0, 4.0]);
            let y = standardize(&x, 0.0);
            for row in y.data().chunks(3) {
                let m: f64 = row.iter().sum::<f64>() / 3.0;
                let v: f64 = row.iter().map(|a| a * a).sum::<f64>() / 3.0;
                assert!(m.abs() < 1e-15 && (v - 1.0).abs() < 1e-12);
            }
        });
    }
}
