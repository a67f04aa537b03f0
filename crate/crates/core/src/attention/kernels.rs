//! Sampling and modulation kernels behind the spatial and task stages.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Bilinear taps at a fractional `(py, px)` with zero padding outside the map.
/// Returns up to four `(flat pixel index, weight, dweight/dpy, dweight/dpx)`.
fn taps(h: usize, w: usize, py: f64, px: f64) -> ([(usize, f64, f64, f64); 4], usize) {
    let y0 = py.floor();
    let x0 = px.floor();
    let fy = py - y0;
    let fx = px - x0;
    let (y0, x0) = (y0 as isize, x0 as isize);
    let corners = [
        (y0, x0, (1.0 - fy) * (1.0 - fx), -(1.0 - fx), -(1.0 - fy)),
        (y0, x0 + 1, (1.0 - fy) * fx, -fx, 1.0 - fy),
        (y0 + 1, x0, fy * (1.0 - fx), 1.0 - fx, -fy),
        (y0 + 1, x0 + 1, fy * fx, fx, fy),
    ];
    let mut out = [(0usize, 0.0, 0.0, 0.0); 4];
    let mut n = 0;
    for (y, x, wgt, dy, dx) in corners {
        if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
            out[n] = (y as usize * w + x as usize, wgt, dy, dx);
            n += 1;
        }
    }
    (out, n)
}

struct DeformDims {
    levels: usize,
    h: usize,
    w: usize,
    c: usize,
    k: usize,
}

fn deform_dims(
    features: &Tensor,
    offsets: &Tensor,
    masks: &Tensor,
    weights: &Tensor,
) -> Result<DeformDims> {
    let fs = features.shape();
    if fs.len() != 4 {
        return Err(Error::shape(
            "spatial_attention",
            format!("features must be [L,H,W,C], got {fs:?}"),
        ));
    }
    let (levels, h, w, c) = (fs[0], fs[1], fs[2], fs[3]);
    let os = offsets.shape();
    if os.len() != 4 || os[0] != h || os[1] != w || os[3] != 2 {
        return Err(Error::shape(
            "spatial_attention",
            format!("offsets must be [{h},{w},K,2], got {os:?}"),
        ));
    }
    let k = os[2];
    if masks.shape() != [h, w, k] {
        return Err(Error::shape(
            "spatial_attention",
            format!("masks must be [{h},{w},{k}], got {:?}", masks.shape()),
        ));
    }
    if weights.shape() != [levels, h, w, k] {
        return Err(Error::shape(
            "spatial_attention",
            format!(
                "weights must be [{levels},{h},{w},{k}], got {:?}",
                weights.shape()
            ),
        ));
    }
    Ok(DeformDims { levels, h, w, c, k })
}

/// `A[p,c] = mean_l Σ_k w[l,p,k] · F[l, p + Δp_k(p), c] · m[p,k]`, broadcast back over levels.
pub(crate) fn deform_aggregate(
    features: &Tensor,
    offsets: &Tensor,
    masks: &Tensor,
    weights: &Tensor,
) -> Result<Tensor> {
    let d = deform_dims(features, offsets, masks, weights)?;
    let (hw, c) = (d.h * d.w, d.c);
    let f = features.data();
    let mut agg = vec![0.0; hw * c];
    let inv_l = 1.0 / d.levels as f64;
    for y in 0..d.h {
        for x in 0..d.w {
            let p = y * d.w + x;
            let acc = &mut agg[p * c..(p + 1) * c];
            for kk in 0..d.k {
                let o = (p * d.k + kk) * 2;
                let py = y as f64 + offsets.data()[o];
                let px = x as f64 + offsets.data()[o + 1];
                let m = masks.data()[p * d.k + kk];
                let (tp, n) = taps(d.h, d.w, py, px);
                for l in 0..d.levels {
                    let coef = weights.data()[(l * hw + p) * d.k + kk] * m * inv_l;
                    if coef == 0.0 {
                        continue;
                    }
                    for &(q, wgt, _, _) in &tp[..n] {
                        let src = &f[(l * hw + q) * c..(l * hw + q + 1) * c];
                        let s = coef * wgt;
                        for (a, v) in acc.iter_mut().zip(src) {
                            *a += s * v;
                        }
                    }
                }
            }
        }
    }
    let mut out = Vec::with_capacity(d.levels * hw * c);
    for _ in 0..d.levels {
        out.extend_from_slice(&agg);
    }
    Ok(Tensor::from_parts(features.shape().to_vec(), out).rounded())
}

pub(crate) struct DeformGrads {
    pub features: Vec<f64>,
    pub offsets: Vec<f64>,
    pub masks: Vec<f64>,
    pub weights: Vec<f64>,
}

pub(crate) fn deform_aggregate_backward(
    features: &Tensor,
    offsets: &Tensor,
    masks: &Tensor,
    weights: &Tensor,
    dout: &[f64],
) -> DeformGrads {
    let d = deform_dims(features, offsets, masks, weights).expect("validated on forward");
    let (hw, c) = (d.h * d.w, d.c);
    let f = features.data();
    let inv_l = 1.0 / d.levels as f64;
    // Output rows are identical copies of A, so dA sums the level adjoints.
    let mut da = vec![0.0; hw * c];
    for l in 0..d.levels {
        for (a, g) in da.iter_mut().zip(&dout[l * hw * c..(l + 1) * hw * c]) {
            *a += g;
        }
    }
    let mut g = DeformGrads {
        features: vec![0.0; f.len()],
        offsets: vec![0.0; offsets.len()],
        masks: vec![0.0; masks.len()],
        weights: vec![0.0; weights.len()],
    };
    for y in 0..d.h {
        for x in 0..d.w {
            let p = y * d.w + x;
            let dap = &da[p * c..(p + 1) * c];
            for kk in 0..d.k {
                let o = (p * d.k + kk) * 2;
                let py = y as f64 + offsets.data()[o];
                let px = x as f64 + offsets.data()[o + 1];
                let m = masks.data()[p * d.k + kk];
                let (tp, n) = taps(d.h, d.w, py, px);
                let mut dmask = 0.0;
                let (mut doy, mut dox) = (0.0, 0.0);
                for l in 0..d.levels {
                    let wi = (l * hw + p) * d.k + kk;
                    let wl = weights.data()[wi];
                    // <dA, sample_l> and its positional derivatives
                    let (mut s, mut sy, mut sx) = (0.0, 0.0, 0.0);
                    for &(q, wgt, dwy, dwx) in &tp[..n] {
                        let src = &f[(l * hw + q) * c..(l * hw + q + 1) * c];
                        let dot: f64 = dap.iter().zip(src).map(|(a, v)| a * v).sum();
                        s += wgt * dot;
                        sy += dwy * dot;
                        sx += dwx * dot;
                        let coef = wl * m * inv_l * wgt;
                        if coef != 0.0 {
                            let dst = &mut g.features[(l * hw + q) * c..(l * hw + q + 1) * c];
                            for (df, a) in dst.iter_mut().zip(dap) {
                                *df += coef * a;
                            }
                        }
                    }
                    g.weights[wi] = m * inv_l * s;
                    dmask += wl * inv_l * s;
                    doy += wl * m * inv_l * sy;
                    dox += wl * m * inv_l * sx;
                }
                g.masks[p * d.k + kk] = dmask;
                g.offsets[o] = doy;
                g.offsets[o + 1] = dox;
            }
        }
    }
    g
}

fn modulate_dims(input: &Tensor, coeffs: &Tensor) -> Result<usize> {
    let c = *input.shape().last().unwrap();
    if coeffs.shape() != [c, 4] {
        return Err(Error::shape(
            "task_attention",
            format!(
                "coefficients must be [{c},4] for last axis C={c}, got {:?}",
                coeffs.shape()
            ),
        ));
    }
    Ok(c)
}

/// `max(x·α1 + β1, x·α2 + β2)` per channel, coefficients laid out `[α1, α2, β1, β2]`.
pub(crate) fn task_modulate(input: &Tensor, coeffs: &Tensor) -> Result<Tensor> {
    let c = modulate_dims(input, coeffs)?;
    let k = coeffs.data();
    let data = input
        .data()
        .chunks_exact(c)
        .flat_map(|row| {
            row.iter().enumerate().map(move |(ch, &x)| {
                let q = &k[ch * 4..ch * 4 + 4];
                (x * q[0] + q[2]).max(x * q[1] + q[3])
            })
        })
        .collect();
    Ok(Tensor::from_parts(input.shape().to_vec(), data).rounded())
}

pub(crate) fn task_modulate_backward(
    input: &Tensor,
    coeffs: &Tensor,
    dout: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let c = *input.shape().last().unwrap();
    let k = coeffs.data();
    let mut dx = vec![0.0; input.len()];
    let mut dk = vec![0.0; k.len()];
    for (i, (&x, &g)) in input.data().iter().zip(dout).enumerate() {
        let ch = i % c;
        let q = &k[ch * 4..ch * 4 + 4];
        // first branch wins ties
        let first = x * q[0] + q[2] >= x * q[1] + q[3];
        let (a, ai, bi) = if first { (q[0], 0, 2) } else { (q[1], 1, 3) };
        dx[i] = g * a;
        dk[ch * 4 + ai] += g * x;
        dk[ch * 4 + bi] += g;
    }
    (dx, dk)
}
