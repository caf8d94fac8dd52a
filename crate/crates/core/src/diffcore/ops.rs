//! Forward and backward kernels for every differentiable operation.
//!
//! Kernels are written so the innermost loop always runs over the contiguous
//! last axis (W for volumes, the output features for affine maps): 3-D
//! convolution is a sum of shifted row AXPYs, matrix products use the
//! i-k-j ordering. That keeps everything auto-vectorizable on one core, which
//! is what the training budget assumes.

use serde::{Deserialize, Serialize};

use crate::{DsrError, Real, Result};

use super::Tensor;

/// Pointwise nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu { alpha: f64 },
    Softplus,
}

impl Activation {
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
            Activation::LeakyRelu { alpha } => {
                if x > T::zero() {
                    x
                } else {
                    T::from_f64(alpha) * x
                }
            }
            // max(x, 0) + ln1p(exp(-|x|)) is ln(1 + exp(x)) without overflow
            // and without underflowing to zero in the far-negative tail.
            Activation::Softplus => {
                let m = if x > T::zero() { x } else { T::zero() };
                m + (-x.abs()).exp().ln_1p()
            }
        }
    }

    /// Derivative at `x` (subgradient 0 for relu and `alpha` for leaky relu at the kink).
    pub fn derivative<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::LeakyRelu { alpha } => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::from_f64(alpha)
                }
            }
            Activation::Softplus => T::one() / (T::one() + (-x).exp()),
        }
    }
}

// ---------------------------------------------------------------------------
// Affine maps on [n, d] matrices
// ---------------------------------------------------------------------------

/// `input [n, d] @ weights [d, k] + bias [k]` -> `[n, k]`.
pub fn affine<T: Real>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d, k) = affine_dims(input, weights, bias)?;
    let mut out = vec![T::zero(); n * k];
    let x = input.data();
    let w = weights.data();
    let b = bias.data();
    for i in 0..n {
        let row = &mut out[i * k..(i + 1) * k];
        row.copy_from_slice(b);
        let xrow = &x[i * d..(i + 1) * d];
        for (kk, &xv) in xrow.iter().enumerate() {
            let wrow = &w[kk * k..(kk + 1) * k];
            for (o, &wv) in row.iter_mut().zip(wrow) {
                *o += xv * wv;
            }
        }
    }
    Tensor::new(vec![n, k], out)
}

/// Gradients of [`affine`]: returns `(d_input, d_weights, d_bias)`; each is
/// computed only when the matching `need_*` flag is set (`None` otherwise).
pub fn affine_backward<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input: bool,
    need_weights: bool,
    need_bias: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>)> {
    let n = input.shape()[0];
    let d = input.shape()[1];
    let k = weights.shape()[1];
    if grad_out.shape() != [n, k] {
        return Err(DsrError::Dimension(format!(
            "affine backward: upstream gradient {:?}, expected [{n}, {k}]",
            grad_out.shape()
        )));
    }
    let x = input.data();
    let w = weights.data();
    let g = grad_out.data();

    let d_input = need_input.then(|| {
        let mut dx = vec![T::zero(); n * d];
        for i in 0..n {
            let grow = &g[i * k..(i + 1) * k];
            let dxrow = &mut dx[i * d..(i + 1) * d];
            for (kk, dv) in dxrow.iter_mut().enumerate() {
                let wrow = &w[kk * k..(kk + 1) * k];
                let mut acc = T::zero();
                for (&gv, &wv) in grow.iter().zip(wrow) {
                    acc += gv * wv;
                }
                *dv = acc;
            }
        }
        Tensor::new(vec![n, d], dx).expect("shape by construction")
    });

    let d_weights = need_weights.then(|| {
        let mut dw = vec![T::zero(); d * k];
        for i in 0..n {
            let xrow = &x[i * d..(i + 1) * d];
            let grow = &g[i * k..(i + 1) * k];
            for (kk, &xv) in xrow.iter().enumerate() {
                let dwrow = &mut dw[kk * k..(kk + 1) * k];
                for (o, &gv) in dwrow.iter_mut().zip(grow) {
                    *o += xv * gv;
                }
            }
        }
        Tensor::new(vec![d, k], dw).expect("shape by construction")
    });

    let d_bias = need_bias.then(|| {
        let mut db = vec![T::zero(); k];
        for i in 0..n {
            let grow = &g[i * k..(i + 1) * k];
            for (o, &gv) in db.iter_mut().zip(grow) {
                *o += gv;
            }
        }
        Tensor::new(vec![k], db).expect("shape by construction")
    });

    Ok((d_input, d_weights, d_bias))
}

fn affine_dims<T: Real>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if input.shape().len() != 2 || weights.shape().len() != 2 || bias.shape().len() != 1 {
        return Err(DsrError::Dimension(format!(
            "affine expects input [n, d], weights [d, k], bias [k]; got {:?}, {:?}, {:?}",
            input.shape(),
            weights.shape(),
            bias.shape()
        )));
    }
    let (n, d) = (input.shape()[0], input.shape()[1]);
    let (dw, k) = (weights.shape()[0], weights.shape()[1]);
    if d != dw || bias.shape()[0] != k {
        return Err(DsrError::Dimension(format!(
            "affine: input [{n}, {d}] incompatible with weights [{dw}, {k}] / bias {:?}",
            bias.shape()
        )));
    }
    Ok((n, d, k))
}

// ---------------------------------------------------------------------------
// 3-D convolution with same-size zero padding
// ---------------------------------------------------------------------------

/// Cross-correlation of `input [C_in, D, H, W]` with `kernel
/// [C_out, C_in, k, k, k]` (odd `k`), zero padding so the output is
/// `[C_out, D, H, W]`, plus a per-channel `bias [C_out]`.
pub fn conv3d<T: Real>(input: &Tensor<T>, kernel: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let dims = conv_dims(input, kernel, bias)?;
    let ConvDims { c_in, c_out, k, d, h, w } = dims;
    let r = (k / 2) as isize;
    let vol = d * h * w;
    // each output voxel reduces C_in * k^3 products; accumulating in 64 bits
    // and rounding once at the end keeps f32 activations at one-ulp accuracy
    // (and changes nothing for f64)
    let mut acc = vec![0.0f64; c_out * vol];
    let x = input.data();
    let ker = kernel.data();
    let b = bias.data();

    for co in 0..c_out {
        let out_c = &mut acc[co * vol..(co + 1) * vol];
        out_c.fill(b[co].to_f64());
        for ci in 0..c_in {
            let in_c = &x[ci * vol..(ci + 1) * vol];
            let ker_base = (co * c_in + ci) * k * k * k;
            for dz in 0..k {
                let oz = dz as isize - r;
                let (z0, z1) = axis_range(d, oz);
                for dy in 0..k {
                    let oy = dy as isize - r;
                    let (y0, y1) = axis_range(h, oy);
                    for dx in 0..k {
                        let ox = dx as isize - r;
                        let (x0, x1) = axis_range(w, ox);
                        if x0 >= x1 || y0 >= y1 || z0 >= z1 {
                            continue;
                        }
                        let wv = ker[ker_base + (dz * k + dy) * k + dx].to_f64();
                        for z in z0..z1 {
                            let zi = (z as isize + oz) as usize;
                            for y in y0..y1 {
                                let yi = (y as isize + oy) as usize;
                                let ob = (z * h + y) * w;
                                // x0 >= -ox by construction, so this stays in range
                                let ib = ((zi * h + yi) * w) as isize + ox;
                                let i0 = (ib + x0 as isize) as usize;
                                let orow = &mut out_c[ob + x0..ob + x1];
                                let irow = &in_c[i0..i0 + (x1 - x0)];
                                for (o, &iv) in orow.iter_mut().zip(irow) {
                                    *o += wv * iv.to_f64();
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let out: Vec<T> = acc.into_iter().map(T::from_f64).collect();
    Tensor::new(vec![c_out, d, h, w], out)
}

/// Gradients of [`conv3d`]: `(d_input, d_kernel, d_bias)`, each computed only
/// when requested.
pub fn conv3d_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_input: bool,
    need_kernel: bool,
    need_bias: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>)> {
    let dims = conv_dims(input, kernel, &Tensor::zeros(&[kernel.shape()[0]]))?;
    let ConvDims { c_in, c_out, k, d, h, w } = dims;
    if grad_out.shape() != [c_out, d, h, w] {
        return Err(DsrError::Dimension(format!(
            "conv3d backward: upstream gradient {:?}, expected [{c_out}, {d}, {h}, {w}]",
            grad_out.shape()
        )));
    }
    let r = (k / 2) as isize;
    let vol = d * h * w;
    let x = input.data();
    let ker = kernel.data();
    let g = grad_out.data();

    // both gradient buffers take long sign-mixed reductions; as in the
    // forward pass they accumulate in 64 bits and round once at the end
    let mut d_input = need_input.then(|| vec![0.0f64; c_in * vol]);
    let mut d_kernel = need_kernel.then(|| vec![T::zero(); c_out * c_in * k * k * k]);

    if need_input || need_kernel {
        for co in 0..c_out {
            let g_c = &g[co * vol..(co + 1) * vol];
            for ci in 0..c_in {
                let in_c = &x[ci * vol..(ci + 1) * vol];
                let ker_base = (co * c_in + ci) * k * k * k;
                for dz in 0..k {
                    let oz = dz as isize - r;
                    let (z0, z1) = axis_range(d, oz);
                    for dy in 0..k {
                        let oy = dy as isize - r;
                        let (y0, y1) = axis_range(h, oy);
                        for dx in 0..k {
                            let ox = dx as isize - r;
                            let (x0, x1) = axis_range(w, ox);
                            if x0 >= x1 || y0 >= y1 || z0 >= z1 {
                                continue;
                            }
                            let kidx = ker_base + (dz * k + dy) * k + dx;
                            let wv = ker[kidx].to_f64();
                            let mut wacc = 0.0f64;
                            for z in z0..z1 {
                                let zi = (z as isize + oz) as usize;
                                for y in y0..y1 {
                                    let yi = (y as isize + oy) as usize;
                                    let ob = (z * h + y) * w;
                                    let ib = ((zi * h + yi) * w) as isize + ox;
                                    let i0 = (ib + x0 as isize) as usize;
                                    let len = x1 - x0;
                                    let grow = &g_c[ob + x0..ob + x1];
                                    if let Some(dx_all) = d_input.as_deref_mut() {
                                        let gin_c = &mut dx_all[ci * vol..(ci + 1) * vol];
                                        let gin_row = &mut gin_c[i0..i0 + len];
                                        for (o, &gv) in gin_row.iter_mut().zip(grow) {
                                            *o += wv * gv.to_f64();
                                        }
                                    }
                                    if d_kernel.is_some() {
                                        let irow = &in_c[i0..i0 + len];
                                        for (&gv, &iv) in grow.iter().zip(irow) {
                                            wacc += gv.to_f64() * iv.to_f64();
                                        }
                                    }
                                }
                            }
                            if let Some(dk) = d_kernel.as_deref_mut() {
                                dk[kidx] += T::from_f64(wacc);
                            }
                        }
                    }
                }
            }
        }
    }

    let d_bias = need_bias.then(|| {
        let mut db = vec![T::zero(); c_out];
        for co in 0..c_out {
            let g_c = &g[co * vol..(co + 1) * vol];
            let mut acc = 0.0f64;
            for &gv in g_c {
                acc += gv.to_f64();
            }
            db[co] = T::from_f64(acc);
        }
        Tensor::new(vec![c_out], db).expect("shape by construction")
    });

    Ok((
        d_input.map(|v| {
            let narrowed: Vec<T> = v.into_iter().map(T::from_f64).collect();
            Tensor::new(vec![c_in, d, h, w], narrowed).expect("shape by construction")
        }),
        d_kernel.map(|v| Tensor::new(vec![c_out, c_in, k, k, k], v).expect("shape by construction")),
        d_bias,
    ))
}

struct ConvDims {
    c_in: usize,
    c_out: usize,
    k: usize,
    d: usize,
    h: usize,
    w: usize,
}

fn conv_dims<T: Real>(input: &Tensor<T>, kernel: &Tensor<T>, bias: &Tensor<T>) -> Result<ConvDims> {
    if input.shape().len() != 4 || kernel.shape().len() != 5 {
        return Err(DsrError::Dimension(format!(
            "conv3d expects input [C_in, D, H, W] and kernel [C_out, C_in, k, k, k]; got {:?} and {:?}",
            input.shape(),
            kernel.shape()
        )));
    }
    let (c_in, d, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]);
    let (c_out, kc_in, k) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2]);
    if kernel.shape()[3] != k || kernel.shape()[4] != k {
        return Err(DsrError::Dimension(format!(
            "conv3d kernel must be cubic, got {:?}",
            kernel.shape()
        )));
    }
    if k % 2 == 0 {
        return Err(DsrError::Dimension(format!("conv3d kernel size {k} must be odd")));
    }
    if kc_in != c_in {
        return Err(DsrError::Dimension(format!(
            "conv3d kernel expects {kc_in} input channels, input has {c_in}"
        )));
    }
    if bias.shape() != [c_out] {
        return Err(DsrError::Dimension(format!(
            "conv3d bias {:?}, expected [{c_out}]",
            bias.shape()
        )));
    }
    Ok(ConvDims { c_in, c_out, k, d, h, w })
}

/// Output-index range `[lo, hi)` along one axis of extent `n` for which both
/// the output index and the shifted input index `i + offset` are in bounds.
fn axis_range(n: usize, offset: isize) -> (usize, usize) {
    let lo = if offset < 0 { (-offset) as usize } else { 0 };
    let hi = if offset > 0 { n.saturating_sub(offset as usize) } else { n };
    (lo.min(n), hi)
}

// ---------------------------------------------------------------------------
// Pooling / upsampling
// ---------------------------------------------------------------------------

/// Factor-2 average pooling of `[C, D, H, W]` (all spatial dims even).
pub fn avg_pool3d<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let s = input.shape();
    if s.len() != 4 {
        return Err(DsrError::Dimension(format!("avg_pool3d expects [C, D, H, W], got {s:?}")));
    }
    let (c, d, h, w) = (s[0], s[1], s[2], s[3]);
    if d % 2 != 0 || h % 2 != 0 || w % 2 != 0 {
        return Err(DsrError::Dimension(format!(
            "avg_pool3d needs even spatial extents, got [{d}, {h}, {w}]"
        )));
    }
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let x = input.data();
    let inv8 = T::from_f64(0.125);
    let mut out = vec![T::zero(); c * od * oh * ow];
    for ci in 0..c {
        for z in 0..od {
            for y in 0..oh {
                let o_base = ((ci * od + z) * oh + y) * ow;
                for xo in 0..ow {
                    let mut acc = T::zero();
                    for bz in 0..2 {
                        for by in 0..2 {
                            let i_base = ((ci * d + 2 * z + bz) * h + 2 * y + by) * w + 2 * xo;
                            acc += x[i_base] + x[i_base + 1];
                        }
                    }
                    out[o_base + xo] = acc * inv8;
                }
            }
        }
    }
    Tensor::new(vec![c, od, oh, ow], out)
}

/// Backward of [`avg_pool3d`]: spreads each upstream gradient uniformly over
/// its 2x2x2 source block.
pub fn avg_pool3d_backward<T: Real>(grad_out: &Tensor<T>, input_shape: &[usize]) -> Result<Tensor<T>> {
    let (c, d, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    if grad_out.shape() != [c, od, oh, ow] {
        return Err(DsrError::Dimension(format!(
            "avg_pool3d backward: upstream gradient {:?}, expected [{c}, {od}, {oh}, {ow}]",
            grad_out.shape()
        )));
    }
    let g = grad_out.data();
    let inv8 = T::from_f64(0.125);
    let mut out = vec![T::zero(); c * d * h * w];
    for ci in 0..c {
        for z in 0..od {
            for y in 0..oh {
                let o_base = ((ci * od + z) * oh + y) * ow;
                for xo in 0..ow {
                    let gv = g[o_base + xo] * inv8;
                    for bz in 0..2 {
                        for by in 0..2 {
                            let i_base = ((ci * d + 2 * z + bz) * h + 2 * y + by) * w + 2 * xo;
                            out[i_base] += gv;
                            out[i_base + 1] += gv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(input_shape.to_vec(), out)
}

/// Nearest-neighbor (block replication) upsampling of `[C, D, H, W]` by an
/// integer `factor` along every spatial axis.
pub fn nearest_upsample3d<T: Real>(input: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let s = input.shape();
    if s.len() != 4 {
        return Err(DsrError::Dimension(format!(
            "nearest_upsample3d expects [C, D, H, W], got {s:?}"
        )));
    }
    if factor == 0 {
        return Err(DsrError::Dimension("nearest_upsample3d factor must be >= 1".into()));
    }
    let (c, d, h, w) = (s[0], s[1], s[2], s[3]);
    let (od, oh, ow) = (d * factor, h * factor, w * factor);
    let x = input.data();
    let mut out = vec![T::zero(); c * od * oh * ow];
    for ci in 0..c {
        for z in 0..od {
            for y in 0..oh {
                let i_base = ((ci * d + z / factor) * h + y / factor) * w;
                let o_base = ((ci * od + z) * oh + y) * ow;
                for xo in 0..ow {
                    out[o_base + xo] = x[i_base + xo / factor];
                }
            }
        }
    }
    Tensor::new(vec![c, od, oh, ow], out)
}

/// Backward of [`nearest_upsample3d`]: sums each `factor^3` output block into
/// its source voxel.
pub fn nearest_upsample3d_backward<T: Real>(
    grad_out: &Tensor<T>,
    factor: usize,
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    let (c, d, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let (od, oh, ow) = (d * factor, h * factor, w * factor);
    if grad_out.shape() != [c, od, oh, ow] {
        return Err(DsrError::Dimension(format!(
            "nearest_upsample3d backward: upstream gradient {:?}, expected [{c}, {od}, {oh}, {ow}]",
            grad_out.shape()
        )));
    }
    let g = grad_out.data();
    let mut out = vec![T::zero(); c * d * h * w];
    for ci in 0..c {
        for z in 0..od {
            for y in 0..oh {
                let i_base = ((ci * d + z / factor) * h + y / factor) * w;
                let o_base = ((ci * od + z) * oh + y) * ow;
                for xo in 0..ow {
                    out[i_base + xo / factor] += g[o_base + xo];
                }
            }
        }
    }
    Tensor::new(input_shape.to_vec(), out)
}

// ---------------------------------------------------------------------------
// Channel concatenation
// ---------------------------------------------------------------------------

/// Concatenate two `[C, D, H, W]` volumes along the channel axis.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 4 || sb.len() != 4 || sa[1..] != sb[1..] {
        return Err(DsrError::Dimension(format!(
            "concat_channels: incompatible shapes {sa:?} and {sb:?}"
        )));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(vec![sa[0] + sb[0], sa[1], sa[2], sa[3]], data)
}
