//! Floating-point compute kernels for the model IR.
//!
//! All kernels are pure functions over immutable inputs; batch items and
//! output channels are independent, so the conv kernel parallelizes over
//! output planes without changing any per-element accumulation order.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn out_extent(input: usize, pad: usize, kernel: usize, stride: usize, what: &str) -> Result<usize> {
    let padded = input + 2 * pad;
    if kernel == 0 || stride == 0 {
        return Err(Error::ShapeMismatch(format!(
            "{what}: kernel and stride must be >= 1"
        )));
    }
    if padded < kernel {
        return Err(Error::ShapeMismatch(format!(
            "{what}: kernel {kernel} larger than padded input {padded}"
        )));
    }
    let span = padded - kernel;
    if span % stride != 0 {
        return Err(Error::NonIntegralOutput(format!(
            "{what}: ({input} + 2*{pad} - {kernel}) not divisible by stride {stride}"
        )));
    }
    Ok(span / stride + 1)
}

/// 2D cross-correlation, NCHW input against OIKhKw weights, zero padding.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<Tensor> {
    let (n, c_in, h, w) = input.dim4()?;
    let (c_out, c_in_w, kh, kw) = weight.dim4()?;
    if c_in != c_in_w {
        return Err(Error::ShapeMismatch(format!(
            "conv2d: input has {c_in} channels but weight expects {c_in_w}"
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(Error::ShapeMismatch(format!(
                "conv2d: bias shape {:?} does not match {c_out} output channels",
                b.shape()
            )));
        }
    }
    let oh = out_extent(h, padding.0, kh, stride.0, "conv2d height")?;
    let ow = out_extent(w, padding.1, kw, stride.1, "conv2d width")?;

    let x = input.as_f32()?;
    let wgt = weight.as_f32()?;
    let b = bias.map(|b| b.as_f32()).transpose()?;

    let mut out = vec![0.0f32; n * c_out * oh * ow];
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(plane, dst)| {
        let ni = plane / c_out;
        let oc = plane % c_out;
        let bias_v = b.map_or(0.0, |b| b[oc]);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias_v;
                for ic in 0..c_in {
                    let x_plane = &x[(ni * c_in + ic) * h * w..][..h * w];
                    let w_plane = &wgt[(oc * c_in + ic) * kh * kw..][..kh * kw];
                    for ky in 0..kh {
                        let iy = (oy * stride.0 + ky) as isize - padding.0 as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let x_row = &x_plane[iy as usize * w..][..w];
                        let w_row = &w_plane[ky * kw..][..kw];
                        for kx in 0..kw {
                            let ix = (ox * stride.1 + kx) as isize - padding.1 as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += x_row[ix as usize] * w_row[kx];
                        }
                    }
                }
                dst[oy * ow + ox] = acc;
            }
        }
    });
    Ok(Tensor::from_f32(&[n, c_out, oh, ow], out))
}

/// Fully connected layer: `out = input * weight^T + bias`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (n, f) = input.dim2()?;
    let (o, f_w) = weight.dim2()?;
    if f != f_w {
        return Err(Error::ShapeMismatch(format!(
            "linear: input features {f} do not match weight features {f_w}"
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [o] {
            return Err(Error::ShapeMismatch(format!(
                "linear: bias shape {:?} does not match {o} outputs",
                b.shape()
            )));
        }
    }
    let x = input.as_f32()?;
    let wgt = weight.as_f32()?;
    let b = bias.map(|b| b.as_f32()).transpose()?;

    let mut out = vec![0.0f32; n * o];
    out.par_chunks_mut(o).enumerate().for_each(|(row, dst)| {
        let x_row = &x[row * f..][..f];
        for (oi, d) in dst.iter_mut().enumerate() {
            let w_row = &wgt[oi * f..][..f];
            let mut acc = b.map_or(0.0, |b| b[oi]);
            for k in 0..f {
                acc += x_row[k] * w_row[k];
            }
            *d = acc;
        }
    });
    Ok(Tensor::from_f32(&[n, o], out))
}

/// Inference-mode batch normalization with fixed per-channel statistics.
///
/// Accepts NCHW or NC input; channels are dim 1 in both cases.
pub fn batchnorm_apply(
    input: &Tensor,
    mean: &Tensor,
    var: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f32,
) -> Result<Tensor> {
    let shape = input.shape().to_vec();
    if shape.len() != 2 && shape.len() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "batchnorm: expected rank-2 or rank-4 input, got {:?}",
            shape
        )));
    }
    let channels = shape[1];
    for (name, t) in [("mean", mean), ("var", var), ("gamma", gamma), ("beta", beta)] {
        if t.shape() != [channels] {
            return Err(Error::ShapeMismatch(format!(
                "batchnorm: {name} shape {:?} does not match {channels} channels",
                t.shape()
            )));
        }
    }
    let spatial: usize = shape[2..].iter().product();
    let x = input.as_f32()?;
    let mu = mean.as_f32()?;
    let v = var.as_f32()?;
    let g = gamma.as_f32()?;
    let b = beta.as_f32()?;

    // Per-channel affine: y = x * scale + shift.
    let mut scale = vec![0.0f32; channels];
    let mut shift = vec![0.0f32; channels];
    for c in 0..channels {
        let s = g[c] as f64 / ((v[c] as f64) + (eps as f64)).sqrt();
        scale[c] = s as f32;
        shift[c] = (b[c] as f64 - (mu[c] as f64) * s) as f32;
    }

    let mut out = vec![0.0f32; x.len()];
    let batch = shape[0];
    for ni in 0..batch {
        for c in 0..channels {
            let base = (ni * channels + c) * spatial;
            let (sc, sh) = (scale[c], shift[c]);
            for i in 0..spatial {
                out[base + i] = x[base + i] * sc + sh;
            }
        }
    }
    Ok(Tensor::from_f32(&shape, out))
}

/// Elementwise `max(x, 0)`.
pub fn relu(input: &Tensor) -> Result<Tensor> {
    let x = input.as_f32()?;
    let out = x.iter().map(|&v| v.max(0.0)).collect();
    Ok(Tensor::from_f32(input.shape(), out))
}

/// Window maximum over NCHW input, no padding.
pub fn maxpool2d(input: &Tensor, kernel: (usize, usize), stride: (usize, usize)) -> Result<Tensor> {
    let (n, c, h, w) = input.dim4()?;
    let oh = out_extent(h, 0, kernel.0, stride.0, "maxpool2d height")?;
    let ow = out_extent(w, 0, kernel.1, stride.1, "maxpool2d width")?;
    let x = input.as_f32()?;

    let mut out = vec![0.0f32; n * c * oh * ow];
    for plane in 0..n * c {
        let src = &x[plane * h * w..][..h * w];
        let dst = &mut out[plane * oh * ow..][..oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = f32::NEG_INFINITY;
                for ky in 0..kernel.0 {
                    let iy = oy * stride.0 + ky;
                    for kx in 0..kernel.1 {
                        let ix = ox * stride.1 + kx;
                        m = m.max(src[iy * w + ix]);
                    }
                }
                dst[oy * ow + ox] = m;
            }
        }
    }
    Ok(Tensor::from_f32(&[n, c, oh, ow], out))
}

/// Spatial mean per channel: NCHW -> NC.
pub fn global_avgpool(input: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = input.dim4()?;
    let x = input.as_f32()?;
    let spatial = h * w;
    let mut out = vec![0.0f32; n * c];
    for plane in 0..n * c {
        let src = &x[plane * spatial..][..spatial];
        let mut acc = 0.0f64;
        for &v in src {
            acc += v as f64;
        }
        out[plane] = (acc / spatial as f64) as f32;
    }
    Ok(Tensor::from_f32(&[n, c], out))
}

/// Elementwise sum of two tensors of identical shape.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "add: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    let xa = a.as_f32()?;
    let xb = b.as_f32()?;
    let out = xa.iter().zip(xb).map(|(&p, &q)| p + q).collect();
    Ok(Tensor::from_f32(a.shape(), out))
}

/// Bilinear resize with half-pixel source coordinates:
/// `src = (dst + 0.5) * (in / out) - 0.5`, clamped to `[0, in - 1]`.
///
/// Resizing to the input size reproduces the input bit-exactly.
pub fn resize_bilinear(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (n, c, h, w) = input.dim4()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::ShapeMismatch(
            "resize_bilinear: output dims must be >= 1".into(),
        ));
    }
    let x = input.as_f32()?;

    // Source coordinate and lerp weight per destination index, computed once.
    let axis = |in_dim: usize, out_dim: usize| -> Vec<(usize, usize, f32)> {
        (0..out_dim)
            .map(|d| {
                let src = (d as f64 + 0.5) * (in_dim as f64 / out_dim as f64) - 0.5;
                let src = src.clamp(0.0, (in_dim - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(in_dim - 1);
                (lo, hi, (src - lo as f64) as f32)
            })
            .collect()
    };
    let ys = axis(h, out_h);
    let xs = axis(w, out_w);

    let mut out = vec![0.0f32; n * c * out_h * out_w];
    for plane in 0..n * c {
        let src = &x[plane * h * w..][..h * w];
        let dst = &mut out[plane * out_h * out_w..][..out_h * out_w];
        for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, tx)) in xs.iter().enumerate() {
                let top = src[y0 * w + x0] + tx * (src[y0 * w + x1] - src[y0 * w + x0]);
                let bot = src[y1 * w + x0] + tx * (src[y1 * w + x1] - src[y1 * w + x0]);
                dst[oy * out_w + ox] = top + ty * (bot - top);
            }
        }
    }
    Ok(Tensor::from_f32(&[n, c, out_h, out_w], out))
}

/// NCHW (or any rank >= 2) -> N x (rest).
pub fn flatten(input: &Tensor) -> Result<Tensor> {
    if input.rank() < 2 {
        return Err(Error::ShapeMismatch(format!(
            "flatten: expected rank >= 2, got {:?}",
            input.shape()
        )));
    }
    let n = input.shape()[0];
    let rest: usize = input.shape()[1..].iter().product();
    input.reshape(&[n, rest])
}
