//! Shared helpers for the integration suites: independent naive-loop
//! reference kernels (kept free of the library's execution machinery) and
//! fixture plumbing.

#![allow(dead_code)]

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xcal_core::Tensor;

pub fn fixtures_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let numel = shape.iter().product();
    Tensor::from_f32(
        shape,
        (0..numel).map(|_| rng.gen_range(-3.0f32..3.0)).collect(),
    )
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f32 {
    assert_eq!(a.shape(), b.shape(), "oracle shape mismatch");
    a.as_f32()
        .unwrap()
        .iter()
        .zip(b.as_f32().unwrap())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f32::max)
}

/// Plain six-loop cross-correlation, f64 accumulation.
pub fn conv2d_naive(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: (usize, usize),
    padding: (usize, usize),
) -> Tensor {
    let (n, ci, h, w) = input.dim4().unwrap();
    let (co, ci_w, kh, kw) = weight.dim4().unwrap();
    assert_eq!(ci, ci_w);
    let oh = (h + 2 * padding.0 - kh) / stride.0 + 1;
    let ow = (w + 2 * padding.1 - kw) / stride.1 + 1;
    let x = input.as_f32().unwrap();
    let wd = weight.as_f32().unwrap();
    let b = bias.map(|b| b.as_f32().unwrap());
    let mut out = vec![0.0f32; n * co * oh * ow];
    for ni in 0..n {
        for oc in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0f64, |b| b[oc] as f64);
                    for ic in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride.0 + ky) as isize - padding.0 as isize;
                                let ix = (ox * stride.1 + kx) as isize - padding.1 as isize;
                                if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xv = x[((ni * ci + ic) * h + iy as usize) * w + ix as usize];
                                let wv = wd[((oc * ci + ic) * kh + ky) * kw + kx];
                                acc += xv as f64 * wv as f64;
                            }
                        }
                    }
                    out[((ni * co + oc) * oh + oy) * ow + ox] = acc as f32;
                }
            }
        }
    }
    Tensor::from_f32(&[n, co, oh, ow], out)
}

/// Triple-loop matrix product with f64 accumulation.
pub fn linear_naive(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Tensor {
    let (n, f) = input.dim2().unwrap();
    let (o, _) = weight.dim2().unwrap();
    let x = input.as_f32().unwrap();
    let wd = weight.as_f32().unwrap();
    let b = bias.map(|b| b.as_f32().unwrap());
    let mut out = vec![0.0f32; n * o];
    for row in 0..n {
        for oc in 0..o {
            let mut acc = b.map_or(0.0f64, |b| b[oc] as f64);
            for k in 0..f {
                acc += x[row * f + k] as f64 * wd[oc * f + k] as f64;
            }
            out[row * o + oc] = acc as f32;
        }
    }
    Tensor::from_f32(&[n, o], out)
}

/// Scalar-loop batchnorm over NCHW (or NC).
pub fn batchnorm_naive(
    input: &Tensor,
    mean: &[f32],
    var: &[f32],
    gamma: &[f32],
    beta: &[f32],
    eps: f32,
) -> Tensor {
    let shape = input.shape().to_vec();
    let (n, c) = (shape[0], shape[1]);
    let spatial: usize = shape[2..].iter().product();
    let x = input.as_f32().unwrap();
    let mut out = vec![0.0f32; x.len()];
    for ni in 0..n {
        for ch in 0..c {
            for i in 0..spatial {
                let idx = (ni * c + ch) * spatial + i;
                out[idx] = gamma[ch] * (x[idx] - mean[ch]) / (var[ch] + eps).sqrt() + beta[ch];
            }
        }
    }
    Tensor::from_f32(&shape, out)
}

pub fn maxpool_naive(input: &Tensor, kernel: (usize, usize), stride: (usize, usize)) -> Tensor {
    let (n, c, h, w) = input.dim4().unwrap();
    let oh = (h - kernel.0) / stride.0 + 1;
    let ow = (w - kernel.1) / stride.1 + 1;
    let x = input.as_f32().unwrap();
    let mut out = vec![0.0f32; n * c * oh * ow];
    for plane in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = f32::NEG_INFINITY;
                for ky in 0..kernel.0 {
                    for kx in 0..kernel.1 {
                        m = m.max(x[plane * h * w + (oy * stride.0 + ky) * w + ox * stride.1 + kx]);
                    }
                }
                out[plane * oh * ow + oy * ow + ox] = m;
            }
        }
    }
    Tensor::from_f32(&[n, c, oh, ow], out)
}

pub fn global_avgpool_naive(input: &Tensor) -> Tensor {
    let (n, c, h, w) = input.dim4().unwrap();
    let x = input.as_f32().unwrap();
    let mut out = vec![0.0f32; n * c];
    for plane in 0..n * c {
        let mut acc = 0.0f64;
        for i in 0..h * w {
            acc += x[plane * h * w + i] as f64;
        }
        out[plane] = (acc / (h * w) as f64) as f32;
    }
    Tensor::from_f32(&[n, c], out)
}

pub fn add_naive(a: &Tensor, b: &Tensor) -> Tensor {
    let out: Vec<f32> = a
        .as_f32()
        .unwrap()
        .iter()
        .zip(b.as_f32().unwrap())
        .map(|(x, y)| x + y)
        .collect();
    Tensor::from_f32(a.shape(), out)
}

/// Per-pixel half-pixel-center bilinear interpolation.
pub fn resize_naive(input: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (n, c, h, w) = input.dim4().unwrap();
    let x = input.as_f32().unwrap();
    let mut out = vec![0.0f32; n * c * out_h * out_w];
    for plane in 0..n * c {
        let src = &x[plane * h * w..][..h * w];
        for oy in 0..out_h {
            for ox in 0..out_w {
                let sy = ((oy as f64 + 0.5) * (h as f64 / out_h as f64) - 0.5)
                    .clamp(0.0, (h - 1) as f64);
                let sx = ((ox as f64 + 0.5) * (w as f64 / out_w as f64) - 0.5)
                    .clamp(0.0, (w - 1) as f64);
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                let (ty, tx) = ((sy - y0 as f64) as f32, (sx - x0 as f64) as f32);
                let top = src[y0 * w + x0] * (1.0 - tx) + src[y0 * w + x1] * tx;
                let bot = src[y1 * w + x0] * (1.0 - tx) + src[y1 * w + x1] * tx;
                out[plane * out_h * out_w + oy * out_w + ox] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    Tensor::from_f32(&[n, c, out_h, out_w], out)
}
