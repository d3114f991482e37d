//! Per-tensor quantization parameters and the quantize/dequantize pair.
//!
//! Weights use a symmetric min-max scheme (zero point 0, signed range);
//! activations use an affine scheme over `[0, 2^k - 1]` with an integer
//! zero point so that exact zeros survive the round trip.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SUPPORTED_BITS: [u8; 3] = [4, 6, 8];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantKind {
    Weight,
    Activation,
}

impl QuantKind {
    pub fn name(self) -> &'static str {
        match self {
            QuantKind::Weight => "weight",
            QuantKind::Activation => "activation",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantParams {
    pub scale: f32,
    pub zero_point: i32,
    pub qmin: i32,
    pub qmax: i32,
    pub bits: u8,
    pub kind: QuantKind,
}

fn check_bits(bits: u8) -> Result<()> {
    if SUPPORTED_BITS.contains(&bits) {
        Ok(())
    } else {
        Err(Error::InvalidQparams(format!(
            "unsupported bit width {bits}, expected one of {SUPPORTED_BITS:?}"
        )))
    }
}

impl QuantParams {
    /// Symmetric signed parameters for weights.
    pub fn weight(scale: f32, bits: u8) -> Result<QuantParams> {
        check_bits(bits)?;
        let half = 1i32 << (bits - 1);
        let qp = QuantParams {
            scale,
            zero_point: 0,
            qmin: -half,
            qmax: half - 1,
            bits,
            kind: QuantKind::Weight,
        };
        qp.validate()?;
        Ok(qp)
    }

    /// Affine unsigned parameters for activations.
    pub fn activation(scale: f32, zero_point: i32, bits: u8) -> Result<QuantParams> {
        check_bits(bits)?;
        let qp = QuantParams {
            scale,
            zero_point,
            qmin: 0,
            qmax: (1i32 << bits) - 1,
            bits,
            kind: QuantKind::Activation,
        };
        qp.validate()?;
        Ok(qp)
    }

    /// Activation parameters from clipping thresholds `a_l <= 0 <= a_h`.
    /// The real-valued zero point is rounded to the nearest integer and
    /// clipped into range so 0 stays exactly representable.
    pub fn activation_from_range(a_l: f64, a_h: f64, bits: u8) -> Result<QuantParams> {
        check_bits(bits)?;
        let levels = ((1i64 << bits) - 1) as f64;
        let scale = ((a_h - a_l) / levels) as f32;
        if !(scale > 0.0) {
            return Err(Error::InvalidQparams(format!(
                "degenerate activation range [{a_l}, {a_h}]"
            )));
        }
        let z = (-a_l / scale as f64).round();
        let z = (z as i64).clamp(0, (1i64 << bits) - 1) as i32;
        QuantParams::activation(scale, z, bits)
    }

    pub fn validate(&self) -> Result<()> {
        check_bits(self.bits)?;
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::InvalidQparams(format!(
                "scale must be positive and finite, got {}",
                self.scale
            )));
        }
        let levels = (1i32 << self.bits) - 1;
        if self.qmin >= self.qmax || self.qmax - self.qmin != levels {
            return Err(Error::InvalidQparams(format!(
                "clip bounds [{}, {}] do not span 2^{} - 1 levels",
                self.qmin, self.qmax, self.bits
            )));
        }
        match self.kind {
            QuantKind::Weight => {
                let half = 1i32 << (self.bits - 1);
                if self.zero_point != 0 || self.qmin != -half || self.qmax != half - 1 {
                    return Err(Error::InvalidQparams(
                        "weight params must be symmetric with zero_point 0".into(),
                    ));
                }
            }
            QuantKind::Activation => {
                if self.qmin != 0 || self.zero_point < 0 || self.zero_point > self.qmax {
                    return Err(Error::InvalidQparams(
                        "activation params need qmin 0 and an in-range zero point".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Smallest real value that still quantizes without clipping.
    pub fn range_lo(&self) -> f32 {
        self.scale * (self.qmin - self.zero_point) as f32
    }

    /// Largest real value that still quantizes without clipping.
    pub fn range_hi(&self) -> f32 {
        self.scale * (self.qmax - self.zero_point) as f32
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub data: Tensor,
    pub qparams: QuantParams,
}

/// Symmetric min-max weight parameters. All-zero tensors get scale 1 so a
/// degenerate layer still quantizes (to exact zeros).
pub fn weight_qparams(w: &Tensor, bits: u8) -> Result<QuantParams> {
    let data = w.as_f32()?;
    if data.is_empty() {
        return Err(Error::ShapeMismatch("weight tensor is empty".into()));
    }
    if !w.all_finite() {
        return Err(Error::NonFinite("weight tensor".into()));
    }
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in data {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let half = (1i64 << (bits - 1)) as f32;
    let max_abs = lo.abs().max(hi.abs());
    let scale = if max_abs == 0.0 { 1.0 } else { max_abs / half };
    QuantParams::weight(scale, bits)
}

/// `x_q = clip(round_half_to_even(x / s) + z, qmin, qmax)`.
pub fn quantize(x: &Tensor, qp: &QuantParams) -> Result<QuantizedTensor> {
    qp.validate()?;
    let data = x.as_f32()?;
    let out: Vec<i32> = data
        .iter()
        .map(|&v| {
            let q = (v / qp.scale).round_ties_even() as i64 + qp.zero_point as i64;
            q.clamp(qp.qmin as i64, qp.qmax as i64) as i32
        })
        .collect();
    Ok(QuantizedTensor {
        data: Tensor::from_i32(x.shape(), out),
        qparams: *qp,
    })
}

/// `x_hat = s * (x_q - z)`; the zero point maps back to exactly 0.
pub fn dequantize(xq: &QuantizedTensor) -> Result<Tensor> {
    let qp = &xq.qparams;
    let data = xq.data.as_i32()?;
    let out: Vec<f32> = data
        .iter()
        .map(|&q| qp.scale * (q - qp.zero_point) as f32)
        .collect();
    Ok(Tensor::from_f32(xq.data.shape(), out))
}

/// Quantize-dequantize round trip applied in place of the real values:
/// the simulated integer view of a tensor.
pub fn fake_quantize(x: &Tensor, qp: &QuantParams) -> Result<Tensor> {
    dequantize(&quantize(x, qp)?)
}
