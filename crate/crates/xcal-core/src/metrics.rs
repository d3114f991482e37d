//! Task metrics for scoring quantized models: top-1 accuracy, DICE, mIoU.
//!
//! All metrics are pure order-independent reductions over the sample set.

use crate::error::{Error, Result};
use crate::tensor::{Dtype, Tensor};

/// Fraction of rows whose argmax equals the label; argmax ties break toward
/// the lowest index.
pub fn top1_accuracy(logits: &Tensor, labels: &[usize]) -> Result<f32> {
    let (n, k) = logits.dim2()?;
    if labels.len() != n {
        return Err(Error::Metric(format!(
            "{n} logit rows but {} labels",
            labels.len()
        )));
    }
    if n == 0 {
        return Err(Error::Metric("no samples".into()));
    }
    let data = logits.as_f32()?;
    let mut correct = 0usize;
    for (row, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::Metric(format!(
                "label {label} out of range for {k} classes"
            )));
        }
        let scores = &data[row * k..(row + 1) * k];
        let mut best = 0usize;
        for (i, &v) in scores.iter().enumerate() {
            if v > scores[best] {
                best = i;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    Ok(correct as f32 / n as f32)
}

fn binary_values(t: &Tensor, what: &str) -> Result<Vec<bool>> {
    t.iter_f64()
        .map(|v| {
            if v == 0.0 {
                Ok(false)
            } else if v == 1.0 {
                Ok(true)
            } else {
                Err(Error::Metric(format!("{what} contains non-binary value {v}")))
            }
        })
        .collect()
}

/// `2 |p AND g| / (|p| + |g|)`; two empty masks count as perfect agreement.
pub fn dice(p: &Tensor, g: &Tensor) -> Result<f32> {
    if p.shape() != g.shape() {
        return Err(Error::ShapeMismatch(format!(
            "dice: shapes {:?} and {:?} differ",
            p.shape(),
            g.shape()
        )));
    }
    let pv = binary_values(p, "prediction")?;
    let gv = binary_values(g, "ground truth")?;
    let mut inter = 0u64;
    let mut psum = 0u64;
    let mut gsum = 0u64;
    for (a, b) in pv.iter().zip(&gv) {
        psum += *a as u64;
        gsum += *b as u64;
        inter += (*a && *b) as u64;
    }
    if psum + gsum == 0 {
        return Ok(1.0);
    }
    Ok((2.0 * inter as f64 / (psum + gsum) as f64) as f32)
}

fn class_values(t: &Tensor, what: &str) -> Result<Vec<i64>> {
    match t.dtype() {
        Dtype::U8 => Ok(t.as_u8()?.iter().map(|&v| v as i64).collect()),
        Dtype::I32 => Ok(t.as_i32()?.iter().map(|&v| v as i64).collect()),
        Dtype::F32 => Err(Error::DtypeMismatch(format!(
            "{what} must be an integer class tensor"
        ))),
    }
}

/// Mean intersection-over-union across classes. Classes absent from both
/// tensors are excluded from the mean; pixels whose ground truth equals
/// `ignore_index` are excluded from every count.
pub fn miou(
    pred: &Tensor,
    gt: &Tensor,
    num_classes: usize,
    ignore_index: Option<i64>,
) -> Result<f32> {
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch(format!(
            "miou: shapes {:?} and {:?} differ",
            pred.shape(),
            gt.shape()
        )));
    }
    if num_classes == 0 {
        return Err(Error::Metric("num_classes must be >= 1".into()));
    }
    let pv = class_values(pred, "prediction")?;
    let gv = class_values(gt, "ground truth")?;

    // intersection / per-class pixel counts
    let mut inter = vec![0u64; num_classes];
    let mut pred_count = vec![0u64; num_classes];
    let mut gt_count = vec![0u64; num_classes];
    let mut considered = 0u64;
    for (&p, &g) in pv.iter().zip(&gv) {
        if Some(g) == ignore_index {
            continue;
        }
        considered += 1;
        let pu = usize::try_from(p)
            .ok()
            .filter(|&v| v < num_classes)
            .ok_or_else(|| Error::Metric(format!("prediction class {p} out of range")))?;
        let gu = usize::try_from(g)
            .ok()
            .filter(|&v| v < num_classes)
            .ok_or_else(|| Error::Metric(format!("ground-truth class {g} out of range")))?;
        pred_count[pu] += 1;
        gt_count[gu] += 1;
        if pu == gu {
            inter[pu] += 1;
        }
    }
    if considered == 0 {
        return Err(Error::Metric(
            "every pixel is ignore_index; mIoU undefined".into(),
        ));
    }
    let mut sum = 0.0f64;
    let mut classes = 0usize;
    for c in 0..num_classes {
        let union = pred_count[c] + gt_count[c] - inter[c];
        if union == 0 {
            continue; // absent from both
        }
        sum += inter[c] as f64 / union as f64;
        classes += 1;
    }
    Ok((sum / classes as f64) as f32)
}
