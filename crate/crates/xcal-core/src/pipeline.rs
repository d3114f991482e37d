//! End-to-end evaluation helpers shared by the CLI and the test suites:
//! run a model (plain or fake-quantized) over a dataset and score it.

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::fakequant::{FakeQuantRunner, QparamsSet};
use crate::graph::Graph;
use crate::metrics;
use crate::tensor::Tensor;

/// How to execute the model during evaluation.
#[derive(Debug, Clone, Copy)]
pub enum ExecMode<'a> {
    /// Plain f32 inference; equivalent to quantization being disabled.
    Fp32,
    /// Simulated integer inference at the given parameters.
    FakeQuant(&'a QparamsSet),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EvalTask {
    /// Classification: model output is `N x K` logits, dataset has labels.
    Top1,
    /// Binary segmentation: single-channel output thresholded at 0,
    /// dataset has binary masks.
    Dice,
    /// Multi-class segmentation: per-pixel argmax over channel logits,
    /// dataset has class-index masks.
    Miou {
        num_classes: usize,
        ignore_index: Option<i64>,
    },
}

/// Per-batch model outputs in dataset order.
pub fn forward_dataset(
    graph: &Graph,
    mode: ExecMode,
    dataset: &Dataset,
    batch_size: usize,
) -> Result<Vec<Tensor>> {
    let runner = match mode {
        ExecMode::Fp32 => None,
        ExecMode::FakeQuant(qp) => Some(FakeQuantRunner::new(graph, qp)?),
    };
    let mut outputs = Vec::new();
    for batch in dataset.batches(batch_size) {
        let out = match &runner {
            None => graph.run(&batch.data, &[])?.0,
            Some(r) => r.run(&batch.data)?,
        };
        outputs.push(out);
    }
    Ok(outputs)
}

fn concat_rows(outputs: &[Tensor]) -> Result<Tensor> {
    let k = outputs
        .first()
        .ok_or(Error::EmptyDataset)?
        .dim2()
        .map_err(|_| {
            Error::ShapeMismatch("classification output must be N x K logits".into())
        })?
        .1;
    let mut data = Vec::new();
    let mut rows = 0usize;
    for out in outputs {
        let (n, kk) = out.dim2()?;
        if kk != k {
            return Err(Error::ShapeMismatch("inconsistent logit widths".into()));
        }
        data.extend_from_slice(out.as_f32()?);
        rows += n;
    }
    Ok(Tensor::from_f32(&[rows, k], data))
}

/// Run the model over the dataset and compute the task metric.
pub fn evaluate(
    graph: &Graph,
    mode: ExecMode,
    dataset: &Dataset,
    batch_size: usize,
    task: EvalTask,
) -> Result<f32> {
    let outputs = forward_dataset(graph, mode, dataset, batch_size)?;
    match task {
        EvalTask::Top1 => {
            let labels = dataset
                .labels()
                .ok_or_else(|| Error::Metric("dataset has no labels.csv".into()))?;
            let logits = concat_rows(&outputs)?;
            metrics::top1_accuracy(&logits, labels)
        }
        EvalTask::Dice => {
            let masks = dataset
                .masks()
                .ok_or_else(|| Error::Metric("dataset has no .mask.xten files".into()))?;
            if outputs.first().is_some_and(|o| o.shape()[1] != 1) {
                return Err(Error::ShapeMismatch(
                    "dice needs a single-channel model output".into(),
                ));
            }
            let (pred, gt) = flatten_masks(&outputs, masks, |logits, _c| logits[0] > 0.0)?;
            let p = Tensor::from_u8(&[pred.len()], pred);
            let g: Vec<i32> = gt.iter().map(|&v| v as i32).collect();
            metrics::dice(&p, &Tensor::from_i32(&[g.len()], g))
        }
        EvalTask::Miou {
            num_classes,
            ignore_index,
        } => {
            let masks = dataset
                .masks()
                .ok_or_else(|| Error::Metric("dataset has no .mask.xten files".into()))?;
            let (pred, gt) = predict_classes(&outputs, masks)?;
            metrics::miou(
                &Tensor::from_i32(&[pred.len()], pred),
                &Tensor::from_i32(&[gt.len()], gt),
                num_classes,
                ignore_index,
            )
        }
    }
}

/// Flatten binary predictions and ground-truth masks across the dataset.
fn flatten_masks(
    outputs: &[Tensor],
    masks: &[Tensor],
    classify: impl Fn(&[f32], usize) -> bool,
) -> Result<(Vec<u8>, Vec<i64>)> {
    let mut pred = Vec::new();
    let mut gt = Vec::new();
    let mut sample = 0usize;
    for out in outputs {
        let shape = out.shape();
        let (n, c) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        let data = out.as_f32()?;
        for s in 0..n {
            let mask = &masks[sample];
            if mask.len() != spatial {
                return Err(Error::ShapeMismatch(format!(
                    "mask has {} pixels, model output has {spatial}",
                    mask.len()
                )));
            }
            for i in 0..spatial {
                let logits: Vec<f32> =
                    (0..c).map(|ch| data[(s * c + ch) * spatial + i]).collect();
                pred.push(classify(&logits, c) as u8);
            }
            gt.extend(mask.iter_f64().map(|v| v as i64));
            sample += 1;
        }
    }
    Ok((pred, gt))
}

/// Per-pixel argmax class predictions plus flattened ground truth.
fn predict_classes(outputs: &[Tensor], masks: &[Tensor]) -> Result<(Vec<i32>, Vec<i32>)> {
    let mut pred = Vec::new();
    let mut gt = Vec::new();
    let mut sample = 0usize;
    for out in outputs {
        let shape = out.shape();
        let (n, c) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        let data = out.as_f32()?;
        for s in 0..n {
            let mask = &masks[sample];
            if mask.len() != spatial {
                return Err(Error::ShapeMismatch(format!(
                    "mask has {} pixels, model output has {spatial}",
                    mask.len()
                )));
            }
            for i in 0..spatial {
                let mut best = 0usize;
                let mut best_v = data[(s * c) * spatial + i];
                for ch in 1..c {
                    let v = data[(s * c + ch) * spatial + i];
                    if v > best_v {
                        best_v = v;
                        best = ch;
                    }
                }
                pred.push(best as i32);
            }
            gt.extend(mask.iter_f64().map(|v| v as i32));
            sample += 1;
        }
    }
    Ok((pred, gt))
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len(), "paired samples required");
    let rank = |vs: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..vs.len()).collect();
        idx.sort_by(|&a, &b| vs[a].total_cmp(&vs[b]));
        let mut ranks = vec![0.0f64; vs.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && vs[idx[j + 1]] == vs[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                ranks[k] = avg;
            }
            i = j + 1;
        }
        ranks
    };
    let rx = rank(xs);
    let ry = rank(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}
