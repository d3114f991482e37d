//! BatchNorm folding and the BatchNorm-adjustment calibration procedure.
//!
//! Calibration comes in two flavors. `naive_calibrate` folds the stored
//! running statistics and observes activations directly on the calibration
//! set. `bn_adjust_calibrate` first resets and re-accumulates the running
//! statistics on the calibration set; that adjusted clone is used purely to
//! estimate activation ranges, which transfer to the deployed graph because
//! re-normalization maps the out-of-domain activations back into the value
//! ranges the network exhibits on its source domain. Both calibrators
//! return the same deployment artifact: the original graph with its own
//! statistics folded in.

use std::collections::BTreeMap;
use std::collections::HashSet;

use crate::dataset::Batch;
use crate::error::{Error, Result};
use crate::fakequant::QparamsSet;
use crate::graph::{BnMode, Graph, Node, OpKind};
use crate::histogram::{HistogramObserver, DEFAULT_NBINS};
use crate::quant::{weight_qparams, QuantParams};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationConfig {
    pub bits: u8,
    pub nbins: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            bits: 8,
            nbins: DEFAULT_NBINS,
        }
    }
}

/// Running statistics of one BatchNorm node.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub count: u64,
}

/// Read the stored running statistics of BatchNorm node `node_id`.
pub fn bn_stats(graph: &Graph, node_id: &str) -> Result<BnStats> {
    let node = graph
        .node(node_id)
        .ok_or_else(|| Error::UnknownNode(node_id.to_string()))?;
    if !matches!(node.op, OpKind::BatchNorm2D { .. }) {
        return Err(Error::InvalidGraph(format!(
            "node `{node_id}` is not a BatchNorm2D node"
        )));
    }
    Ok(BnStats {
        mean: graph.weight(&node.params[2])?.as_f32()?.to_vec(),
        var: graph.weight(&node.params[3])?.as_f32()?.to_vec(),
        count: 0,
    })
}

fn bn_node_ids(graph: &Graph) -> Vec<String> {
    graph
        .nodes()
        .iter()
        .filter(|n| matches!(n.op, OpKind::BatchNorm2D { .. }))
        .map(|n| n.id.clone())
        .collect()
}

/// Reset every BatchNorm running statistic to mean 0, variance 1.
/// Idempotent; graphs without BatchNorm nodes are unchanged.
pub fn reset_bn(graph: &mut Graph) -> Result<()> {
    for id in bn_node_ids(graph) {
        let node = graph.node(&id).expect("listed above").clone();
        let channels = graph.weight(&node.params[2])?.len();
        graph.set_weight(&node.params[2], Tensor::zeros(&[channels]))?;
        graph.set_weight(&node.params[3], Tensor::filled(&[channels], 1.0))?;
    }
    Ok(())
}

// ── Exact streaming statistics ─────────────────────────────────────────────

/// One channel's (count, mean, M2) triple.
#[derive(Debug, Clone, Copy, Default)]
struct Welford {
    count: f64,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, value: f64) {
        self.count += 1.0;
        let delta = value - self.mean;
        self.mean += delta / self.count;
        self.m2 += delta * (value - self.mean);
    }

    fn combine(a: Welford, b: Welford) -> Welford {
        if a.count == 0.0 {
            return b;
        }
        if b.count == 0.0 {
            return a;
        }
        let count = a.count + b.count;
        let delta = b.mean - a.mean;
        Welford {
            count,
            mean: a.mean + delta * (b.count / count),
            m2: a.m2 + b.m2 + delta * delta * (a.count * b.count / count),
        }
    }
}

/// Per-channel triples for one tensor, accumulated in fixed row-major order.
fn channel_welford(x: &Tensor) -> Result<Vec<Welford>> {
    let shape = x.shape();
    let (n, c) = (shape[0], shape[1]);
    let spatial: usize = shape[2..].iter().product();
    let data = x.as_f32()?;
    let mut out = vec![Welford::default(); c];
    for ch in 0..c {
        let acc = &mut out[ch];
        for ni in 0..n {
            let base = (ni * c + ch) * spatial;
            for i in 0..spatial {
                acc.push(data[base + i] as f64);
            }
        }
    }
    Ok(out)
}

/// Run the graph over the calibration set in batch-statistics mode and
/// replace every BatchNorm's running statistics with the exact mean and
/// population variance of that node's input activations.
///
/// Per-batch partial statistics are keyed by the batch's dataset index and
/// merged in ascending key order, so the final statistics are bit-identical
/// under any permutation of the batch list.
pub fn accumulate_bn(graph: &mut Graph, batches: &[Batch]) -> Result<()> {
    if batches.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let bn_ids = bn_node_ids(graph);
    if bn_ids.is_empty() {
        return Ok(());
    }
    // A BatchNorm's input is its predecessor's output; tap those.
    let preds: Vec<String> = bn_ids
        .iter()
        .map(|id| graph.node(id).expect("listed above").inputs[0].clone())
        .collect();
    let tap_set: HashSet<&str> = preds.iter().map(|s| s.as_str()).collect();
    let taps: Vec<&str> = tap_set.into_iter().collect();

    let mut partials: Vec<(usize, Vec<Vec<Welford>>)> = Vec::with_capacity(batches.len());
    for batch in batches {
        let (_, tapped) = graph.run_hooked(&batch.data, &taps, BnMode::BatchStats, |_, t| t)?;
        let mut per_bn = Vec::with_capacity(preds.len());
        for pred in &preds {
            per_bn.push(channel_welford(&tapped[pred])?);
        }
        partials.push((batch.index, per_bn));
    }
    partials.sort_by_key(|(index, _)| *index);

    for (k, bn_id) in bn_ids.iter().enumerate() {
        let channels = partials[0].1[k].len();
        let mut merged = vec![Welford::default(); channels];
        for (_, per_bn) in &partials {
            for (c, w) in per_bn[k].iter().enumerate() {
                merged[c] = Welford::combine(merged[c], *w);
            }
        }
        let mean: Vec<f32> = merged.iter().map(|w| w.mean as f32).collect();
        let var: Vec<f32> = merged
            .iter()
            .map(|w| ((w.m2 / w.count).max(0.0)) as f32)
            .collect();
        let node = graph.node(bn_id).expect("listed above").clone();
        graph.set_weight(&node.params[2], Tensor::from_f32(&[channels], mean))?;
        graph.set_weight(&node.params[3], Tensor::from_f32(&[channels], var))?;
    }
    Ok(())
}

// ── Folding ────────────────────────────────────────────────────────────────

/// Fold every BatchNorm into its preceding Conv2D/Linear:
/// `W' = W * g / sqrt(var + eps)`, `b' = (b - mean) * g / sqrt(var + eps) + beta`,
/// per output channel. The folded graph contains no BatchNorm nodes.
pub fn fold_bn(graph: &Graph) -> Result<Graph> {
    let nodes = graph.nodes();
    let mut fold_into: BTreeMap<String, String> = BTreeMap::new(); // bn id -> pred id
    for node in nodes {
        if !matches!(node.op, OpKind::BatchNorm2D { .. }) {
            continue;
        }
        let pred_id = &node.inputs[0];
        let consumers: Vec<&Node> = nodes
            .iter()
            .filter(|n| n.inputs.iter().any(|i| i == pred_id))
            .collect();
        if consumers.len() != 1 {
            return Err(Error::InvalidGraph(format!(
                "cannot fold `{}`: its input `{pred_id}` feeds {} consumers",
                node.id,
                consumers.len()
            )));
        }
        fold_into.insert(node.id.clone(), pred_id.clone());
    }
    if fold_into.is_empty() {
        return Ok(graph.clone());
    }

    let mut weights = graph.weights().clone();
    let mut new_nodes: Vec<Node> = Vec::with_capacity(nodes.len());
    let mut rename: BTreeMap<String, String> = BTreeMap::new(); // bn id -> pred id

    for node in nodes {
        if let OpKind::BatchNorm2D { eps } = node.op {
            let pred_id = &fold_into[&node.id];
            let gamma = graph.weight(&node.params[0])?.as_f32()?.to_vec();
            let beta = graph.weight(&node.params[1])?.as_f32()?.to_vec();
            let mean = graph.weight(&node.params[2])?.as_f32()?.to_vec();
            let var = graph.weight(&node.params[3])?.as_f32()?.to_vec();
            let channels = gamma.len();

            let pred = new_nodes
                .iter_mut()
                .find(|n| &n.id == pred_id)
                .expect("declaration order puts the predecessor first");
            let w_name = pred.params[0].clone();
            let w = weights[&w_name].clone();
            let out_channels = w.shape()[0];
            if out_channels != channels {
                return Err(Error::ShapeMismatch(format!(
                    "cannot fold `{}`: {channels} statistics channels vs {out_channels} output channels",
                    node.id
                )));
            }
            let per_channel = w.len() / out_channels;
            let factors: Vec<f64> = (0..channels)
                .map(|c| gamma[c] as f64 / ((var[c] as f64) + (eps as f64)).sqrt())
                .collect();

            let mut w_data = w.as_f32()?.to_vec();
            for c in 0..channels {
                for v in &mut w_data[c * per_channel..(c + 1) * per_channel] {
                    *v = (*v as f64 * factors[c]) as f32;
                }
            }
            weights.insert(w_name, Tensor::from_f32(w.shape(), w_data));

            let old_bias: Vec<f32> = match pred.params.get(1) {
                Some(name) => weights[name].as_f32()?.to_vec(),
                None => vec![0.0; channels],
            };
            let new_bias: Vec<f32> = (0..channels)
                .map(|c| {
                    ((old_bias[c] as f64 - mean[c] as f64) * factors[c] + beta[c] as f64) as f32
                })
                .collect();
            let bias_name = match pred.params.get(1) {
                Some(name) => name.clone(),
                None => {
                    let mut name = format!("{pred_id}.folded_bias");
                    let mut i = 0usize;
                    while weights.contains_key(&name) {
                        i += 1;
                        name = format!("{pred_id}.folded_bias{i}");
                    }
                    pred.params.push(name.clone());
                    name
                }
            };
            weights.insert(bias_name, Tensor::from_f32(&[channels], new_bias));
            rename.insert(node.id.clone(), pred_id.clone());
        } else {
            let mut node = node.clone();
            for input in &mut node.inputs {
                if let Some(target) = rename.get(input) {
                    *input = target.clone();
                }
            }
            new_nodes.push(node);
        }
    }

    // Drop weights no longer referenced (the folded statistics).
    let referenced: HashSet<&str> = new_nodes
        .iter()
        .flat_map(|n| n.params.iter().map(|s| s.as_str()))
        .collect();
    let weights = weights
        .into_iter()
        .filter(|(name, _)| referenced.contains(name.as_str()))
        .collect();

    Graph::from_parts(new_nodes, weights, graph.metadata().clone())
}

// ── Calibration pipelines ──────────────────────────────────────────────────

/// Min-max parameters for every weight-table tensor (data-free).
fn all_weight_qparams(graph: &Graph, bits: u8) -> Result<BTreeMap<String, QuantParams>> {
    let mut out = BTreeMap::new();
    for (name, tensor) in graph.weights() {
        out.insert(name.clone(), weight_qparams(tensor, bits)?);
    }
    Ok(out)
}

/// Two-pass histogram calibration of every activation tap of `graph`
/// (which must already be BN-folded when used for deployment ranges).
pub fn calibrate_activations(
    graph: &Graph,
    batches: &[Batch],
    cfg: &CalibrationConfig,
) -> Result<BTreeMap<String, QuantParams>> {
    if batches.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let tap_ids = graph.activation_tap_ids();
    let taps: Vec<&str> = tap_ids.iter().map(|s| s.as_str()).collect();
    let mut observers: BTreeMap<&str, HistogramObserver> = tap_ids
        .iter()
        .map(|id| (id.as_str(), HistogramObserver::new(cfg.nbins)))
        .collect();

    // Pass 1: freeze ranges.
    for batch in batches {
        let (_, tapped) = graph.run(&batch.data, &taps)?;
        for (id, obs) in observers.iter_mut() {
            obs.observe_range(&tapped[*id])?;
        }
    }
    // Pass 2: fill counts against the frozen ranges.
    for batch in batches {
        let (_, tapped) = graph.run(&batch.data, &taps)?;
        for (id, obs) in observers.iter_mut() {
            obs.observe_values(&tapped[*id])?;
        }
    }

    let mut out = BTreeMap::new();
    for (id, obs) in observers {
        let result = obs.search(cfg.bits)?;
        out.insert(id.to_string(), result.qparams);
    }
    Ok(out)
}

/// Plain post-training calibration: fold the stored statistics, then
/// observe activations of the folded graph on the calibration set.
pub fn naive_calibrate(
    graph: &Graph,
    batches: &[Batch],
    cfg: &CalibrationConfig,
) -> Result<(Graph, QparamsSet)> {
    if batches.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let folded = fold_bn(graph)?;
    let mut set = QparamsSet::new(cfg.bits);
    set.weights = all_weight_qparams(&folded, cfg.bits)?;
    set.activations = calibrate_activations(&folded, batches, cfg)?;
    Ok((folded, set))
}

/// BatchNorm-adjusted calibration:
/// 1. reset running statistics,
/// 2. re-accumulate them on the calibration set,
/// 3. fold the adjusted statistics,
/// 4. compute weight parameters,
/// 5. observe activation ranges by running the adjusted folded graph over
///    the calibration set again.
///
/// The adjusted graph exists only to estimate activation ranges; the
/// returned deployment graph folds the *original* statistics so the
/// quantized model still computes the source-domain function, and its
/// weight parameters are taken from those deployed weights. Node ids are
/// identical in both folds, so the estimated ranges transfer one-to-one.
pub fn bn_adjust_calibrate(
    graph: &Graph,
    batches: &[Batch],
    cfg: &CalibrationConfig,
) -> Result<(Graph, QparamsSet)> {
    if batches.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let deployment = fold_bn(graph)?;

    let mut adjusted = graph.clone();
    reset_bn(&mut adjusted)?;
    accumulate_bn(&mut adjusted, batches)?;
    let adjusted_folded = fold_bn(&adjusted)?;

    let mut set = QparamsSet::new(cfg.bits);
    set.weights = all_weight_qparams(&deployment, cfg.bits)?;
    set.activations = calibrate_activations(&adjusted_folded, batches, cfg)?;
    Ok((deployment, set))
}
