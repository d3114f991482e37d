//! Gram-matrix domain summaries and the discrepancy measure used to rank
//! candidate calibration datasets.
//!
//! A domain is summarized by the mean Gram matrix of per-sample feature
//! embeddings tapped from any loaded graph. Embeddings are standardized
//! per channel with statistics computed over the whole domain, which makes
//! the summary invariant to a global rescaling of the raw features. Two
//! domains are compared by the mean squared elementwise difference of
//! their mean Gram matrices.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Batch;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::Tensor;
use crate::xten;

pub const DEFAULT_EPSILON: f32 = 1e-8;

/// One sample's feature embedding: `channels x positions`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureEmbedding {
    pub layer: String,
    /// `N x M` matrix, row per channel.
    pub data: Tensor,
}

impl FeatureEmbedding {
    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn positions(&self) -> usize {
        self.data.shape()[1]
    }
}

/// Per-channel standardization statistics of one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelNormStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
    pub epsilon: f32,
}

/// Mean Gram matrix of one domain at one tap layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GramSummary {
    pub layer: String,
    /// `N x N`, symmetric.
    pub gram: Tensor,
    pub count: usize,
}

impl GramSummary {
    pub fn channels(&self) -> usize {
        self.gram.shape()[0]
    }
}

/// Tap `layer_id` for every sample of the batches and reshape each sample's
/// activation to `channels x positions`.
pub fn extract_embeddings(
    graph: &Graph,
    layer_id: &str,
    batches: &[Batch],
) -> Result<Vec<FeatureEmbedding>> {
    if graph.node_index(layer_id).is_none() {
        return Err(Error::UnknownNode(layer_id.to_string()));
    }
    let mut out = Vec::new();
    for batch in batches {
        let (_, tapped) = graph.run(&batch.data, &[layer_id])?;
        let act = &tapped[layer_id];
        let shape = act.shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::ShapeMismatch(format!(
                "tap `{layer_id}` has rank {} activation, need >= 2",
                shape.len()
            )));
        }
        let n = shape[0];
        let channels = shape[1];
        let positions: usize = shape[2..].iter().product::<usize>().max(1);
        let data = act.as_f32()?;
        let stride = channels * positions;
        for s in 0..n {
            out.push(FeatureEmbedding {
                layer: layer_id.to_string(),
                data: Tensor::from_f32(
                    &[channels, positions],
                    data[s * stride..(s + 1) * stride].to_vec(),
                ),
            });
        }
    }
    Ok(out)
}

/// Exact two-pass per-channel mean and (population) standard deviation over
/// every sample and position of a domain.
pub fn channel_norm_stats(embeddings: &[FeatureEmbedding]) -> Result<ChannelNormStats> {
    let first = embeddings.first().ok_or(Error::EmptyDataset)?;
    let channels = first.channels();
    for e in embeddings {
        if e.channels() != channels {
            return Err(Error::DimensionMismatch(format!(
                "embedding has {} channels, expected {channels}",
                e.channels()
            )));
        }
    }
    let mut sum = vec![0.0f64; channels];
    let mut count = vec![0.0f64; channels];
    for e in embeddings {
        let m = e.positions();
        let data = e.data.as_f32()?;
        for c in 0..channels {
            for v in &data[c * m..(c + 1) * m] {
                sum[c] += *v as f64;
            }
            count[c] += m as f64;
        }
    }
    let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, n)| s / n).collect();
    let mut sq = vec![0.0f64; channels];
    for e in embeddings {
        let m = e.positions();
        let data = e.data.as_f32()?;
        for c in 0..channels {
            for v in &data[c * m..(c + 1) * m] {
                let d = *v as f64 - mean[c];
                sq[c] += d * d;
            }
        }
    }
    Ok(ChannelNormStats {
        mean: mean.iter().map(|&m| m as f32).collect(),
        std: sq
            .iter()
            .zip(&count)
            .map(|(s, n)| (s / n).sqrt() as f32)
            .collect(),
        epsilon: DEFAULT_EPSILON,
    })
}

/// Standardize the embedding per channel and form `G = F~ * F~^T`.
pub fn gram(embedding: &FeatureEmbedding, stats: &ChannelNormStats) -> Result<Tensor> {
    let n = embedding.channels();
    let m = embedding.positions();
    if stats.mean.len() != n || stats.std.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "stats cover {} channels, embedding has {n}",
            stats.mean.len()
        )));
    }
    let data = embedding.data.as_f32()?;
    let mut normed = vec![0.0f64; n * m];
    for c in 0..n {
        let denom = stats.std[c] as f64 + stats.epsilon as f64;
        let mean = stats.mean[c] as f64;
        for i in 0..m {
            normed[c * m + i] = (data[c * m + i] as f64 - mean) / denom;
        }
    }
    let mut g = vec![0.0f32; n * n];
    for i in 0..n {
        for j in i..n {
            let mut acc = 0.0f64;
            let (ri, rj) = (&normed[i * m..(i + 1) * m], &normed[j * m..(j + 1) * m]);
            for k in 0..m {
                acc += ri[k] * rj[k];
            }
            g[i * n + j] = acc as f32;
            g[j * n + i] = acc as f32;
        }
    }
    Ok(Tensor::from_f32(&[n, n], g))
}

/// Mean of per-sample Gram matrices over the whole domain.
pub fn mean_gram(graph: &Graph, layer_id: &str, batches: &[Batch]) -> Result<GramSummary> {
    let embeddings = extract_embeddings(graph, layer_id, batches)?;
    if embeddings.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let stats = channel_norm_stats(&embeddings)?;
    let n = embeddings[0].channels();
    let mut acc = vec![0.0f64; n * n];
    for e in &embeddings {
        let g = gram(e, &stats)?;
        for (a, v) in acc.iter_mut().zip(g.as_f32()?) {
            *a += *v as f64;
        }
    }
    let count = embeddings.len();
    let mean: Vec<f32> = acc.iter().map(|&v| (v / count as f64) as f32).collect();
    Ok(GramSummary {
        layer: layer_id.to_string(),
        gram: Tensor::from_f32(&[n, n], mean),
        count,
    })
}

/// `D = mean_ij (G^A_ij - G^B_ij)^2`.
pub fn discrepancy(a: &GramSummary, b: &GramSummary) -> Result<f32> {
    if a.layer != b.layer {
        return Err(Error::DimensionMismatch(format!(
            "cannot compare layer `{}` with `{}`",
            a.layer, b.layer
        )));
    }
    if a.gram.shape() != b.gram.shape() {
        return Err(Error::DimensionMismatch(format!(
            "gram shapes {:?} and {:?} differ",
            a.gram.shape(),
            b.gram.shape()
        )));
    }
    let n2 = a.gram.len();
    let mut acc = 0.0f64;
    for (x, y) in a.gram.as_f32()?.iter().zip(b.gram.as_f32()?) {
        let d = *x as f64 - *y as f64;
        acc += d * d;
    }
    Ok((acc / n2 as f64) as f32)
}

/// Average of per-layer discrepancies (the multi-scale variant).
pub fn multiscale_discrepancy(pairs: &[(&GramSummary, &GramSummary)]) -> Result<f32> {
    if pairs.is_empty() {
        return Err(Error::DimensionMismatch(
            "multi-scale discrepancy needs at least one layer pair".into(),
        ));
    }
    let mut acc = 0.0f64;
    for (a, b) in pairs {
        acc += discrepancy(a, b)? as f64;
    }
    Ok((acc / pairs.len() as f64) as f32)
}

/// Candidate skipped while ranking, with the reason.
#[derive(Debug, Clone, PartialEq)]
pub struct SkippedCandidate {
    pub name: String,
    pub reason: String,
}

/// Rank every pool entry by discrepancy to the source domain, ascending,
/// ties broken lexicographically by name. Source summaries are matched to
/// candidate summaries by layer id; candidates with missing layers or
/// mismatched dimensions are skipped with a warning record.
pub fn rank_pool(
    source: &[GramSummary],
    pool: &BTreeMap<String, Vec<GramSummary>>,
) -> Result<(Vec<(String, f32)>, Vec<SkippedCandidate>)> {
    if source.is_empty() {
        return Err(Error::DimensionMismatch(
            "source domain has no gram summaries".into(),
        ));
    }
    let mut ranked = Vec::new();
    let mut skipped = Vec::new();
    for (name, candidate) in pool {
        let mut pairs = Vec::with_capacity(source.len());
        let mut problem: Option<String> = None;
        for src in source {
            match candidate.iter().find(|c| c.layer == src.layer) {
                None => {
                    problem = Some(format!("missing layer `{}`", src.layer));
                    break;
                }
                Some(c) if c.gram.shape() != src.gram.shape() => {
                    problem = Some(format!(
                        "layer `{}`: gram shape {:?} vs source {:?}",
                        src.layer,
                        c.gram.shape(),
                        src.gram.shape()
                    ));
                    break;
                }
                Some(c) => pairs.push((src, c)),
            }
        }
        match problem {
            Some(reason) => skipped.push(SkippedCandidate {
                name: name.clone(),
                reason,
            }),
            None => {
                let d = multiscale_discrepancy(&pairs)?;
                ranked.push((name.clone(), d));
            }
        }
    }
    ranked.sort_by(|(na, da), (nb, db)| da.total_cmp(db).then_with(|| na.cmp(nb)));
    Ok((ranked, skipped))
}

/// CSV emitted by pool ranking: `name,discrepancy`, ascending.
pub fn ranking_csv(ranked: &[(String, f32)]) -> String {
    let mut out = String::from("name,discrepancy\n");
    for (name, d) in ranked {
        out.push_str(&format!("{name},{d:.6e}\n"));
    }
    out
}

// ── Persistence ────────────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
struct GramSidecar {
    layer: String,
    count: usize,
    channels: usize,
    source_dataset: String,
}

/// Write `<dir>/<stem>.xten` (the matrix) and `<dir>/<stem>.json` (the
/// sidecar). The stem is the layer id.
pub fn save_gram_summary(dir: &Path, summary: &GramSummary, source_dataset: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let stem = dir.join(&summary.layer);
    xten::write(&stem.with_extension("xten"), &summary.gram)?;
    let sidecar = GramSidecar {
        layer: summary.layer.clone(),
        count: summary.count,
        channels: summary.channels(),
        source_dataset: source_dataset.to_string(),
    };
    let json_path = stem.with_extension("json");
    let mut text = serde_json::to_string_pretty(&sidecar)
        .map_err(|e| Error::format(&json_path, e.to_string()))?;
    text.push('\n');
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))
}

/// Load one summary from its `.xten` path (or the path without extension).
pub fn load_gram_summary(path: &Path) -> Result<(GramSummary, String)> {
    let xten_path = if path.extension().is_some_and(|e| e == "xten") {
        path.to_path_buf()
    } else {
        path.with_extension("xten")
    };
    let json_path = xten_path.with_extension("json");
    let gram = xten::read(&xten_path)?;
    if gram.rank() != 2 || gram.shape()[0] != gram.shape()[1] {
        return Err(Error::format(
            &xten_path,
            format!("gram matrix must be square, got {:?}", gram.shape()),
        ));
    }
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let sidecar: GramSidecar = serde_json::from_str(&text)
        .map_err(|e| Error::format(&json_path, format!("invalid sidecar: {e}")))?;
    if sidecar.channels != gram.shape()[0] {
        return Err(Error::format(
            &json_path,
            format!(
                "sidecar channels {} do not match matrix {:?}",
                sidecar.channels,
                gram.shape()
            ),
        ));
    }
    Ok((
        GramSummary {
            layer: sidecar.layer,
            gram,
            count: sidecar.count,
        },
        sidecar.source_dataset,
    ))
}

/// Load every summary in a bundle directory, sorted by layer id.
pub fn load_gram_bundle(dir: &Path) -> Result<Vec<GramSummary>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut stems: Vec<String> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix(".xten") {
            stems.push(stem.to_string());
        }
    }
    if stems.is_empty() {
        return Err(Error::format(dir, "no .xten gram summaries found".to_string()));
    }
    stems.sort();
    stems
        .iter()
        .map(|stem| load_gram_summary(&dir.join(stem)).map(|(s, _)| s))
        .collect()
}
