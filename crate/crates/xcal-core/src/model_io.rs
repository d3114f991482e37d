//! Two-file model container: a human-inspectable `model.json` manifest and a
//! `weights.bin` blob with 64-byte-aligned little-endian tensors.

use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Metadata, Node, OpKind};
use crate::tensor::{Dtype, Tensor};

pub const MANIFEST_VERSION: u32 = 1;
pub const BLOB_FILE: &str = "weights.bin";
const ALIGN: usize = 64;

#[derive(Debug, Serialize, Deserialize)]
struct ManifestDto {
    version: u32,
    input_shape: [usize; 4],
    normalization: NormalizationDto,
    nodes: Vec<NodeDto>,
    weights: Vec<WeightDto>,
}

#[derive(Debug, Serialize, Deserialize)]
struct NormalizationDto {
    mean: Vec<f32>,
    std: Vec<f32>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct AttrsDto {
    #[serde(skip_serializing_if = "Option::is_none")]
    stride: Option<[usize; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    padding: Option<[usize; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    kernel: Option<[usize; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    eps: Option<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct NodeDto {
    id: String,
    op: String,
    attrs: AttrsDto,
    inputs: Vec<String>,
    params: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightDto {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

fn dtype_name(d: Dtype) -> &'static str {
    match d {
        Dtype::F32 => "f32",
        Dtype::U8 => "u8",
        Dtype::I32 => "i32",
    }
}

fn dtype_from_name(name: &str) -> Option<Dtype> {
    match name {
        "f32" => Some(Dtype::F32),
        "u8" => Some(Dtype::U8),
        "i32" => Some(Dtype::I32),
        _ => None,
    }
}

fn node_to_dto(node: &Node) -> NodeDto {
    let mut attrs = AttrsDto::default();
    match &node.op {
        OpKind::Conv2D { stride, padding } => {
            attrs.stride = Some([stride.0, stride.1]);
            attrs.padding = Some([padding.0, padding.1]);
        }
        OpKind::MaxPool2D { kernel, stride } => {
            attrs.kernel = Some([kernel.0, kernel.1]);
            attrs.stride = Some([stride.0, stride.1]);
        }
        OpKind::BatchNorm2D { eps } => attrs.eps = Some(*eps),
        _ => {}
    }
    NodeDto {
        id: node.id.clone(),
        op: node.op.name().to_string(),
        attrs,
        inputs: node.inputs.clone(),
        params: node.params.clone(),
    }
}

fn node_from_dto(dto: NodeDto, path: &Path) -> Result<Node> {
    let pair = |v: Option<[usize; 2]>, what: &str| -> Result<(usize, usize)> {
        let v = v.ok_or_else(|| {
            Error::format(path, format!("node `{}`: missing attr `{what}`", dto.id))
        })?;
        Ok((v[0], v[1]))
    };
    let op = match dto.op.as_str() {
        "Input" => OpKind::Input,
        "Output" => OpKind::Output,
        "Conv2D" => OpKind::Conv2D {
            stride: pair(dto.attrs.stride, "stride")?,
            padding: pair(dto.attrs.padding, "padding")?,
        },
        "Linear" => OpKind::Linear,
        "BatchNorm2D" => OpKind::BatchNorm2D {
            eps: dto.attrs.eps.ok_or_else(|| {
                Error::format(path, format!("node `{}`: missing attr `eps`", dto.id))
            })?,
        },
        "ReLU" => OpKind::ReLU,
        "MaxPool2D" => OpKind::MaxPool2D {
            kernel: pair(dto.attrs.kernel, "kernel")?,
            stride: pair(dto.attrs.stride, "stride")?,
        },
        "GlobalAvgPool" => OpKind::GlobalAvgPool,
        "Add" => OpKind::Add,
        "Flatten" => OpKind::Flatten,
        other => {
            return Err(Error::format(
                path,
                format!("node `{}`: unknown op `{other}`", dto.id),
            ))
        }
    };
    Ok(Node {
        id: dto.id,
        op,
        inputs: dto.inputs,
        params: dto.params,
    })
}

fn tensor_le_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.byte_len());
    match t.dtype() {
        Dtype::F32 => {
            for &v in t.as_f32().expect("dtype checked") {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Dtype::U8 => out.extend_from_slice(t.as_u8().expect("dtype checked")),
        Dtype::I32 => {
            for &v in t.as_i32().expect("dtype checked") {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

fn tensor_from_le_bytes(dtype: Dtype, shape: &[usize], bytes: &[u8]) -> Tensor {
    match dtype {
        Dtype::F32 => Tensor::from_f32(
            shape,
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        Dtype::U8 => Tensor::from_u8(shape, bytes.to_vec()),
        Dtype::I32 => Tensor::from_i32(
            shape,
            bytes
                .chunks_exact(4)
                .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
    }
}

fn blob_path(manifest_path: &Path) -> PathBuf {
    manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(BLOB_FILE)
}

/// Write `model.json` at `manifest_path` and `weights.bin` next to it.
/// Output bytes are deterministic for a given graph: weights are serialized
/// in weight-table declaration order.
pub fn save_model(graph: &Graph, manifest_path: &Path) -> Result<()> {
    let mut blob: Vec<u8> = Vec::new();
    let mut weight_dtos = Vec::with_capacity(graph.weights().len());
    for (name, tensor) in graph.weights() {
        let aligned = blob.len().div_ceil(ALIGN) * ALIGN;
        blob.resize(aligned, 0);
        let bytes = tensor_le_bytes(tensor);
        weight_dtos.push(WeightDto {
            name: name.clone(),
            dtype: dtype_name(tensor.dtype()).to_string(),
            shape: tensor.shape().to_vec(),
            offset: aligned as u64,
            nbytes: bytes.len() as u64,
        });
        blob.extend_from_slice(&bytes);
    }
    let meta = graph.metadata();
    let manifest = ManifestDto {
        version: MANIFEST_VERSION,
        input_shape: meta.input_shape,
        normalization: NormalizationDto {
            mean: meta.norm_mean.clone(),
            std: meta.norm_std.clone(),
        },
        nodes: graph.nodes().iter().map(node_to_dto).collect(),
        weights: weight_dtos,
    };
    let mut text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::format(manifest_path, e.to_string()))?;
    text.push('\n');
    fs::write(manifest_path, text).map_err(|e| Error::io(manifest_path, e))?;
    let bpath = blob_path(manifest_path);
    fs::write(&bpath, blob).map_err(|e| Error::io(&bpath, e))?;
    Ok(())
}

/// Load and validate a model from its `model.json` manifest.
pub fn load_model(manifest_path: &Path) -> Result<Graph> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: ManifestDto = serde_json::from_str(&text)
        .map_err(|e| Error::format(manifest_path, format!("invalid manifest: {e}")))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::format(
            manifest_path,
            format!("unsupported manifest version {}", manifest.version),
        ));
    }
    let bpath = blob_path(manifest_path);
    let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;

    let mut weights = IndexMap::with_capacity(manifest.weights.len());
    for w in &manifest.weights {
        let dtype = dtype_from_name(&w.dtype)
            .ok_or_else(|| Error::format(manifest_path, format!("unknown dtype `{}`", w.dtype)))?;
        let numel: usize = w.shape.iter().product();
        if w.shape.is_empty() || w.shape.iter().any(|&d| d == 0) {
            return Err(Error::format(
                manifest_path,
                format!("weight `{}`: invalid shape {:?}", w.name, w.shape),
            ));
        }
        if w.nbytes as usize != numel * dtype.size_bytes() {
            return Err(Error::format(
                manifest_path,
                format!(
                    "weight `{}`: nbytes {} does not match shape {:?}",
                    w.name, w.nbytes, w.shape
                ),
            ));
        }
        let start = w.offset as usize;
        let end = start
            .checked_add(w.nbytes as usize)
            .filter(|&e| e <= blob.len())
            .ok_or_else(|| {
                Error::format(
                    &bpath,
                    format!(
                        "weight `{}`: range {}..{} exceeds blob of {} bytes",
                        w.name,
                        w.offset,
                        w.offset + w.nbytes,
                        blob.len()
                    ),
                )
            })?;
        if weights
            .insert(
                w.name.clone(),
                tensor_from_le_bytes(dtype, &w.shape, &blob[start..end]),
            )
            .is_some()
        {
            return Err(Error::format(
                manifest_path,
                format!("duplicate weight `{}`", w.name),
            ));
        }
    }

    let nodes = manifest
        .nodes
        .into_iter()
        .map(|dto| node_from_dto(dto, manifest_path))
        .collect::<Result<Vec<_>>>()?;
    Graph::from_parts(
        nodes,
        weights,
        Metadata {
            input_shape: manifest.input_shape,
            norm_mean: manifest.normalization.mean,
            norm_std: manifest.normalization.std,
        },
    )
}

/// Byte size the blob will have for this graph (alignment included).
pub fn expected_blob_len(graph: &Graph) -> usize {
    let mut len = 0usize;
    for (_, tensor) in graph.weights() {
        len = len.div_ceil(ALIGN) * ALIGN + tensor.byte_len();
    }
    len
}
