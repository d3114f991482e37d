//! Simulated integer inference: every covered tensor passes through a
//! quantize/dequantize round trip while execution stays in f32.
//!
//! Coverage is per-tensor: each weight-table entry plus the activation tap
//! points (graph input and every Conv2D/Linear/Add output).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::graph::{Graph, OpKind};
use crate::quant::{fake_quantize, QuantKind, QuantParams};
use crate::tensor::Tensor;

pub const QPARAMS_VERSION: u32 = 1;

/// Complete quantization parameter map for one calibrated model.
#[derive(Debug, Clone, PartialEq)]
pub struct QparamsSet {
    pub bits: u8,
    pub weights: BTreeMap<String, QuantParams>,
    pub activations: BTreeMap<String, QuantParams>,
}

impl QparamsSet {
    pub fn new(bits: u8) -> QparamsSet {
        QparamsSet {
            bits,
            weights: BTreeMap::new(),
            activations: BTreeMap::new(),
        }
    }

    /// Every weight tensor and every activation tap of `graph` has an entry.
    pub fn validate_coverage(&self, graph: &Graph) -> Result<()> {
        for name in graph.weights().keys() {
            if !self.weights.contains_key(name) {
                return Err(Error::MissingQparams {
                    kind: "weight",
                    name: name.clone(),
                });
            }
        }
        for id in graph.activation_tap_ids() {
            if !self.activations.contains_key(&id) {
                return Err(Error::MissingQparams {
                    kind: "activation",
                    name: id,
                });
            }
        }
        Ok(())
    }

    /// Serialize as `qparams.json`. Scales are printed with 9 significant
    /// decimal digits, enough to reconstruct the f32 exactly; entries are
    /// sorted (weights first, then activations, each by name) so equal sets
    /// produce identical bytes.
    pub fn to_json(&self) -> String {
        let mut out = String::new();
        out.push_str("{\n");
        out.push_str(&format!("  \"version\": {QPARAMS_VERSION},\n"));
        out.push_str(&format!("  \"bits\": {},\n", self.bits));
        out.push_str("  \"entries\": [\n");
        let mut first = true;
        let mut push_entry = |name: &str, qp: &QuantParams| {
            if !first {
                out.push_str(",\n");
            }
            first = false;
            out.push_str(&format!(
                "    {{\"name\": {}, \"kind\": \"{}\", \"scale\": {:.8e}, \"zero_point\": {}, \"qmin\": {}, \"qmax\": {}}}",
                serde_json::to_string(name).expect("strings always serialize"),
                qp.kind.name(),
                qp.scale,
                qp.zero_point,
                qp.qmin,
                qp.qmax
            ));
        };
        for (name, qp) in &self.weights {
            push_entry(name, qp);
        }
        for (name, qp) in &self.activations {
            push_entry(name, qp);
        }
        out.push_str("\n  ]\n}\n");
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<QparamsSet> {
        #[derive(Deserialize)]
        struct FileDto {
            version: u32,
            bits: u8,
            entries: Vec<EntryDto>,
        }
        #[derive(Deserialize)]
        struct EntryDto {
            name: String,
            kind: String,
            scale: f64,
            zero_point: i32,
            qmin: i32,
            qmax: i32,
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let dto: FileDto = serde_json::from_str(&text)
            .map_err(|e| Error::format(path, format!("invalid qparams file: {e}")))?;
        if dto.version != QPARAMS_VERSION {
            return Err(Error::format(
                path,
                format!("unsupported qparams version {}", dto.version),
            ));
        }
        let mut set = QparamsSet::new(dto.bits);
        for e in dto.entries {
            let kind = match e.kind.as_str() {
                "weight" => QuantKind::Weight,
                "activation" => QuantKind::Activation,
                other => {
                    return Err(Error::format(path, format!("unknown entry kind `{other}`")))
                }
            };
            let qp = QuantParams {
                scale: e.scale as f32,
                zero_point: e.zero_point,
                qmin: e.qmin,
                qmax: e.qmax,
                bits: dto.bits,
                kind,
            };
            qp.validate()?;
            let slot = match kind {
                QuantKind::Weight => &mut set.weights,
                QuantKind::Activation => &mut set.activations,
            };
            if slot.insert(e.name.clone(), qp).is_some() {
                return Err(Error::format(path, format!("duplicate entry `{}`", e.name)));
            }
        }
        Ok(set)
    }
}

/// A BN-folded graph prepared for simulated integer inference: weights are
/// pre-round-tripped through their quantization grid, activations are
/// round-tripped on the fly at the covered tap points.
#[derive(Debug, Clone)]
pub struct FakeQuantRunner {
    graph: Graph,
    activations: BTreeMap<String, QuantParams>,
}

impl FakeQuantRunner {
    pub fn new(graph: &Graph, qparams: &QparamsSet) -> Result<FakeQuantRunner> {
        if graph
            .nodes()
            .iter()
            .any(|n| matches!(n.op, OpKind::BatchNorm2D { .. }))
        {
            return Err(Error::InvalidGraph(
                "fake quantization requires a BN-folded graph".into(),
            ));
        }
        qparams.validate_coverage(graph)?;
        for qp in qparams.weights.values().chain(qparams.activations.values()) {
            qp.validate()?;
        }
        let mut graph = graph.clone();
        let names: Vec<String> = graph.weights().keys().cloned().collect();
        for name in names {
            let qp = &qparams.weights[&name];
            let fq = fake_quantize(graph.weight(&name)?, qp)?;
            graph.set_weight(&name, fq)?;
        }
        Ok(FakeQuantRunner {
            graph,
            activations: qparams.activations.clone(),
        })
    }

    pub fn run(&self, input: &Tensor) -> Result<Tensor> {
        let (out, _) = self.run_with_taps(input, &[])?;
        Ok(out)
    }

    pub fn run_with_taps(
        &self,
        input: &Tensor,
        taps: &[&str],
    ) -> Result<(Tensor, BTreeMap<String, Tensor>)> {
        self.graph
            .run_hooked(input, taps, crate::graph::BnMode::Inference, |id, t| {
                match self.activations.get(id) {
                    Some(qp) => fake_quantize(&t, qp)
                        .expect("qparams validated at construction; kernel outputs are f32"),
                    None => t,
                }
            })
    }
}

/// One-shot simulated integer inference over a folded graph.
pub fn fake_quant_run(graph: &Graph, qparams: &QparamsSet, input: &Tensor) -> Result<Tensor> {
    FakeQuantRunner::new(graph, qparams)?.run(input)
}
