//! Directed-acyclic model IR: typed nodes plus a named weight table.
//!
//! Node declaration order is required to be topological (inputs reference
//! earlier-declared ids), which keeps the serialized form trivially
//! verifiable; execution still goes through an explicit topological sort so
//! that hand-assembled graphs get cycle detection.

use std::collections::{BTreeMap, HashMap, HashSet};

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    Input,
    Output,
    Conv2D {
        stride: (usize, usize),
        padding: (usize, usize),
    },
    Linear,
    BatchNorm2D {
        eps: f32,
    },
    ReLU,
    MaxPool2D {
        kernel: (usize, usize),
        stride: (usize, usize),
    },
    GlobalAvgPool,
    Add,
    Flatten,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Input => "Input",
            OpKind::Output => "Output",
            OpKind::Conv2D { .. } => "Conv2D",
            OpKind::Linear => "Linear",
            OpKind::BatchNorm2D { .. } => "BatchNorm2D",
            OpKind::ReLU => "ReLU",
            OpKind::MaxPool2D { .. } => "MaxPool2D",
            OpKind::GlobalAvgPool => "GlobalAvgPool",
            OpKind::Add => "Add",
            OpKind::Flatten => "Flatten",
        }
    }

    fn input_arity(&self) -> usize {
        match self {
            OpKind::Input => 0,
            OpKind::Add => 2,
            _ => 1,
        }
    }

    /// Expected param_refs count, `(min, max)`.
    fn param_arity(&self) -> (usize, usize) {
        match self {
            OpKind::Conv2D { .. } | OpKind::Linear => (1, 2),
            OpKind::BatchNorm2D { .. } => (4, 4),
            _ => (0, 0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: String,
    pub op: OpKind,
    pub inputs: Vec<String>,
    /// Names into the weight table. Conv2D/Linear: `[weight]` or
    /// `[weight, bias]`; BatchNorm2D: `[gamma, beta, mean, var]`.
    pub params: Vec<String>,
}

/// Model-level constants that travel with the graph but are applied by the
/// dataset loader, not by graph nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Metadata {
    pub input_shape: [usize; 4],
    pub norm_mean: Vec<f32>,
    pub norm_std: Vec<f32>,
}

impl Metadata {
    pub fn identity(input_shape: [usize; 4]) -> Metadata {
        let c = input_shape[1];
        Metadata {
            input_shape,
            norm_mean: vec![0.0; c],
            norm_std: vec![1.0; c],
        }
    }
}

/// How BatchNorm2D nodes behave during execution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with the stored running statistics.
    Inference,
    /// Normalize with statistics of the current batch (used while
    /// re-accumulating running statistics on a calibration set).
    BatchStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    nodes: Vec<Node>,
    weights: IndexMap<String, Tensor>,
    metadata: Metadata,
}

impl Graph {
    /// Assemble and validate a graph from raw parts.
    pub fn from_parts(
        nodes: Vec<Node>,
        weights: IndexMap<String, Tensor>,
        metadata: Metadata,
    ) -> Result<Graph> {
        let g = Graph {
            nodes,
            weights,
            metadata,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn metadata(&self) -> &Metadata {
        &self.metadata
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    pub fn input_id(&self) -> &str {
        self.nodes
            .iter()
            .find(|n| n.op == OpKind::Input)
            .map(|n| n.id.as_str())
            .expect("validated graph has an Input node")
    }

    pub fn output_id(&self) -> &str {
        self.nodes
            .iter()
            .find(|n| n.op == OpKind::Output)
            .map(|n| n.id.as_str())
            .expect("validated graph has an Output node")
    }

    pub fn weights(&self) -> &IndexMap<String, Tensor> {
        &self.weights
    }

    pub fn weight(&self, name: &str) -> Result<&Tensor> {
        self.weights
            .get(name)
            .ok_or_else(|| Error::InvalidGraph(format!("unresolved weight `{name}`")))
    }

    /// Replace an existing weight tensor (same name, any shape).
    pub fn set_weight(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        match self.weights.get_mut(name) {
            Some(slot) => {
                *slot = tensor;
                Ok(())
            }
            None => Err(Error::InvalidGraph(format!("unresolved weight `{name}`"))),
        }
    }

    /// Nodes whose output gets quantization parameters during activation
    /// calibration: the graph input plus every Conv2D/Linear/Add output.
    pub fn activation_tap_ids(&self) -> Vec<String> {
        self.nodes
            .iter()
            .filter(|n| {
                matches!(
                    n.op,
                    OpKind::Input | OpKind::Conv2D { .. } | OpKind::Linear | OpKind::Add
                )
            })
            .map(|n| n.id.clone())
            .collect()
    }

    fn validate(&self) -> Result<()> {
        let mut seen: HashMap<&str, usize> = HashMap::new();
        let mut inputs = 0usize;
        let mut outputs = 0usize;
        for (idx, node) in self.nodes.iter().enumerate() {
            if seen.insert(node.id.as_str(), idx).is_some() {
                return Err(Error::InvalidGraph(format!("duplicate node id `{}`", node.id)));
            }
            match node.op {
                OpKind::Input => inputs += 1,
                OpKind::Output => outputs += 1,
                _ => {}
            }
            if node.inputs.len() != node.op.input_arity() {
                return Err(Error::InvalidGraph(format!(
                    "node `{}` ({}) takes {} inputs, got {}",
                    node.id,
                    node.op.name(),
                    node.op.input_arity(),
                    node.inputs.len()
                )));
            }
            let (pmin, pmax) = node.op.param_arity();
            if node.params.len() < pmin || node.params.len() > pmax {
                return Err(Error::InvalidGraph(format!(
                    "node `{}` ({}) expects {pmin}..={pmax} params, got {}",
                    node.id,
                    node.op.name(),
                    node.params.len()
                )));
            }
            for input in &node.inputs {
                match seen.get(input.as_str()) {
                    Some(&i) if i < idx => {}
                    _ => {
                        return Err(Error::InvalidGraph(format!(
                            "node `{}` references `{input}` which is not declared earlier",
                            node.id
                        )))
                    }
                }
            }
            for p in &node.params {
                if !self.weights.contains_key(p) {
                    return Err(Error::InvalidGraph(format!(
                        "node `{}` references missing weight `{p}`",
                        node.id
                    )));
                }
            }
            // Light-weight rank checks for params; element counts are
            // enforced by the kernels at run time.
            match &node.op {
                OpKind::Conv2D { .. } => {
                    if self.weights[&node.params[0]].rank() != 4 {
                        return Err(Error::InvalidGraph(format!(
                            "node `{}`: conv weight must be rank 4",
                            node.id
                        )));
                    }
                }
                OpKind::Linear => {
                    if self.weights[&node.params[0]].rank() != 2 {
                        return Err(Error::InvalidGraph(format!(
                            "node `{}`: linear weight must be rank 2",
                            node.id
                        )));
                    }
                }
                OpKind::BatchNorm2D { .. } => {
                    let c = self.weights[&node.params[0]].len();
                    for p in &node.params {
                        let t = &self.weights[p];
                        if t.rank() != 1 || t.len() != c {
                            return Err(Error::InvalidGraph(format!(
                                "node `{}`: batchnorm params must be rank-1 of equal length",
                                node.id
                            )));
                        }
                    }
                    let pred = self
                        .nodes
                        .iter()
                        .find(|n| n.id == node.inputs[0])
                        .expect("checked above");
                    if !matches!(pred.op, OpKind::Conv2D { .. } | OpKind::Linear) {
                        return Err(Error::InvalidGraph(format!(
                            "batchnorm `{}` must follow Conv2D or Linear, found {}",
                            node.id,
                            pred.op.name()
                        )));
                    }
                }
                _ => {}
            }
        }
        if inputs != 1 || outputs != 1 {
            return Err(Error::InvalidGraph(format!(
                "graph must have exactly one Input and one Output node, found {inputs}/{outputs}"
            )));
        }
        if self.metadata.norm_mean.len() != self.metadata.input_shape[1]
            || self.metadata.norm_std.len() != self.metadata.input_shape[1]
        {
            return Err(Error::InvalidGraph(
                "normalization constants must have one entry per input channel".into(),
            ));
        }
        // Declaration order being topological makes cycles impossible here,
        // but run the sort anyway so the invariant is checked in one place.
        self.topo_indices()?;
        Ok(())
    }

    fn topo_indices(&self) -> Result<Vec<usize>> {
        let index_of: HashMap<&str, usize> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id.as_str(), i))
            .collect();
        let mut indegree = vec![0usize; self.nodes.len()];
        let mut consumers: Vec<Vec<usize>> = vec![Vec::new(); self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            for input in &node.inputs {
                let &j = index_of
                    .get(input.as_str())
                    .ok_or_else(|| Error::UnknownNode(input.clone()))?;
                indegree[i] += 1;
                consumers[j].push(i);
            }
        }
        let mut ready: std::collections::BTreeSet<usize> = indegree
            .iter()
            .enumerate()
            .filter(|(_, &d)| d == 0)
            .map(|(i, _)| i)
            .collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(&i) = ready.iter().next() {
            ready.remove(&i);
            order.push(i);
            for &c in &consumers[i] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    ready.insert(c);
                }
            }
        }
        if order.len() != self.nodes.len() {
            return Err(Error::Cycle);
        }
        Ok(order)
    }

    /// Deterministic topological order of node ids (declaration order breaks
    /// ties among simultaneously ready nodes).
    pub fn topo_order(&self) -> Result<Vec<String>> {
        Ok(self
            .topo_indices()?
            .into_iter()
            .map(|i| self.nodes[i].id.clone())
            .collect())
    }

    /// Execute the graph on `input`, returning the Output node's value plus
    /// the requested intermediate activations.
    pub fn run(&self, input: &Tensor, taps: &[&str]) -> Result<(Tensor, BTreeMap<String, Tensor>)> {
        self.run_hooked(input, taps, BnMode::Inference, |_, t| t)
    }

    /// Full-control execution: BatchNorm semantics are selectable and every
    /// node's output passes through `hook(node_id, value)` before being
    /// stored (the quantizer uses this to simulate integer inference).
    pub fn run_hooked<F>(
        &self,
        input: &Tensor,
        taps: &[&str],
        bn_mode: BnMode,
        mut hook: F,
    ) -> Result<(Tensor, BTreeMap<String, Tensor>)>
    where
        F: FnMut(&str, Tensor) -> Tensor,
    {
        let expected = &self.metadata.input_shape;
        let got = input.shape();
        if got.len() != 4 || got[1..] != expected[1..] {
            return Err(Error::ShapeMismatch(format!(
                "input shape {:?} does not match model input {:?} (batch dim is free)",
                got, expected
            )));
        }
        for t in taps {
            if self.node_index(t).is_none() {
                return Err(Error::UnknownNode((*t).to_string()));
            }
        }
        let tap_set: HashSet<&str> = taps.iter().copied().collect();
        let order = self.topo_indices()?;
        let index_of: HashMap<&str, usize> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id.as_str(), i))
            .collect();

        let mut values: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut tapped = BTreeMap::new();
        let mut output: Option<Tensor> = None;

        for i in order {
            let node = &self.nodes[i];
            let args: Vec<&Tensor> = node
                .inputs
                .iter()
                .map(|id| {
                    values[index_of[id.as_str()]]
                        .as_ref()
                        .expect("topological order guarantees inputs are computed")
                })
                .collect();
            let value = match &node.op {
                OpKind::Input => Ok(input.clone()),
                OpKind::Output => Ok(args[0].clone()),
                OpKind::Conv2D { stride, padding } => {
                    let weight = self.weight(&node.params[0])?;
                    let bias = node.params.get(1).map(|p| self.weight(p)).transpose()?;
                    ops::conv2d(args[0], weight, bias, *stride, *padding)
                }
                OpKind::Linear => {
                    let weight = self.weight(&node.params[0])?;
                    let bias = node.params.get(1).map(|p| self.weight(p)).transpose()?;
                    ops::linear(args[0], weight, bias)
                }
                OpKind::BatchNorm2D { eps } => {
                    let gamma = self.weight(&node.params[0])?;
                    let beta = self.weight(&node.params[1])?;
                    match bn_mode {
                        BnMode::Inference => {
                            let mean = self.weight(&node.params[2])?;
                            let var = self.weight(&node.params[3])?;
                            ops::batchnorm_apply(args[0], mean, var, gamma, beta, *eps)
                        }
                        BnMode::BatchStats => {
                            let (mean, var) = batch_channel_stats(args[0])?;
                            ops::batchnorm_apply(args[0], &mean, &var, gamma, beta, *eps)
                        }
                    }
                }
                OpKind::ReLU => ops::relu(args[0]),
                OpKind::MaxPool2D { kernel, stride } => ops::maxpool2d(args[0], *kernel, *stride),
                OpKind::GlobalAvgPool => ops::global_avgpool(args[0]),
                OpKind::Add => ops::add(args[0], args[1]),
                OpKind::Flatten => ops::flatten(args[0]),
            }
            .map_err(|e| e.at_node(&node.id))?;
            drop(args);

            let value = hook(&node.id, value);
            if tap_set.contains(node.id.as_str()) {
                tapped.insert(node.id.clone(), value.clone());
            }
            if node.op == OpKind::Output {
                output = Some(value.clone());
            }
            values[i] = Some(value);
        }
        Ok((output.expect("validated graph has an Output node"), tapped))
    }
}

/// Per-channel mean and population variance over batch and spatial dims.
pub(crate) fn batch_channel_stats(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let shape = x.shape();
    if shape.len() != 2 && shape.len() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "batch statistics need rank-2 or rank-4 input, got {:?}",
            shape
        )));
    }
    let (n, c) = (shape[0], shape[1]);
    let spatial: usize = shape[2..].iter().product();
    let data = x.as_f32()?;
    let count = (n * spatial) as f64;
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    for ch in 0..c {
        let mut sum = 0.0f64;
        for ni in 0..n {
            let base = (ni * c + ch) * spatial;
            for i in 0..spatial {
                sum += data[base + i] as f64;
            }
        }
        let m = sum / count;
        let mut sq = 0.0f64;
        for ni in 0..n {
            let base = (ni * c + ch) * spatial;
            for i in 0..spatial {
                let d = data[base + i] as f64 - m;
                sq += d * d;
            }
        }
        mean[ch] = m as f32;
        var[ch] = (sq / count).max(0.0) as f32;
    }
    Ok((Tensor::from_f32(&[c], mean), Tensor::from_f32(&[c], var)))
}

/// Convenience builder used by tests, fixtures and the loader.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    weights: IndexMap<String, Tensor>,
    metadata: Option<Metadata>,
}

impl GraphBuilder {
    pub fn new(metadata: Metadata) -> GraphBuilder {
        GraphBuilder {
            nodes: Vec::new(),
            weights: IndexMap::new(),
            metadata: Some(metadata),
        }
    }

    pub fn node(
        mut self,
        id: &str,
        op: OpKind,
        inputs: &[&str],
        params: &[&str],
    ) -> GraphBuilder {
        self.nodes.push(Node {
            id: id.to_string(),
            op,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            params: params.iter().map(|s| s.to_string()).collect(),
        });
        self
    }

    pub fn input(self, id: &str) -> GraphBuilder {
        self.node(id, OpKind::Input, &[], &[])
    }

    pub fn output(self, id: &str, from: &str) -> GraphBuilder {
        self.node(id, OpKind::Output, &[from], &[])
    }

    pub fn conv2d(
        self,
        id: &str,
        from: &str,
        weight: &str,
        bias: Option<&str>,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> GraphBuilder {
        let params: Vec<&str> = match bias {
            Some(b) => vec![weight, b],
            None => vec![weight],
        };
        self.node(id, OpKind::Conv2D { stride, padding }, &[from], &params)
    }

    pub fn linear(self, id: &str, from: &str, weight: &str, bias: Option<&str>) -> GraphBuilder {
        let params: Vec<&str> = match bias {
            Some(b) => vec![weight, b],
            None => vec![weight],
        };
        self.node(id, OpKind::Linear, &[from], &params)
    }

    pub fn batchnorm(
        self,
        id: &str,
        from: &str,
        gamma: &str,
        beta: &str,
        mean: &str,
        var: &str,
        eps: f32,
    ) -> GraphBuilder {
        self.node(
            id,
            OpKind::BatchNorm2D { eps },
            &[from],
            &[gamma, beta, mean, var],
        )
    }

    pub fn relu(self, id: &str, from: &str) -> GraphBuilder {
        self.node(id, OpKind::ReLU, &[from], &[])
    }

    pub fn maxpool(
        self,
        id: &str,
        from: &str,
        kernel: (usize, usize),
        stride: (usize, usize),
    ) -> GraphBuilder {
        self.node(id, OpKind::MaxPool2D { kernel, stride }, &[from], &[])
    }

    pub fn global_avgpool(self, id: &str, from: &str) -> GraphBuilder {
        self.node(id, OpKind::GlobalAvgPool, &[from], &[])
    }

    pub fn add(self, id: &str, a: &str, b: &str) -> GraphBuilder {
        self.node(id, OpKind::Add, &[a, b], &[])
    }

    pub fn flatten(self, id: &str, from: &str) -> GraphBuilder {
        self.node(id, OpKind::Flatten, &[from], &[])
    }

    pub fn weight(mut self, name: &str, tensor: Tensor) -> GraphBuilder {
        self.weights.insert(name.to_string(), tensor);
        self
    }

    pub fn build(self) -> Result<Graph> {
        Graph::from_parts(
            self.nodes,
            self.weights,
            self.metadata.expect("GraphBuilder::new sets metadata"),
        )
    }
}
