//! Computation-graph IR.
//!
//! A [`Graph`] is a topologically ordered node list plus a table of constant
//! tensors (weights, biases, batch-norm vectors). Every tensor name has
//! exactly one producer: either a node or a parameter. Rewrites take a graph
//! by reference and return a new one.

mod exec;
mod rewrite;

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ops::{ConvGeom, Padding};
use crate::quant::{QuantError, QuantParams, RangeSpec, Scheme};
use crate::tensor::{numel, Tensor};

pub use exec::{BnMode, FakeQuantMode, RunOptions, Values};
pub use exec::sim_quant_weight;
pub use rewrite::{fold_bn_eval, fold_bn_training, insert_fake_quant, set_bn_freeze, QuantConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("node `{node}`: shape mismatch: {detail}")]
    ShapeMismatch { node: String, detail: String },
    #[error("node `{node}` reads unknown tensor `{tensor}`")]
    UnknownTensor { node: String, tensor: String },
    #[error("tensor `{0}` has more than one producer")]
    DuplicateProducer(String),
    #[error("node `{node}`: {detail}")]
    InvalidNode { node: String, detail: String },
    #[error("graph already contains fake-quant nodes")]
    AlreadyQuantized,
    #[error("node `{node}`: unsupported topology: {detail}")]
    UnsupportedTopology { node: String, detail: String },
    #[error("no quantization range for activation `{0}`")]
    MissingRange(String),
    #[error("missing feed for graph input `{0}`")]
    MissingInput(String),
    #[error(transparent)]
    Quant(#[from] QuantError),
}

/// Which layer kind a conv-like node computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv2D,
    DepthwiseConv2D,
    FullyConnected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FakeQuantRole {
    /// Params derived from the tensor's own min/max on every evaluation.
    Weight,
    /// Params derived from a calibrated or moving-average range.
    Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FakeQuantAttrs {
    pub role: FakeQuantRole,
    pub scheme: Scheme,
    pub n_bits: u8,
    #[serde(default)]
    pub narrow_range: bool,
    /// Weights only: one quantizer per output channel.
    #[serde(default)]
    pub per_channel: bool,
    /// Weights only: layer the weight feeds, which fixes the output-channel axis.
    #[serde(default)]
    pub layer: Option<LayerKind>,
    /// Activations only: range the quantizer covers.
    #[serde(default)]
    pub range: Option<RangeSpec>,
}

impl FakeQuantAttrs {
    pub fn activation(n_bits: u8) -> Self {
        Self {
            role: FakeQuantRole::Activation,
            scheme: Scheme::Affine,
            n_bits,
            narrow_range: false,
            per_channel: false,
            layer: None,
            range: None,
        }
    }

    pub fn weight(layer: LayerKind, scheme: Scheme, n_bits: u8, narrow_range: bool, per_channel: bool) -> Self {
        Self { role: FakeQuantRole::Weight, scheme, n_bits, narrow_range, per_channel, layer: Some(layer), range: None }
    }

    /// Activation params from the stored range (relaxed to include zero).
    pub fn activation_params(&self, tensor: &str) -> Result<QuantParams, GraphError> {
        let r = self.range.ok_or_else(|| GraphError::MissingRange(tensor.to_string()))?;
        Ok(crate::quant::params_from_range(r, self.n_bits, self.scheme, self.narrow_range)?)
    }
}

/// Conv + batch norm with correction (training-time fold).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvBnTrainAttrs {
    pub layer: LayerKind,
    pub stride: usize,
    pub padding: Padding,
    pub epsilon: f64,
    pub momentum: f64,
    /// Long-term statistics in use (bias correction, no output rescale).
    pub freeze: bool,
    #[serde(default)]
    pub weight_quant: Option<FakeQuantAttrs>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Op {
    Input { shape: Vec<usize> },
    /// inputs: `[x, weight, bias?]`
    Conv2D { stride: usize, padding: Padding },
    /// inputs: `[x, weight, bias?]`
    DepthwiseConv2D { stride: usize, padding: Padding },
    /// inputs: `[x, weight, bias?]`; `x` is flattened per sample.
    FullyConnected,
    Add,
    Concat { axis: usize },
    Relu,
    Relu6,
    /// inputs: `[x, gamma, beta, moving_mean, moving_variance]`
    BatchNorm { epsilon: f64, momentum: f64 },
    AvgPool { kernel: usize, stride: usize },
    FakeQuant(FakeQuantAttrs),
    /// inputs: `[x, weight, conv_bias?, gamma, beta, moving_mean, moving_variance]`;
    /// a missing conv bias is written as an empty string.
    ConvBnTrain(ConvBnTrainAttrs),
    Output,
}

impl Op {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Conv2D { .. } => "conv2d",
            Op::DepthwiseConv2D { .. } => "depthwise_conv2d",
            Op::FullyConnected => "fully_connected",
            Op::Add => "add",
            Op::Concat { .. } => "concat",
            Op::Relu => "relu",
            Op::Relu6 => "relu6",
            Op::BatchNorm { .. } => "batch_norm",
            Op::AvgPool { .. } => "avg_pool",
            Op::FakeQuant(_) => "fake_quant",
            Op::ConvBnTrain(_) => "conv_bn_train",
            Op::Output => "output",
        }
    }

    pub fn layer_kind(&self) -> Option<LayerKind> {
        match self {
            Op::Conv2D { .. } => Some(LayerKind::Conv2D),
            Op::DepthwiseConv2D { .. } => Some(LayerKind::DepthwiseConv2D),
            Op::FullyConnected => Some(LayerKind::FullyConnected),
            _ => None,
        }
    }

    pub fn is_activation_fn(&self) -> bool {
        matches!(self, Op::Relu | Op::Relu6)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub name: String,
    pub op: Op,
    #[serde(default)]
    pub inputs: Vec<String>,
    pub output: String,
}

impl Node {
    pub fn new(name: impl Into<String>, op: Op, inputs: &[&str], output: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            op,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            output: output.into(),
        }
    }

    /// Optional input, with `""` standing for "absent".
    pub fn input(&self, i: usize) -> Option<&str> {
        self.inputs.get(i).map(String::as_str).filter(|s| !s.is_empty())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Graph {
    pub nodes: Vec<Node>,
    #[serde(skip)]
    pub params: BTreeMap<String, Tensor>,
    /// Filled by [`infer_shapes`].
    #[serde(skip)]
    pub shapes: BTreeMap<String, Vec<usize>>,
}

pub type ShapeMap = BTreeMap<String, Vec<usize>>;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_param(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn push(&mut self, node: Node) -> &mut Self {
        self.nodes.push(node);
        self
    }

    pub fn node(&self, name: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.name == name)
    }

    pub fn input_nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.iter().filter(|n| matches!(n.op, Op::Input { .. }))
    }

    pub fn output_nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.iter().filter(|n| matches!(n.op, Op::Output))
    }

    /// Name of the node producing `tensor` (`None` for parameters and unknown names).
    pub fn producer(&self, tensor: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.output == tensor)
    }

    /// Nodes reading `tensor`, in graph order.
    pub fn consumers(&self, tensor: &str) -> Vec<&Node> {
        self.nodes.iter().filter(|n| n.inputs.iter().any(|i| i == tensor)).collect()
    }

    pub fn has_fake_quant(&self) -> bool {
        self.nodes.iter().any(|n| matches!(n.op, Op::FakeQuant(_)))
            || self
                .nodes
                .iter()
                .any(|n| matches!(&n.op, Op::ConvBnTrain(a) if a.weight_quant.is_some()))
    }

    /// Checks single-producer, defined-before-use (hence acyclic) and attribute arity.
    pub fn validate(&self) -> Result<(), GraphError> {
        let mut defined: HashSet<&str> = self.params.keys().map(String::as_str).collect();
        let mut names = HashSet::new();
        for node in &self.nodes {
            if !names.insert(node.name.as_str()) {
                return Err(GraphError::InvalidNode { node: node.name.clone(), detail: "duplicate node name".into() });
            }
            let (min, max) = arity(&node.op);
            if node.inputs.len() < min || node.inputs.len() > max {
                return Err(GraphError::InvalidNode {
                    node: node.name.clone(),
                    detail: format!("{} expects {min}..={max} inputs, got {}", node.op.kind_name(), node.inputs.len()),
                });
            }
            for (i, t) in node.inputs.iter().enumerate() {
                if t.is_empty() && optional_slot(&node.op, i) {
                    continue;
                }
                if !defined.contains(t.as_str()) {
                    return Err(GraphError::UnknownTensor { node: node.name.clone(), tensor: t.clone() });
                }
            }
            if !defined.insert(node.output.as_str()) {
                return Err(GraphError::DuplicateProducer(node.output.clone()));
            }
        }
        Ok(())
    }

    /// Drops parameters that no node reads.
    pub fn prune_params(&mut self) {
        let used: HashSet<String> = self.nodes.iter().flat_map(|n| n.inputs.iter().cloned()).collect();
        self.params.retain(|k, _| used.contains(k));
    }

    /// Number of consumers per tensor name.
    pub(crate) fn consumer_counts(&self) -> HashMap<&str, usize> {
        let mut m = HashMap::new();
        for n in &self.nodes {
            for i in &n.inputs {
                *m.entry(i.as_str()).or_insert(0) += 1;
            }
        }
        m
    }
}

fn arity(op: &Op) -> (usize, usize) {
    match op {
        Op::Input { .. } => (0, 0),
        Op::Conv2D { .. } | Op::DepthwiseConv2D { .. } | Op::FullyConnected => (2, 3),
        Op::Add => (2, 2),
        Op::Concat { .. } => (1, usize::MAX),
        Op::Relu | Op::Relu6 | Op::AvgPool { .. } | Op::FakeQuant(_) | Op::Output => (1, 1),
        Op::BatchNorm { .. } => (5, 5),
        Op::ConvBnTrain(_) => (7, 7),
    }
}

fn optional_slot(op: &Op, i: usize) -> bool {
    match op {
        Op::Conv2D { .. } | Op::DepthwiseConv2D { .. } | Op::FullyConnected => i == 2,
        Op::ConvBnTrain(_) => i == 2,
        _ => false,
    }
}

/// Output shape of a conv-like layer.
pub(crate) fn layer_output_shape(
    node: &str,
    layer: LayerKind,
    x: &[usize],
    w: &[usize],
    stride: usize,
    padding: Padding,
) -> Result<Vec<usize>, GraphError> {
    let mismatch = |detail: String| GraphError::ShapeMismatch { node: node.to_string(), detail };
    match layer {
        LayerKind::FullyConnected => {
            if w.len() != 2 || x.is_empty() {
                return Err(mismatch(format!("fc weight {w:?} / input {x:?}")));
            }
            let feat = numel(&x[1..]);
            if feat != w[0] {
                return Err(mismatch(format!("fc expects {} input features, got {feat}", w[0])));
            }
            Ok(vec![x[0], w[1]])
        }
        LayerKind::Conv2D | LayerKind::DepthwiseConv2D => {
            if x.len() != 4 || w.len() != 4 {
                return Err(mismatch(format!("conv needs rank-4 input and weight, got {x:?} and {w:?}")));
            }
            if x[3] != w[2] {
                return Err(mismatch(format!("input has {} channels, weight expects {}", x[3], w[2])));
            }
            let g = ConvGeom::new(x[0], x[1], x[2], w[0], w[1], stride, padding)
                .ok_or_else(|| mismatch(format!("kernel {}x{} does not fit input {x:?}", w[0], w[1])))?;
            let cout = if layer == LayerKind::Conv2D { w[3] } else { w[2] * w[3] };
            Ok(vec![x[0], g.out_h, g.out_w, cout])
        }
    }
}

/// Output-channel count of a layer weight.
pub(crate) fn layer_out_channels(layer: LayerKind, w: &[usize]) -> usize {
    match layer {
        LayerKind::DepthwiseConv2D => w[2] * w[3],
        _ => *w.last().unwrap_or(&1),
    }
}

/// Annotates every tensor with its shape.
pub fn infer_shapes(g: &Graph) -> Result<Graph, GraphError> {
    g.validate()?;
    let mut shapes: ShapeMap = g.params.iter().map(|(k, v)| (k.clone(), v.shape().to_vec())).collect();
    for node in &g.nodes {
        let get = |i: usize| -> Result<&Vec<usize>, GraphError> {
            let t = &node.inputs[i];
            shapes.get(t).ok_or_else(|| GraphError::UnknownTensor { node: node.name.clone(), tensor: t.clone() })
        };
        let mismatch = |detail: String| GraphError::ShapeMismatch { node: node.name.clone(), detail };
        let out = match &node.op {
            Op::Input { shape } => shape.clone(),
            Op::Conv2D { stride, padding } | Op::DepthwiseConv2D { stride, padding } => {
                let layer = node.op.layer_kind().unwrap();
                let (x, w) = (get(0)?, get(1)?);
                let out = layer_output_shape(&node.name, layer, x, w, *stride, *padding)?;
                check_bias(node, &shapes, out[3])?;
                out
            }
            Op::FullyConnected => {
                let out = layer_output_shape(&node.name, LayerKind::FullyConnected, get(0)?, get(1)?, 1, Padding::Valid)?;
                check_bias(node, &shapes, out[1])?;
                out
            }
            Op::ConvBnTrain(a) => {
                let out = layer_output_shape(&node.name, a.layer, get(0)?, get(1)?, a.stride, a.padding)?;
                let c = *out.last().unwrap();
                check_bias(node, &shapes, c)?;
                for i in 3..7 {
                    if get(i)? != &vec![c] {
                        return Err(mismatch(format!("batch-norm vector `{}` must have {c} entries", node.inputs[i])));
                    }
                }
                out
            }
            Op::Add => {
                let (a, b) = (get(0)?, get(1)?);
                if a != b {
                    return Err(mismatch(format!("add of {a:?} and {b:?}")));
                }
                a.clone()
            }
            Op::Concat { axis } => {
                let first = get(0)?.clone();
                if *axis >= first.len() {
                    return Err(mismatch(format!("concat axis {axis} out of range for {first:?}")));
                }
                let mut out = first.clone();
                out[*axis] = 0;
                for i in 0..node.inputs.len() {
                    let s = get(i)?;
                    let compatible = s.len() == first.len()
                        && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == *axis || a == b);
                    if !compatible {
                        return Err(mismatch(format!("concat of {first:?} and {s:?} along axis {axis}")));
                    }
                    out[*axis] += s[*axis];
                }
                out
            }
            Op::Relu | Op::Relu6 | Op::FakeQuant(_) | Op::Output => get(0)?.clone(),
            Op::BatchNorm { .. } => {
                let x = get(0)?.clone();
                let c = *x.last().ok_or_else(|| mismatch("scalar batch-norm input".into()))?;
                for i in 1..5 {
                    if get(i)? != &vec![c] {
                        return Err(mismatch(format!("batch-norm vector `{}` must have {c} entries", node.inputs[i])));
                    }
                }
                x
            }
            Op::AvgPool { kernel, stride } => {
                let x = get(0)?;
                if x.len() != 4 {
                    return Err(mismatch(format!("avg pool needs rank-4 input, got {x:?}")));
                }
                let g = ConvGeom::new(x[0], x[1], x[2], *kernel, *kernel, *stride, Padding::Valid)
                    .ok_or_else(|| mismatch(format!("pool window {kernel} does not fit {x:?}")))?;
                vec![x[0], g.out_h, g.out_w, x[3]]
            }
        };
        shapes.insert(node.output.clone(), out);
    }
    let mut annotated = g.clone();
    annotated.shapes = shapes;
    Ok(annotated)
}

fn check_bias(node: &Node, shapes: &ShapeMap, channels: usize) -> Result<(), GraphError> {
    if let Some(b) = node.input(2) {
        let s = shapes.get(b).ok_or_else(|| GraphError::UnknownTensor { node: node.name.clone(), tensor: b.into() })?;
        if s != &vec![channels] {
            return Err(GraphError::ShapeMismatch {
                node: node.name.clone(),
                detail: format!("bias {s:?} for {channels} output channels"),
            });
        }
    }
    Ok(())
}
