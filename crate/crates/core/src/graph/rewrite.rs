//! Graph rewrites: batch-norm folding (inference and training forms) and
//! fake-quant insertion.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::exec::{bn_std, scale_channels};
use super::{ConvBnTrainAttrs, FakeQuantAttrs, Graph, GraphError, LayerKind, Node, Op};
use crate::ops::Padding;
use crate::quant::{RangeSpec, Scheme};
use crate::tensor::Tensor;

/// Quantizer choices applied by [`insert_fake_quant`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub weight_scheme: Scheme,
    pub weight_per_channel: bool,
    pub weight_bits: u8,
    #[serde(default)]
    pub weight_narrow_range: bool,
    pub activation_bits: u8,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            weight_scheme: Scheme::Affine,
            weight_per_channel: false,
            weight_bits: 8,
            weight_narrow_range: false,
            activation_bits: 8,
        }
    }
}

impl QuantConfig {
    pub fn weight_attrs(&self, layer: LayerKind) -> FakeQuantAttrs {
        FakeQuantAttrs::weight(
            layer,
            self.weight_scheme,
            self.weight_bits,
            self.weight_narrow_range && self.weight_scheme.is_symmetric(),
            self.weight_per_channel,
        )
    }
}

/// A conv-like node directly followed by its only consumer, a batch norm.
struct BnPair<'a> {
    layer_node: &'a Node,
    layer: LayerKind,
    stride: usize,
    padding: Padding,
}

fn match_bn<'a>(g: &'a Graph, bn: &Node) -> Result<BnPair<'a>, GraphError> {
    let unsupported = |detail: &str| GraphError::UnsupportedTopology { node: bn.name.clone(), detail: detail.into() };
    let producer = g.producer(&bn.inputs[0]).ok_or_else(|| unsupported("batch norm input is not produced by a layer"))?;
    let (layer, stride, padding) = match &producer.op {
        Op::Conv2D { stride, padding } => (LayerKind::Conv2D, *stride, *padding),
        Op::DepthwiseConv2D { stride, padding } => (LayerKind::DepthwiseConv2D, *stride, *padding),
        Op::FullyConnected => (LayerKind::FullyConnected, 1, Padding::Valid),
        other => {
            return Err(unsupported(&format!("batch norm follows {}, not a conv or fully-connected layer", other.kind_name())))
        }
    };
    if g.consumers(&producer.output).len() != 1 {
        return Err(unsupported("layer output feeding the batch norm has other consumers"));
    }
    if !g.params.contains_key(&producer.inputs[1]) {
        return Err(unsupported("layer weight is not a constant (fold before inserting fake quant)"));
    }
    for i in 1..5 {
        if !g.params.contains_key(&bn.inputs[i]) {
            return Err(unsupported(&format!("batch-norm input `{}` is not a constant", bn.inputs[i])));
        }
    }
    Ok(BnPair { layer_node: producer, layer, stride, padding })
}

fn layer_op(layer: LayerKind, stride: usize, padding: Padding) -> Op {
    match layer {
        LayerKind::Conv2D => Op::Conv2D { stride, padding },
        LayerKind::DepthwiseConv2D => Op::DepthwiseConv2D { stride, padding },
        LayerKind::FullyConnected => Op::FullyConnected,
    }
}

/// Folds every batch norm into the preceding layer for inference:
/// `W' = gamma W / sigma`, `b' = beta + gamma (b - mu) / sigma` with
/// `sigma = sqrt(var + eps)`.
pub fn fold_bn_eval(g: &Graph) -> Result<Graph, GraphError> {
    g.validate()?;
    let mut out = g.clone();
    let mut replaced: HashMap<String, Node> = HashMap::new();
    let mut removed = Vec::new();
    for bn in g.nodes.iter().filter(|n| matches!(n.op, Op::BatchNorm { .. })) {
        let Op::BatchNorm { epsilon, .. } = bn.op else { unreachable!() };
        let pair = match_bn(g, bn)?;
        let p = |i: usize| g.params[&bn.inputs[i]].data();
        let (gamma, beta, mean) = (p(1), p(2), p(3));
        let sigma = bn_std(p(4), epsilon);
        let c = gamma.len();
        let scale: Vec<f64> = (0..c).map(|n| gamma[n] / sigma[n]).collect();
        let w = &g.params[&pair.layer_node.inputs[1]];
        let b = pair.layer_node.input(2).map(|b| g.params[b].data().to_vec()).unwrap_or_else(|| vec![0.0; c]);
        let w_name = format!("{}/weight_folded", pair.layer_node.name);
        let b_name = format!("{}/bias_folded", pair.layer_node.name);
        out.params.insert(w_name.clone(), scale_channels(w, &scale));
        let bias: Vec<f64> = (0..c).map(|n| beta[n] + scale[n] * (b[n] - mean[n])).collect();
        out.params.insert(b_name.clone(), Tensor::scalar_vec(bias));
        let x = pair.layer_node.inputs[0].as_str();
        replaced.insert(
            pair.layer_node.name.clone(),
            Node::new(&pair.layer_node.name, layer_op(pair.layer, pair.stride, pair.padding), &[x, &w_name, &b_name], &bn.output),
        );
        removed.push(bn.name.clone());
    }
    out.nodes = g
        .nodes
        .iter()
        .filter(|n| !removed.contains(&n.name))
        .map(|n| replaced.get(&n.name).cloned().unwrap_or_else(|| n.clone()))
        .collect();
    out.prune_params();
    out.shapes.clear();
    Ok(out)
}

/// Replaces each layer + batch norm pair with a [`Op::ConvBnTrain`] node
/// that scales the weights by `gamma / sigma` and, before freezing, undoes
/// the correction factor `c = sigma_B / sigma` on the output.
pub fn fold_bn_training(g: &Graph, freeze: bool) -> Result<Graph, GraphError> {
    g.validate()?;
    if g.has_fake_quant() {
        return Err(GraphError::AlreadyQuantized);
    }
    let mut out = g.clone();
    let mut replaced: HashMap<String, Node> = HashMap::new();
    let mut removed = Vec::new();
    for bn in g.nodes.iter().filter(|n| matches!(n.op, Op::BatchNorm { .. })) {
        let Op::BatchNorm { epsilon, momentum } = bn.op else { unreachable!() };
        let pair = match_bn(g, bn)?;
        let l = pair.layer_node;
        let attrs = ConvBnTrainAttrs {
            layer: pair.layer,
            stride: pair.stride,
            padding: pair.padding,
            epsilon,
            momentum,
            freeze,
            weight_quant: None,
        };
        let bias = l.input(2).unwrap_or("");
        let inputs =
            [l.inputs[0].as_str(), l.inputs[1].as_str(), bias, &bn.inputs[1], &bn.inputs[2], &bn.inputs[3], &bn.inputs[4]];
        replaced.insert(l.name.clone(), Node::new(&l.name, Op::ConvBnTrain(attrs), &inputs, &bn.output));
        removed.push(bn.name.clone());
    }
    out.nodes = g
        .nodes
        .iter()
        .filter(|n| !removed.contains(&n.name))
        .map(|n| replaced.get(&n.name).cloned().unwrap_or_else(|| n.clone()))
        .collect();
    out.shapes.clear();
    Ok(out)
}

/// Sets the `freeze` flag on every training-time batch-norm fold.
pub fn set_bn_freeze(g: &mut Graph, freeze: bool) {
    for n in &mut g.nodes {
        if let Op::ConvBnTrain(a) = &mut n.op {
            a.freeze = freeze;
        }
    }
}

/// Whether the tensor produced by `node` is materialized at inference time
/// and so gets an activation quantizer.
fn is_materialized(g: &Graph, node: &Node, counts: &HashMap<&str, usize>) -> bool {
    let fused_into_next = || {
        if counts.get(node.output.as_str()).copied().unwrap_or(0) != 1 {
            return false;
        }
        let next = g.consumers(&node.output)[0];
        next.op.is_activation_fn()
            || (matches!(next.op, Op::BatchNorm { .. }) && node.op.layer_kind().is_some())
    };
    match &node.op {
        Op::Input { .. } | Op::Relu | Op::Relu6 | Op::AvgPool { .. } => true,
        Op::Conv2D { .. }
        | Op::DepthwiseConv2D { .. }
        | Op::FullyConnected
        | Op::ConvBnTrain(_)
        | Op::BatchNorm { .. }
        | Op::Add
        | Op::Concat { .. } => !fused_into_next(),
        Op::FakeQuant(_) | Op::Output => false,
    }
}

/// Inserts simulated quantization on every layer weight and on every
/// activation tensor that exists at inference time. Nothing is placed between
/// a layer or add and a directly following ReLU/ReLU6, which inference fuses.
pub fn insert_fake_quant(g: &Graph, cfg: &QuantConfig) -> Result<Graph, GraphError> {
    g.validate()?;
    if g.has_fake_quant() {
        return Err(GraphError::AlreadyQuantized);
    }
    let counts = g.consumer_counts();
    let mut rename: HashMap<String, String> = HashMap::new();
    let mut nodes = Vec::with_capacity(g.nodes.len() * 2);
    for node in &g.nodes {
        let mut n = node.clone();
        for input in &mut n.inputs {
            if let Some(r) = rename.get(input) {
                *input = r.clone();
            }
        }
        if let Some(layer) = n.op.layer_kind() {
            let fq_out = format!("{}/weight_quant", n.name);
            nodes.push(Node::new(
                format!("{}/weight_quant", n.name),
                Op::FakeQuant(cfg.weight_attrs(layer)),
                &[&n.inputs[1]],
                &fq_out,
            ));
            n.inputs[1] = fq_out;
        }
        if let Op::ConvBnTrain(a) = &mut n.op {
            a.weight_quant = Some(cfg.weight_attrs(a.layer));
        }
        nodes.push(n);
        if is_materialized(g, node, &counts) {
            let q = format!("{}/act_quant", node.output);
            nodes.push(Node::new(&q, Op::FakeQuant(FakeQuantAttrs::activation(cfg.activation_bits)), &[&node.output], &q));
            rename.insert(node.output.clone(), q);
        }
    }
    let mut out = g.clone();
    out.nodes = nodes;
    out.shapes.clear();
    Ok(out)
}

impl Graph {
    /// Tensors observed by activation quantizers, in graph order.
    pub fn activation_boundaries(&self) -> Vec<String> {
        self.nodes
            .iter()
            .filter(|n| matches!(&n.op, Op::FakeQuant(a) if a.role == super::FakeQuantRole::Activation))
            .map(|n| n.inputs[0].clone())
            .collect()
    }

    /// Stores calibrated ranges on the activation quantizers, keyed by the
    /// tensor each quantizer observes. Returns the first boundary without a range.
    pub fn set_activation_ranges(&mut self, ranges: &BTreeMap<String, RangeSpec>) -> Result<(), GraphError> {
        for n in &mut self.nodes {
            if let Op::FakeQuant(a) = &mut n.op {
                if a.role == super::FakeQuantRole::Activation {
                    let r = ranges.get(&n.inputs[0]).ok_or_else(|| GraphError::MissingRange(n.inputs[0].clone()))?;
                    a.range = Some(*r);
                }
            }
        }
        Ok(())
    }
}
