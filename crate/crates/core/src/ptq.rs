//! Post-training quantization: weight-only quantization, activation range
//! calibration, and conversion of a calibrated float graph into an [`IntModel`].

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::graph::{
    fold_bn_eval, insert_fake_quant, FakeQuantMode, FakeQuantRole, Graph, GraphError, LayerKind, Op, QuantConfig,
    RunOptions, Values,
};
use crate::kernels::{plan_qconv, FusedActivation, IntModel, IntOp, KernelError};
use crate::ops::argmax_rows;
use crate::qat::CalibrationStats;
use crate::quant::{
    params_from_range, quantize_with, relax_range, sim_quant_with, tensor_params, Granularity, QuantError,
    QuantParams, RangeSpec, Scheme,
};
use crate::tensor::{QTensor, Tensor};

/// Calibrated activation ranges keyed by tensor name.
pub type RangeTable = BTreeMap<String, RangeSpec>;

#[derive(Debug, Error)]
pub enum PtqError {
    #[error("invalid quantization config: {0}")]
    Config(String),
    #[error("calibration data yielded no batches")]
    NoData,
    #[error("no calibrated range for activation `{0}`")]
    MissingRange(String),
    #[error("cannot convert node `{node}`: {detail}")]
    Unsupported { node: String, detail: String },
    #[error(transparent)]
    Graph(GraphError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Quant(#[from] QuantError),
}

impl From<GraphError> for PtqError {
    fn from(e: GraphError) -> Self {
        match e {
            GraphError::MissingRange(t) => PtqError::MissingRange(t),
            e => PtqError::Graph(e),
        }
    }
}

fn default_bits() -> u8 {
    8
}
fn default_batches() -> usize {
    100
}
fn default_momentum() -> f64 {
    0.99
}

/// Post-training quantization settings; field names are the TOML keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PTQConfig {
    #[serde(default)]
    pub weight_scheme: Scheme,
    #[serde(default)]
    pub weight_per_channel: bool,
    #[serde(default = "default_bits")]
    pub weight_bits: u8,
    #[serde(default)]
    pub weight_narrow_range: bool,
    #[serde(default = "default_bits")]
    pub activation_bits: u8,
    #[serde(default = "default_batches")]
    pub calibration_batches: usize,
    /// Track the global min/max instead of a moving average.
    #[serde(default)]
    pub global_minmax: bool,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
}

impl Default for PTQConfig {
    fn default() -> Self {
        Self {
            weight_scheme: Scheme::Affine,
            weight_per_channel: false,
            weight_bits: default_bits(),
            weight_narrow_range: false,
            activation_bits: default_bits(),
            calibration_batches: default_batches(),
            global_minmax: false,
            momentum: default_momentum(),
        }
    }
}

impl PTQConfig {
    pub fn validate(&self) -> Result<(), PtqError> {
        for (name, b) in [("weight_bits", self.weight_bits), ("activation_bits", self.activation_bits)] {
            if b != 4 && b != 8 {
                return Err(PtqError::Config(format!("{name} must be 4 or 8, got {b}")));
            }
        }
        if self.weight_narrow_range && !self.weight_scheme.is_symmetric() {
            return Err(PtqError::Config("narrow range needs a symmetric weight scheme".into()));
        }
        if self.calibration_batches == 0 {
            return Err(PtqError::Config("calibration_batches must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(PtqError::Config(format!("momentum must be in [0, 1], got {}", self.momentum)));
        }
        Ok(())
    }

    pub fn quant_config(&self) -> QuantConfig {
        QuantConfig {
            weight_scheme: self.weight_scheme,
            weight_per_channel: self.weight_per_channel,
            weight_bits: self.weight_bits,
            weight_narrow_range: self.weight_narrow_range,
            activation_bits: self.activation_bits,
        }
    }
}

/// Weight codes with the params that decode them.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedWeight {
    pub codes: QTensor,
    pub params: Vec<QuantParams>,
}

impl QuantizedWeight {
    pub fn dequantize(&self) -> Tensor {
        crate::quant::dequantize_with(&self.codes, &self.params)
    }
}

/// A folded float graph whose layer weights were replaced by their
/// quantize-dequantize images. `weights` holds the codes behind them.
#[derive(Debug, Clone)]
pub struct WeightOnlyModel {
    pub graph: Graph,
    pub weights: BTreeMap<String, QuantizedWeight>,
}

/// Quantizes one layer weight with params from its own min/max.
pub fn quantize_weight(layer: LayerKind, w: &Tensor, qc: &QuantConfig) -> Result<QuantizedWeight, QuantError> {
    let attrs = qc.weight_attrs(layer);
    let cout = match layer {
        LayerKind::DepthwiseConv2D => w.shape()[2] * w.shape()[3],
        _ => *w.shape().last().unwrap_or(&1),
    };
    let flat = w.clone().reshape(vec![w.len() / cout, cout]);
    let gran = if attrs.per_channel { Granularity::PerChannel { axis: 1 } } else { Granularity::PerLayer };
    let params = tensor_params(&flat, gran, attrs.scheme, attrs.n_bits, attrs.narrow_range)?;
    Ok(QuantizedWeight { codes: quantize_with(w, &params), params })
}

/// Folds batch norm, then replaces every layer weight by its simulated
/// quantization. Needs no data.
pub fn quantize_weights_only(g: &Graph, cfg: &PTQConfig) -> Result<WeightOnlyModel, PtqError> {
    cfg.validate()?;
    if g.has_fake_quant() {
        return Err(GraphError::AlreadyQuantized.into());
    }
    let qc = cfg.quant_config();
    let mut out = fold_bn_eval(g)?;
    let mut weights = BTreeMap::new();
    for node in &g_layers(&out) {
        let (layer, wname) = node;
        let w = &out.params[wname];
        let q = quantize_weight(*layer, w, &qc)?;
        let deq = sim_quant_with(w, &q.params);
        out.params.insert(wname.clone(), deq);
        weights.insert(wname.clone(), q);
    }
    Ok(WeightOnlyModel { graph: out, weights })
}

fn g_layers(g: &Graph) -> Vec<(LayerKind, String)> {
    g.nodes.iter().filter_map(|n| n.op.layer_kind().map(|k| (k, n.inputs[1].clone()))).collect()
}

fn single_input(g: &Graph) -> Result<String, PtqError> {
    let inputs: Vec<_> = g.input_nodes().collect();
    match inputs.as_slice() {
        [n] => Ok(n.output.clone()),
        _ => Err(PtqError::Unsupported {
            node: inputs.first().map(|n| n.name.clone()).unwrap_or_default(),
            detail: format!("graph has {} inputs, exactly one is supported", inputs.len()),
        }),
    }
}

/// Runs up to `cfg.calibration_batches` batches through the BN-folded float
/// graph and records a moving min/max at every activation boundary. Ranges are
/// relaxed to contain zero after the last update.
pub fn calibrate<I>(g: &Graph, batches: I, cfg: &PTQConfig) -> Result<RangeTable, PtqError>
where
    I: IntoIterator<Item = Tensor>,
{
    cfg.validate()?;
    let input = single_input(g)?;
    let observed = insert_fake_quant(&fold_bn_eval(g)?, &cfg.quant_config())?;
    let opts = RunOptions { fake_quant: FakeQuantMode::Bypass, ..Default::default() };
    let mut stats: BTreeMap<String, CalibrationStats> = BTreeMap::new();
    let mut seen = 0usize;
    for x in batches.into_iter().take(cfg.calibration_batches) {
        let feeds: Values = [(input.clone(), x)].into_iter().collect();
        observed.run_observed(&feeds, opts, &mut |node, t| {
            if !matches!(&node.op, Op::FakeQuant(a) if a.role == FakeQuantRole::Activation) || t.is_empty() {
                return;
            }
            let (lo, hi) = t.min_max();
            let s = stats.entry(node.inputs[0].clone()).or_insert_with(|| CalibrationStats::new(cfg.momentum));
            *s = if cfg.global_minmax && s.sample_count > 0 {
                CalibrationStats {
                    moving_min: s.moving_min.min(lo),
                    moving_max: s.moving_max.max(hi),
                    sample_count: s.sample_count + 1,
                    ..*s
                }
            } else {
                s.observe(lo, hi)
            };
        })?;
        seen += 1;
    }
    if seen == 0 {
        return Err(PtqError::NoData);
    }
    Ok(stats.into_iter().filter_map(|(k, s)| s.range().map(|r| (k, relax_range(r)))).collect())
}

/// The simulated-quantization float graph: BN folded, fake quant inserted,
/// activation ranges set from `ranges`.
pub fn sim_quant_graph(g: &Graph, ranges: &RangeTable, cfg: &PTQConfig) -> Result<Graph, PtqError> {
    cfg.validate()?;
    let mut q = insert_fake_quant(&fold_bn_eval(g)?, &cfg.quant_config())?;
    q.set_activation_ranges(ranges)?;
    Ok(q)
}

fn fused_activation(op: &Op) -> Option<FusedActivation> {
    match op {
        Op::Relu => Some(FusedActivation::Relu),
        Op::Relu6 => Some(FusedActivation::Relu6),
        _ => None,
    }
}

/// Converts a float graph and calibrated ranges into an integer-only model.
/// A ReLU/ReLU6 that is the only consumer of a layer, add or concat output is
/// fused into that op's output clamp.
pub fn convert(g: &Graph, ranges: &RangeTable, cfg: &PTQConfig) -> Result<IntModel, PtqError> {
    cfg.validate()?;
    if g.has_fake_quant() {
        return Err(GraphError::AlreadyQuantized.into());
    }
    let folded = fold_bn_eval(g)?;
    // Every boundary the simulated graph quantizes must have a range.
    let sim = insert_fake_quant(&folded, &cfg.quant_config())?;
    for b in sim.activation_boundaries() {
        if !ranges.contains_key(&b) {
            return Err(PtqError::MissingRange(b));
        }
    }
    let qc = cfg.quant_config();
    let act_params = |t: &str| -> Result<QuantParams, PtqError> {
        let r = ranges.get(t).ok_or_else(|| PtqError::MissingRange(t.to_string()))?;
        Ok(params_from_range(*r, cfg.activation_bits, Scheme::Affine, false)?)
    };
    let counts = folded.consumer_counts();
    // Fused activation consumer of a tensor, if any.
    let fusable = |tensor: &str| {
        if counts.get(tensor).copied().unwrap_or(0) != 1 {
            return None;
        }
        let next = folded.consumers(tensor)[0];
        fused_activation(&next.op).map(|a| (next, a))
    };
    let mut fused: HashSet<String> = HashSet::new();
    let mut input = None;
    let mut ops = Vec::new();
    let mut outputs = Vec::new();
    let unsupported = |node: &str, detail: String| PtqError::Unsupported { node: node.to_string(), detail };
    for node in &folded.nodes {
        if fused.contains(&node.name) {
            continue;
        }
        let (output, activation) = match fusable(&node.output) {
            Some((next, a)) if node.op.layer_kind().is_some() || matches!(node.op, Op::Add | Op::Concat { .. }) => {
                fused.insert(next.name.clone());
                (next.output.clone(), a)
            }
            _ => (node.output.clone(), FusedActivation::None),
        };
        match &node.op {
            Op::Input { shape } => {
                if input.is_some() {
                    return Err(unsupported(&node.name, "more than one graph input".into()));
                }
                input = Some((node.output.clone(), shape.clone(), act_params(&node.output)?));
            }
            Op::Conv2D { .. } | Op::DepthwiseConv2D { .. } | Op::FullyConnected => {
                let layer = node.op.layer_kind().unwrap();
                let (stride, padding) = match node.op {
                    Op::Conv2D { stride, padding } | Op::DepthwiseConv2D { stride, padding } => (stride, padding),
                    _ => (1, crate::ops::Padding::Valid),
                };
                let w = folded
                    .params
                    .get(&node.inputs[1])
                    .ok_or_else(|| unsupported(&node.name, format!("weight `{}` is not a constant", node.inputs[1])))?;
                let bias = match node.input(2) {
                    Some(b) => Some(
                        folded
                            .params
                            .get(b)
                            .ok_or_else(|| unsupported(&node.name, format!("bias `{b}` is not a constant")))?
                            .data(),
                    ),
                    None => None,
                };
                let q = quantize_weight(layer, w, &qc)?;
                let qp_x = act_params(&node.inputs[0])?;
                let qp_y = act_params(&output)?;
                let plan =
                    plan_qconv(&node.name, layer, stride, padding, q.codes, &q.params, qp_x, qp_y, bias, activation)?;
                ops.push(IntOp::Layer { name: node.name.clone(), input: node.inputs[0].clone(), output, plan });
            }
            Op::Add => {
                let qp_y = act_params(&output)?;
                ops.push(IntOp::Add {
                    name: node.name.clone(),
                    inputs: [node.inputs[0].clone(), node.inputs[1].clone()],
                    output,
                    qp_y,
                    activation,
                });
            }
            Op::Concat { axis } => {
                let qp_y = act_params(&output)?;
                ops.push(IntOp::Concat {
                    name: node.name.clone(),
                    inputs: node.inputs.clone(),
                    output,
                    axis: *axis,
                    qp_y,
                    activation,
                });
            }
            Op::Relu | Op::Relu6 => {
                ops.push(IntOp::Activation {
                    name: node.name.clone(),
                    input: node.inputs[0].clone(),
                    output: node.output.clone(),
                    activation: fused_activation(&node.op).unwrap(),
                    qp_y: act_params(&node.output)?,
                });
            }
            Op::AvgPool { kernel, stride } => {
                ops.push(IntOp::AvgPool {
                    name: node.name.clone(),
                    input: node.inputs[0].clone(),
                    output: node.output.clone(),
                    kernel: *kernel,
                    stride: *stride,
                    qp_y: act_params(&node.output)?,
                });
            }
            Op::Output => outputs.push(node.inputs[0].clone()),
            other => return Err(unsupported(&node.name, format!("{} has no integer kernel", other.kind_name()))),
        }
    }
    let (input, input_shape, input_qp) = input.ok_or_else(|| unsupported("", "graph has no input".into()))?;
    if outputs.is_empty() {
        return Err(unsupported("", "graph has no output".into()));
    }
    Ok(IntModel { input, input_shape, input_qp, ops, outputs })
}

/// Top-1 accuracy of a float (or simulated-quantization) graph with one input and one output.
pub fn graph_accuracy(g: &Graph, data: &Dataset) -> Result<f64, PtqError> {
    let input = single_input(g)?;
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for (x, labels) in data.batches(256) {
        let feeds: Values = [(input.clone(), x)].into_iter().collect();
        let out = g.run(&feeds, RunOptions::default())?;
        let logits = out
            .values()
            .next()
            .ok_or_else(|| PtqError::Unsupported { node: String::new(), detail: "graph has no output".into() })?;
        correct += argmax_rows(logits).iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Top-1 predictions of an integer model on its first output.
pub fn int_predictions(m: &IntModel, x: &Tensor) -> Result<Vec<usize>, PtqError> {
    let outs = m.run_output_codes(x)?;
    // Codes are monotone in the dequantized value, so argmax works on them directly.
    let (codes, _) = &outs[0];
    let logits = Tensor::new(codes.shape().to_vec(), codes.data().iter().map(|&c| c as f64).collect());
    Ok(argmax_rows(&logits))
}

/// Top-1 accuracy of an integer model.
pub fn int_accuracy(m: &IntModel, data: &Dataset) -> Result<f64, PtqError> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for (x, labels) in data.batches(256) {
        correct += int_predictions(m, &x)?.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / data.len() as f64)
}
