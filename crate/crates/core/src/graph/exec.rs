//! Float interpreter for [`Graph`].

use std::collections::BTreeMap;

use super::{ConvBnTrainAttrs, FakeQuantAttrs, FakeQuantRole, Graph, GraphError, LayerKind, Node, Op};
use crate::ops::{self, Padding};
use crate::quant::{self, Granularity, QuantParams};
use crate::tensor::Tensor;

pub type Values = BTreeMap<String, Tensor>;

/// Statistics used by batch-norm style nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BnMode {
    /// Long-term (moving) statistics.
    #[default]
    Inference,
    /// Statistics of the current batch.
    Training,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FakeQuantMode {
    #[default]
    Apply,
    /// Fake-quant nodes pass values through unchanged.
    Bypass,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub bn: BnMode,
    pub fake_quant: FakeQuantMode,
}

/// Dispatches a conv-like layer to the float kernels.
pub(crate) fn layer_forward(
    layer: LayerKind,
    x: &Tensor,
    w: &Tensor,
    bias: Option<&[f64]>,
    stride: usize,
    padding: Padding,
) -> Tensor {
    match layer {
        LayerKind::Conv2D => ops::conv2d(x, w, bias, stride, padding),
        LayerKind::DepthwiseConv2D => ops::depthwise_conv2d(x, w, bias, stride, padding),
        LayerKind::FullyConnected => ops::fully_connected(x, w, bias),
    }
}

/// Simulated quantization of a layer weight, per layer or per output channel.
pub fn sim_quant_weight(
    layer: LayerKind,
    w: &Tensor,
    attrs: &FakeQuantAttrs,
) -> Result<(Tensor, Vec<QuantParams>), GraphError> {
    let cout = super::layer_out_channels(layer, w.shape());
    let flat = w.clone().reshape(vec![w.len() / cout, cout]);
    let granularity = if attrs.per_channel { Granularity::PerChannel { axis: 1 } } else { Granularity::PerLayer };
    let (q, params) = quant::sim_quant_tensor(&flat, granularity, attrs.scheme, attrs.n_bits, attrs.narrow_range)?;
    Ok((q.reshape(w.shape().to_vec()), params))
}

fn fake_quant(node: &Node, attrs: &FakeQuantAttrs, x: &Tensor) -> Result<Tensor, GraphError> {
    match attrs.role {
        FakeQuantRole::Activation => {
            let qp = attrs.activation_params(&node.inputs[0])?;
            Ok(x.map(|v| quant::sim_quant(v, &qp)))
        }
        FakeQuantRole::Weight => {
            let layer = attrs.layer.unwrap_or(if x.rank() == 2 { LayerKind::FullyConnected } else { LayerKind::Conv2D });
            Ok(sim_quant_weight(layer, x, attrs)?.0)
        }
    }
}

/// Scales every element by the factor of its output channel.
pub(crate) fn scale_channels(t: &Tensor, factors: &[f64]) -> Tensor {
    let c = factors.len();
    Tensor::new(t.shape().to_vec(), t.data().iter().enumerate().map(|(i, &v)| v * factors[i % c]).collect())
}

fn batch_norm(x: &Tensor, gamma: &[f64], beta: &[f64], mean: &[f64], std: &[f64]) -> Tensor {
    let c = gamma.len();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = i % c;
            gamma[ch] * ((v - mean[ch]) / std[ch]) + beta[ch]
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

pub(crate) fn bn_std(var: &[f64], eps: f64) -> Vec<f64> {
    var.iter().map(|v| (v + eps).sqrt()).collect()
}

/// Forward pass of a conv followed by batch norm in its folded, corrected form.
///
/// In [`BnMode::Training`] the batch statistics are computed from the
/// unfolded convolution; the weights are always scaled to the long-term
/// statistics before quantization.
pub(crate) fn conv_bn_train_forward(
    a: &ConvBnTrainAttrs,
    x: &Tensor,
    w: &Tensor,
    conv_bias: Option<&[f64]>,
    bn: [&[f64]; 4],
    mode: RunOptions,
) -> Result<Tensor, GraphError> {
    let [gamma, beta, mean, var] = bn;
    let sigma = bn_std(var, a.epsilon);
    let c = gamma.len();
    let zero = vec![0.0; c];
    let b = conv_bias.unwrap_or(&zero);
    let fold: Vec<f64> = (0..c).map(|n| gamma[n] / sigma[n]).collect();
    let w_corrected = scale_channels(w, &fold);
    let (w_used, quantized) = match (&a.weight_quant, mode.fake_quant) {
        (Some(fq), FakeQuantMode::Apply) => (sim_quant_weight(a.layer, &w_corrected, fq)?.0, true),
        _ => (w_corrected, false),
    };
    let y = layer_forward(a.layer, x, &w_used, None, a.stride, a.padding);
    if mode.bn == BnMode::Inference {
        let bias: Vec<f64> = (0..c).map(|n| beta[n] + fold[n] * (b[n] - mean[n])).collect();
        return Ok(add_channel_bias(&y, &bias));
    }
    let raw = layer_forward(a.layer, x, w, Some(b), a.stride, a.padding);
    let (mu_b, var_b) = ops::channel_moments(&raw);
    let sigma_b = bn_std(&var_b, a.epsilon);
    if !a.freeze && !quantized {
        // Unquantized weights: the corrected fold is exactly batch-statistics BN.
        return Ok(batch_norm(&raw, gamma, beta, &mu_b, &sigma_b));
    }
    if a.freeze {
        let bias: Vec<f64> = (0..c)
            .map(|n| {
                let base = beta[n] - gamma[n] * (mu_b[n] - b[n]) / sigma_b[n];
                let correction = gamma[n] * ((mu_b[n] - b[n]) / sigma_b[n] - (mean[n] - b[n]) / sigma[n]);
                base + correction
            })
            .collect();
        Ok(add_channel_bias(&y, &bias))
    } else {
        // y / c with c = sigma_B / sigma, plus the batch-statistics bias.
        let inv_c: Vec<f64> = (0..c).map(|n| sigma[n] / sigma_b[n]).collect();
        let bias: Vec<f64> = (0..c).map(|n| beta[n] - gamma[n] * (mu_b[n] - b[n]) / sigma_b[n]).collect();
        let data = y
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * inv_c[i % c] + bias[i % c])
            .collect();
        Ok(Tensor::new(y.shape().to_vec(), data))
    }
}

pub(crate) fn add_channel_bias(t: &Tensor, bias: &[f64]) -> Tensor {
    let c = bias.len();
    Tensor::new(t.shape().to_vec(), t.data().iter().enumerate().map(|(i, &v)| v + bias[i % c]).collect())
}

impl Graph {
    /// Runs the graph and returns the value of every `Output` node.
    pub fn run(&self, feeds: &Values, opts: RunOptions) -> Result<Values, GraphError> {
        let all = self.run_observed(feeds, opts, &mut |_, _| {})?;
        Ok(self.output_nodes().map(|n| (n.output.clone(), all[&n.output].clone())).collect())
    }

    /// Runs the graph keeping every intermediate tensor. `observe` is called
    /// with each fake-quant node and the tensor it receives.
    pub fn run_observed(
        &self,
        feeds: &Values,
        opts: RunOptions,
        observe: &mut dyn FnMut(&Node, &Tensor),
    ) -> Result<Values, GraphError> {
        let mut values: Values = BTreeMap::new();
        for node in &self.nodes {
            let out = {
                let get = |i: usize| -> Result<&Tensor, GraphError> {
                    let t = &node.inputs[i];
                    values
                        .get(t)
                        .or_else(|| self.params.get(t))
                        .ok_or_else(|| GraphError::UnknownTensor { node: node.name.clone(), tensor: t.clone() })
                };
                let opt = |i: usize| -> Result<Option<&[f64]>, GraphError> {
                    match node.input(i) {
                        Some(_) => Ok(Some(get(i)?.data())),
                        None => Ok(None),
                    }
                };
                match &node.op {
                    Op::Input { shape } => {
                        let t = feeds.get(&node.output).ok_or_else(|| GraphError::MissingInput(node.output.clone()))?;
                        if t.shape()[1..] != shape[1..] {
                            return Err(GraphError::ShapeMismatch {
                                node: node.name.clone(),
                                detail: format!("feed {:?} for declared {:?}", t.shape(), shape),
                            });
                        }
                        t.clone()
                    }
                    Op::Conv2D { stride, padding } | Op::DepthwiseConv2D { stride, padding } => {
                        layer_forward(node.op.layer_kind().unwrap(), get(0)?, get(1)?, opt(2)?, *stride, *padding)
                    }
                    Op::FullyConnected => ops::fully_connected(get(0)?, get(1)?, opt(2)?),
                    Op::Add => ops::add(get(0)?, get(1)?),
                    Op::Concat { axis } => {
                        let ins = (0..node.inputs.len()).map(get).collect::<Result<Vec<_>, _>>()?;
                        ops::concat(&ins, *axis)
                    }
                    Op::Relu => ops::relu(get(0)?),
                    Op::Relu6 => ops::relu6(get(0)?),
                    Op::AvgPool { kernel, stride } => ops::avg_pool(get(0)?, *kernel, *stride),
                    Op::BatchNorm { epsilon, .. } => {
                        let x = get(0)?;
                        let (gamma, beta) = (get(1)?.data(), get(2)?.data());
                        match opts.bn {
                            BnMode::Inference => {
                                let std = bn_std(get(4)?.data(), *epsilon);
                                batch_norm(x, gamma, beta, get(3)?.data(), &std)
                            }
                            BnMode::Training => {
                                let (m, v) = ops::channel_moments(x);
                                batch_norm(x, gamma, beta, &m, &bn_std(&v, *epsilon))
                            }
                        }
                    }
                    Op::FakeQuant(attrs) => {
                        let x = get(0)?;
                        observe(node, x);
                        match opts.fake_quant {
                            FakeQuantMode::Bypass => x.clone(),
                            FakeQuantMode::Apply => fake_quant(node, attrs, x)?,
                        }
                    }
                    Op::ConvBnTrain(a) => conv_bn_train_forward(
                        a,
                        get(0)?,
                        get(1)?,
                        opt(2)?,
                        [get(3)?.data(), get(4)?.data(), get(5)?.data(), get(6)?.data()],
                        opts,
                    )?,
                    Op::Output => get(0)?.clone(),
                }
            };
            values.insert(node.output.clone(), out);
        }
        Ok(values)
    }
}
