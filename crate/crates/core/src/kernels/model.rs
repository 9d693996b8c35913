use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{qadd, qavg_pool, qconcat, qconv2d, rescale, FusedActivation, KernelError, QConvPlan};
use crate::quant::{dequantize_with, quantize_with, QuantParams};
use crate::tensor::{QTensor, Tensor};

/// One step of an integer-only program. Tensors are referenced by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IntOp {
    Layer {
        name: String,
        input: String,
        output: String,
        plan: QConvPlan,
    },
    Add {
        name: String,
        inputs: [String; 2],
        output: String,
        qp_y: QuantParams,
        activation: FusedActivation,
    },
    Concat {
        name: String,
        inputs: Vec<String>,
        output: String,
        axis: usize,
        qp_y: QuantParams,
        activation: FusedActivation,
    },
    /// Stand-alone ReLU / ReLU6 that could not be fused into its producer.
    Activation {
        name: String,
        input: String,
        output: String,
        activation: FusedActivation,
        qp_y: QuantParams,
    },
    AvgPool {
        name: String,
        input: String,
        output: String,
        kernel: usize,
        stride: usize,
        qp_y: QuantParams,
    },
}

impl IntOp {
    pub fn name(&self) -> &str {
        match self {
            IntOp::Layer { name, .. }
            | IntOp::Add { name, .. }
            | IntOp::Concat { name, .. }
            | IntOp::Activation { name, .. }
            | IntOp::AvgPool { name, .. } => name,
        }
    }

    pub fn output(&self) -> &str {
        match self {
            IntOp::Layer { output, .. }
            | IntOp::Add { output, .. }
            | IntOp::Concat { output, .. }
            | IntOp::Activation { output, .. }
            | IntOp::AvgPool { output, .. } => output,
        }
    }

    pub fn inputs(&self) -> Vec<&str> {
        match self {
            IntOp::Layer { input, .. } | IntOp::Activation { input, .. } | IntOp::AvgPool { input, .. } => {
                vec![input.as_str()]
            }
            IntOp::Add { inputs, .. } => inputs.iter().map(String::as_str).collect(),
            IntOp::Concat { inputs, .. } => inputs.iter().map(String::as_str).collect(),
        }
    }
}

/// Quantized codes of a tensor together with the grid they live on.
pub type CodeValues = BTreeMap<String, (QTensor, QuantParams)>;

/// A fully integer model: float in, one quantize step, integer ops, dequantize out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntModel {
    pub input: String,
    /// Input shape with the batch dimension; only the trailing dims are enforced.
    pub input_shape: Vec<usize>,
    pub input_qp: QuantParams,
    pub ops: Vec<IntOp>,
    pub outputs: Vec<String>,
}

impl IntModel {
    pub fn quantize_input(&self, x: &Tensor) -> Result<QTensor, KernelError> {
        if x.shape().len() != self.input_shape.len() || x.shape()[1..] != self.input_shape[1..] {
            return Err(KernelError::ShapeMismatch(format!(
                "input {:?}, model expects {:?}",
                x.shape(),
                self.input_shape
            )));
        }
        Ok(quantize_with(x, &[self.input_qp]))
    }

    /// Runs on input codes and returns every intermediate tensor.
    pub fn run_codes(&self, x: QTensor) -> Result<CodeValues, KernelError> {
        Ok(self.run_codes_profiled(x)?.0)
    }

    /// Like [`IntModel::run_codes`], also returning the wall time of each op.
    pub fn run_codes_profiled(&self, x: QTensor) -> Result<(CodeValues, Vec<Duration>), KernelError> {
        let mut times = Vec::with_capacity(self.ops.len());
        let mut vals: CodeValues = BTreeMap::new();
        vals.insert(self.input.clone(), (x, self.input_qp));
        for op in &self.ops {
            let start = Instant::now();
            let get = |n: &str| {
                vals.get(n)
                    .ok_or_else(|| KernelError::ShapeMismatch(format!("`{}` reads undefined tensor `{n}`", op.name())))
            };
            let out = match op {
                IntOp::Layer { input, plan, .. } => {
                    let (x, _) = get(input)?;
                    (qconv2d(plan, x)?, plan.qp_y)
                }
                IntOp::Add { inputs, qp_y, activation, .. } => {
                    let (a, qa) = get(&inputs[0])?;
                    let (b, qb) = get(&inputs[1])?;
                    (qadd(a, qa, b, qb, qp_y, *activation)?, *qp_y)
                }
                IntOp::Concat { inputs, axis, qp_y, activation, .. } => {
                    let parts = inputs
                        .iter()
                        .map(|n| get(n).map(|(t, q)| (t, *q)))
                        .collect::<Result<Vec<_>, _>>()?;
                    (qconcat(&parts, *axis, qp_y, *activation)?, *qp_y)
                }
                IntOp::Activation { input, activation, qp_y, .. } => {
                    let (x, q) = get(input)?;
                    (rescale(x, q, qp_y, *activation), *qp_y)
                }
                IntOp::AvgPool { input, kernel, stride, qp_y, .. } => {
                    let (x, q) = get(input)?;
                    (qavg_pool(x, q, qp_y, *kernel, *stride)?, *qp_y)
                }
            };
            times.push(start.elapsed());
            vals.insert(op.output().to_string(), out);
        }
        Ok((vals, times))
    }

    /// Float in, float out. Outputs are dequantized from their final codes.
    pub fn run(&self, x: &Tensor) -> Result<BTreeMap<String, Tensor>, KernelError> {
        let mut vals = self.run_codes(self.quantize_input(x)?)?;
        self.outputs
            .iter()
            .map(|name| {
                let (q, qp) = vals
                    .remove(name)
                    .ok_or_else(|| KernelError::ShapeMismatch(format!("output `{name}` is never produced")))?;
                Ok((name.clone(), dequantize_with(&q, &[qp])))
            })
            .collect()
    }

    /// Codes of the named outputs.
    pub fn run_output_codes(&self, x: &Tensor) -> Result<Vec<(QTensor, QuantParams)>, KernelError> {
        let mut vals = self.run_codes(self.quantize_input(x)?)?;
        self.outputs
            .iter()
            .map(|n| vals.remove(n).ok_or_else(|| KernelError::ShapeMismatch(format!("output `{n}` is never produced"))))
            .collect()
    }

    pub fn layer_plans(&self) -> impl Iterator<Item = (&str, &QConvPlan)> {
        self.ops.iter().filter_map(|op| match op {
            IntOp::Layer { name, plan, .. } => Some((name.as_str(), plan)),
            _ => None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::LayerKind;
    use crate::kernels::plan_qconv;
    use crate::ops::Padding;
    use crate::quant::{affine_params, RangeSpec};

    #[test]
    fn two_op_program() {
        let qx = affine_params(RangeSpec::new(-1.0, 1.0), 8).unwrap();
        let qw = affine_params(RangeSpec::new(-1.0, 1.0), 8).unwrap();
        let qy = affine_params(RangeSpec::new(-2.0, 2.0), 8).unwrap();
        let w = quantize_with(&Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]), &[qw]);
        let plan = plan_qconv("fc", LayerKind::FullyConnected, 1, Padding::Valid, w, &[qw], qx, qy, None, FusedActivation::Relu)
            .unwrap();
        let m = IntModel {
            input: "x".into(),
            input_shape: vec![1, 2],
            input_qp: qx,
            ops: vec![
                IntOp::Layer { name: "fc".into(), input: "x".into(), output: "y".into(), plan },
                IntOp::Add {
                    name: "add".into(),
                    inputs: ["y".into(), "y".into()],
                    output: "z".into(),
                    qp_y: qy,
                    activation: FusedActivation::None,
                },
            ],
            outputs: vec!["z".into()],
        };
        let out = m.run(&Tensor::new(vec![3, 2], vec![0.5, -0.5, 0.25, 0.75, -1.0, 0.0])).unwrap();
        let z = &out["z"];
        let want = [1.0, 0.0, 0.5, 1.5, 0.0, 0.0];
        for (a, b) in z.data().iter().zip(want) {
            assert!((a - b).abs() < 0.05, "{a} vs {b}");
        }
        assert!(m.run(&Tensor::zeros(vec![1, 3])).is_err());
    }
}
