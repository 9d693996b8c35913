use serde::{Deserialize, Serialize};

use super::{requantize, KernelError, RequantSpec};
use crate::graph::LayerKind;
use crate::ops::{ConvGeom, Padding};
use crate::quant::{quantize, round_half_away, QuantParams};
use crate::tensor::QTensor;

/// Activation fused into a layer's requantization clamp.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusedActivation {
    #[default]
    None,
    Relu,
    Relu6,
}

impl FusedActivation {
    /// Output code interval after the activation.
    pub fn clamp_range(self, qp: &QuantParams) -> (i32, i32) {
        let (lo, hi) = qp.code_range();
        match self {
            FusedActivation::None => (lo, hi),
            FusedActivation::Relu => (qp.zero_point.max(lo), hi),
            FusedActivation::Relu6 => (qp.zero_point.max(lo), quantize(6.0, qp).min(hi)),
        }
    }
}

/// Everything an integer conv / depthwise / fully-connected layer needs,
/// with the weight-only terms of the zero-point expansion precomputed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QConvPlan {
    pub layer: LayerKind,
    pub stride: usize,
    pub padding: Padding,
    /// `[Kh, Kw, Cin, Cout]`, `[Kh, Kw, C, mult]` or `[Cin, Cout]` codes.
    #[serde(skip)]
    pub w_q: QTensor,
    pub qp_w: Vec<QuantParams>,
    pub qp_x: QuantParams,
    pub qp_y: QuantParams,
    /// Per output channel.
    pub z_w: Vec<i32>,
    pub z_x: i32,
    pub z_y: i32,
    /// Sum of each output channel's weight codes.
    #[serde(skip)]
    pub weight_col_sums: Vec<i32>,
    /// `round(bias / (scale_w[n] * scale_x))`.
    #[serde(skip)]
    pub bias_i32: Vec<i32>,
    /// `bias_i32 - z_x * col_sum + count * z_x * z_w`, added to every accumulator.
    #[serde(skip)]
    pub acc_offset: Vec<i32>,
    pub requant: Vec<RequantSpec>,
    pub activation: FusedActivation,
    pub out_range: (i32, i32),
    /// Products per output element.
    pub count: usize,
    /// Output-channel-major copy of the weight codes: `count` codes per channel.
    #[serde(skip)]
    w_by_channel: Vec<i32>,
}

fn out_channels(layer: LayerKind, shape: &[usize]) -> usize {
    match layer {
        LayerKind::DepthwiseConv2D => shape[2] * shape[3],
        _ => *shape.last().unwrap(),
    }
}

/// Builds a layer plan. `qp_w` has one entry (per layer) or one per output channel.
#[allow(clippy::too_many_arguments)]
pub fn plan_qconv(
    name: &str,
    layer: LayerKind,
    stride: usize,
    padding: Padding,
    w_q: QTensor,
    qp_w: &[QuantParams],
    qp_x: QuantParams,
    qp_y: QuantParams,
    bias_float: Option<&[f64]>,
    activation: FusedActivation,
) -> Result<QConvPlan, KernelError> {
    let cout = check_weight_shape(name, layer, w_q.shape())?;
    if qp_w.is_empty() {
        return Err(KernelError::ShapeMismatch(format!("{name}: no weight params")));
    }
    let bias_i32 = match bias_float {
        Some(b) if b.len() != cout => {
            return Err(KernelError::ShapeMismatch(format!("{name}: bias has {} entries, expected {cout}", b.len())))
        }
        Some(b) => {
            let mut out = Vec::with_capacity(cout);
            for (n, &v) in b.iter().enumerate() {
                let q = round_half_away(v / (qp_w[n % qp_w.len()].scale * qp_x.scale));
                if q.abs() > (i32::MAX / 2) as f64 {
                    return Err(KernelError::AccumulatorOverflow { layer: name.into(), bound: q as i64 });
                }
                out.push(q as i32);
            }
            out
        }
        None => vec![0; cout],
    };
    plan_qconv_int_bias(name, layer, stride, padding, w_q, qp_w, qp_x, qp_y, bias_i32, activation)
}

fn check_weight_shape(name: &str, layer: LayerKind, shape: &[usize]) -> Result<usize, KernelError> {
    let expected_rank = if layer == LayerKind::FullyConnected { 2 } else { 4 };
    if shape.len() != expected_rank {
        return Err(KernelError::ShapeMismatch(format!("{name}: weight shape {shape:?} for {layer:?}")));
    }
    Ok(out_channels(layer, shape))
}

/// Same as [`plan_qconv`] with the bias already on the `scale_w * scale_x` grid.
#[allow(clippy::too_many_arguments)]
pub fn plan_qconv_int_bias(
    name: &str,
    layer: LayerKind,
    stride: usize,
    padding: Padding,
    w_q: QTensor,
    qp_w: &[QuantParams],
    qp_x: QuantParams,
    qp_y: QuantParams,
    bias_i32: Vec<i32>,
    activation: FusedActivation,
) -> Result<QConvPlan, KernelError> {
    let shape = w_q.shape().to_vec();
    let cout = check_weight_shape(name, layer, &shape)?;
    if qp_w.len() != 1 && qp_w.len() != cout {
        return Err(KernelError::ShapeMismatch(format!("{name}: {} weight params for {cout} channels", qp_w.len())));
    }
    if bias_i32.len() != cout {
        return Err(KernelError::ShapeMismatch(format!("{name}: bias has {} entries, expected {cout}", bias_i32.len())));
    }
    let qp_w: Vec<QuantParams> = (0..cout).map(|n| qp_w[n % qp_w.len()]).collect();
    let count = match layer {
        LayerKind::Conv2D => shape[0] * shape[1] * shape[2],
        LayerKind::DepthwiseConv2D => shape[0] * shape[1],
        LayerKind::FullyConnected => shape[0],
    };
    // Output-channel-major weights.
    let mut w_by_channel = vec![0; cout * count];
    for (i, &c) in w_q.data().iter().enumerate() {
        // Output channel is the flattened innermost index in every layout.
        w_by_channel[(i % cout) * count + i / cout] = c;
    }
    let weight_col_sums: Vec<i32> = w_by_channel.chunks(count).map(|c| c.iter().sum()).collect();
    let z_x = qp_x.zero_point;
    let z_w: Vec<i32> = qp_w.iter().map(|q| q.zero_point).collect();
    let mut requant = Vec::with_capacity(cout);
    let mut acc_offset = Vec::with_capacity(cout);
    let (x_lo, x_hi) = qp_x.code_range();
    let x_abs = (x_lo as i64).abs().max((x_hi as i64).abs());
    for n in 0..cout {
        let m = qp_w[n].scale * qp_x.scale / qp_y.scale;
        if !(m > 0.0 && m < 1.0) {
            return Err(KernelError::MultiplierOutOfRange(m));
        }
        requant.push(RequantSpec::from_multiplier(m));
        let b = bias_i32[n] as i64;
        let offset = b - z_x as i64 * weight_col_sums[n] as i64 + count as i64 * z_x as i64 * z_w[n] as i64;
        // Worst case over all inputs of every partial sum the kernel forms.
        let w_abs: i64 = w_by_channel[n * count..(n + 1) * count].iter().map(|&c| (c as i64).abs()).sum();
        let bound = w_abs * x_abs + (z_w[n] as i64).abs() * count as i64 * x_abs + offset.abs();
        if bound > i32::MAX as i64 {
            return Err(KernelError::AccumulatorOverflow { layer: name.into(), bound });
        }
        acc_offset.push(offset as i32);
    }
    Ok(QConvPlan {
        layer,
        stride,
        padding,
        w_q,
        qp_w,
        qp_x,
        qp_y,
        z_y: qp_y.zero_point,
        z_w,
        z_x,
        weight_col_sums,
        bias_i32,
        acc_offset,
        requant,
        activation,
        out_range: activation.clamp_range(&qp_y),
        count,
        w_by_channel,
    })
}

impl QConvPlan {
    pub fn out_channels(&self) -> usize {
        self.z_w.len()
    }

    /// True when every weight zero-point is 0 and the activation-sum term vanishes.
    pub fn symmetric_weights(&self) -> bool {
        self.z_w.iter().all(|&z| z == 0)
    }

    /// Reference accumulator `sum((w - z_w) * (x - z_x)) + bias` for one
    /// output element, given the input window already padded with `z_x`.
    pub fn naive_accumulator(&self, window: &[i32], n: usize) -> i64 {
        let w = &self.w_by_channel[n * self.count..(n + 1) * self.count];
        w.iter()
            .zip(window)
            .map(|(&wq, &xq)| (wq as i64 - self.z_w[n] as i64) * (xq as i64 - self.z_x as i64))
            .sum::<i64>()
            + self.bias_i32[n] as i64
    }

    #[inline]
    fn accumulate(&self, window: &[i32], x_sum: i32, n: usize) -> i32 {
        let w = &self.w_by_channel[n * self.count..(n + 1) * self.count];
        let dot: i32 = w.iter().zip(window).map(|(&a, &b)| a * b).sum();
        dot - self.z_w[n] * x_sum + self.acc_offset[n]
    }

    #[inline]
    fn emit(&self, acc: i32, n: usize) -> i32 {
        requantize(acc, &self.requant[n], self.z_y, self.out_range)
    }

    /// Builds the `count`-long window of input codes feeding output position
    /// `(b, oy, ox)`, padding with `z_x` (for depthwise: channel `c` only).
    fn gather(&self, x: &QTensor, g: &ConvGeom, b: usize, oy: usize, ox: usize, c: Option<usize>, buf: &mut Vec<i32>) {
        buf.clear();
        let cin = x.shape()[3];
        let (kh, kw) = (g.kh, g.kw);
        for ky in 0..kh {
            for kx in 0..kw {
                match (g.input_at(oy, ox, ky, kx), c) {
                    (Some((iy, ix)), None) => {
                        let base = ((b * g.in_h + iy) * g.in_w + ix) * cin;
                        buf.extend_from_slice(&x.data()[base..base + cin]);
                    }
                    (Some((iy, ix)), Some(c)) => buf.push(x.data()[((b * g.in_h + iy) * g.in_w + ix) * cin + c]),
                    (None, None) => buf.extend(std::iter::repeat_n(self.z_x, cin)),
                    (None, Some(_)) => buf.push(self.z_x),
                }
            }
        }
    }
}

/// Integer conv / depthwise / fully-connected layer.
///
/// The activation sum of each window is computed once and shared by all
/// output channels; it is skipped entirely for symmetric weights.
pub fn qconv2d(plan: &QConvPlan, x: &QTensor) -> Result<QTensor, KernelError> {
    let sym = plan.symmetric_weights();
    let cout = plan.out_channels();
    let mut buf = Vec::with_capacity(plan.count);
    match plan.layer {
        LayerKind::FullyConnected => {
            let n = x.shape()[0];
            let feat = x.len() / n.max(1);
            if feat != plan.count {
                return Err(KernelError::ShapeMismatch(format!("fc expects {} features, got {feat}", plan.count)));
            }
            let mut out = Vec::with_capacity(n * cout);
            for row in x.data().chunks(feat) {
                let x_sum = if sym { 0 } else { row.iter().sum() };
                out.extend((0..cout).map(|c| plan.emit(plan.accumulate(row, x_sum, c), c)));
            }
            Ok(QTensor::new(vec![n, cout], out))
        }
        LayerKind::Conv2D | LayerKind::DepthwiseConv2D => {
            let s = x.shape();
            let wsh = plan.w_q.shape();
            if s.len() != 4 || s[3] != wsh[2] {
                return Err(KernelError::ShapeMismatch(format!("input {s:?} for weight {wsh:?}")));
            }
            let g = ConvGeom::new(s[0], s[1], s[2], wsh[0], wsh[1], plan.stride, plan.padding)
                .ok_or_else(|| KernelError::ShapeMismatch(format!("kernel does not fit input {s:?}")))?;
            let mut out = Vec::with_capacity(s[0] * g.out_h * g.out_w * cout);
            for b in 0..s[0] {
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        if plan.layer == LayerKind::Conv2D {
                            plan.gather(x, &g, b, oy, ox, None, &mut buf);
                            let x_sum = if sym { 0 } else { buf.iter().sum() };
                            out.extend((0..cout).map(|c| plan.emit(plan.accumulate(&buf, x_sum, c), c)));
                        } else {
                            let mult = wsh[3];
                            for c in 0..s[3] {
                                plan.gather(x, &g, b, oy, ox, Some(c), &mut buf);
                                let x_sum = if sym { 0 } else { buf.iter().sum() };
                                for m in 0..mult {
                                    let oc = c * mult + m;
                                    out.push(plan.emit(plan.accumulate(&buf, x_sum, oc), oc));
                                }
                            }
                        }
                    }
                }
            }
            Ok(QTensor::new(vec![s[0], g.out_h, g.out_w, cout], out))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{affine_params, symmetric_params, RangeSpec, Scheme};

    fn qp(scale: f64, z: i32) -> QuantParams {
        QuantParams::new(scale, z, 8, Scheme::Affine, false).unwrap()
    }

    #[test]
    fn one_by_one_constant_term() {
        let w = QTensor::new(vec![1, 1, 1, 1], vec![2]);
        let wq = QuantParams::new(0.1, 0, 8, Scheme::SymmetricSigned, false).unwrap();
        let plan = plan_qconv("c", LayerKind::Conv2D, 1, Padding::Valid, w, &[wq], qp(0.1, 3), qp(0.1, 0), None, FusedActivation::None)
            .unwrap();
        assert_eq!(plan.weight_col_sums, vec![2]);
        assert_eq!(plan.acc_offset, vec![-6]);
        assert!(plan.symmetric_weights());
        let y = qconv2d(&plan, &QTensor::new(vec![1, 1, 1, 1], vec![8])).unwrap();
        assert_eq!(y.data(), &[1]); // (8-3)*2*0.01/0.1 = 1.0
    }

    #[test]
    fn zero_weights_output_bias_only() {
        let w = QTensor::new(vec![3, 3, 2, 2], vec![0; 36]);
        let wq = QuantParams::new(0.01, 0, 8, Scheme::SymmetricSigned, false).unwrap();
        let qx = qp(0.05, 10);
        let qy = affine_params(RangeSpec::new(-2.0, 2.0), 8).unwrap();
        let plan = plan_qconv("c", LayerKind::Conv2D, 1, Padding::Same, w, &[wq], qx, qy, Some(&[0.5, -1.0]), FusedActivation::None)
            .unwrap();
        assert_eq!(plan.weight_col_sums, vec![0, 0]);
        let x = QTensor::new(vec![1, 3, 3, 2], (0..18).collect());
        let y = qconv2d(&plan, &x).unwrap();
        for px in y.data().chunks(2) {
            assert_eq!(px, &[quantize(0.5, &qy), quantize(-1.0, &qy)]);
        }
    }

    #[test]
    fn multiplier_out_of_range_rejected() {
        let w = QTensor::new(vec![1, 1], vec![1]);
        let wq = symmetric_params(1.0, 8, Scheme::SymmetricSigned, false).unwrap();
        let err = plan_qconv("fc", LayerKind::FullyConnected, 1, Padding::Valid, w, &[wq], qp(1.0, 0), qp(0.001, 0), None, FusedActivation::None);
        assert!(matches!(err, Err(KernelError::MultiplierOutOfRange(_))));
    }

    #[test]
    fn overflow_bound_enforced() {
        // 7x7x1024 affine-uint8 weights at 255 cannot fit an i32 accumulator.
        let w = QTensor::new(vec![7, 7, 1024, 1], vec![255; 7 * 7 * 1024]);
        let err = plan_qconv("big", LayerKind::Conv2D, 1, Padding::Same, w, &[qp(0.001, 0)], qp(0.01, 0), qp(1.0, 0), None, FusedActivation::None);
        assert!(matches!(err, Err(KernelError::AccumulatorOverflow { .. })));
        // Symmetric narrow-range weights fit the same geometry.
        let w = QTensor::new(vec![7, 7, 1024, 1], vec![-127; 7 * 7 * 1024]);
        let wq = QuantParams::new(0.001, 0, 8, Scheme::SymmetricSigned, true).unwrap();
        assert!(plan_qconv("big", LayerKind::Conv2D, 1, Padding::Same, w, &[wq], qp(0.01, 0), qp(1.0, 0), None, FusedActivation::None).is_ok());
    }

    #[test]
    fn fused_relu6_clamp() {
        let q = qp(6.0 / 255.0, 0);
        assert_eq!(FusedActivation::Relu6.clamp_range(&q), (0, 255));
        let q = qp(8.0 / 255.0, 32);
        assert_eq!(FusedActivation::Relu.clamp_range(&q), (32, 255));
        assert_eq!(FusedActivation::Relu6.clamp_range(&q), (32, 32 + 191));
    }
}
