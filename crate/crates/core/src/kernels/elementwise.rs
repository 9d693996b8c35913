use super::{requantize, FusedActivation, KernelError, RequantSpec};
use crate::ops::{ConvGeom, Padding};
use crate::quant::{quantize, QuantParams};
use crate::tensor::QTensor;

/// Left shift applied to both addends before they are brought to a common scale.
pub const ADD_LEFT_SHIFT: u32 = 20;

fn same_grid(a: &QuantParams, b: &QuantParams) -> bool {
    a.scale == b.scale && a.zero_point == b.zero_point && a.code_range() == b.code_range()
}

/// Re-expresses codes of `qp_x` on the grid of `qp_y`, then applies `act`.
pub fn rescale(x: &QTensor, qp_x: &QuantParams, qp_y: &QuantParams, act: FusedActivation) -> QTensor {
    let range = act.clamp_range(qp_y);
    if same_grid(qp_x, qp_y) {
        let data = x.data().iter().map(|&c| c.clamp(range.0, range.1)).collect();
        return QTensor::new(x.shape().to_vec(), data);
    }
    let rs = RequantSpec::from_multiplier(qp_x.scale / qp_y.scale);
    let data = x.data().iter().map(|&c| requantize(c - qp_x.zero_point, &rs, qp_y.zero_point, range)).collect();
    QTensor::new(x.shape().to_vec(), data)
}

/// Element-wise add of two quantized tensors.
///
/// Both inputs are shifted left by [`ADD_LEFT_SHIFT`] bits, scaled to half
/// the larger input scale, summed in `i32` and requantized to `qp_y`.
pub fn qadd(
    a: &QTensor,
    qp_a: &QuantParams,
    b: &QTensor,
    qp_b: &QuantParams,
    qp_y: &QuantParams,
    act: FusedActivation,
) -> Result<QTensor, KernelError> {
    if a.shape() != b.shape() {
        return Err(KernelError::ShapeMismatch(format!("add of {:?} and {:?}", a.shape(), b.shape())));
    }
    if qp_a.n_bits > 8 || qp_b.n_bits > 8 {
        return Err(KernelError::Unsupported("integer add supports inputs of at most 8 bits".into()));
    }
    let twice_max = 2.0 * qp_a.scale.max(qp_b.scale);
    let ra = RequantSpec::from_multiplier(qp_a.scale / twice_max);
    let rb = RequantSpec::from_multiplier(qp_b.scale / twice_max);
    let ro = RequantSpec::from_multiplier(twice_max / ((1u64 << ADD_LEFT_SHIFT) as f64 * qp_y.scale));
    let range = act.clamp_range(qp_y);
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let xa = ra.apply((x - qp_a.zero_point) << ADD_LEFT_SHIFT) as i32;
            let yb = rb.apply((y - qp_b.zero_point) << ADD_LEFT_SHIFT) as i32;
            requantize(xa + yb, &ro, qp_y.zero_point, range)
        })
        .collect();
    Ok(QTensor::new(a.shape().to_vec(), data))
}

/// Concatenation: each input is rescaled to `qp_y`, then the codes are joined.
pub fn qconcat(
    inputs: &[(&QTensor, QuantParams)],
    axis: usize,
    qp_y: &QuantParams,
    act: FusedActivation,
) -> Result<QTensor, KernelError> {
    let (first, _) = inputs.first().ok_or(KernelError::EmptyInput)?;
    let rank = first.rank();
    if axis >= rank {
        return Err(KernelError::ShapeMismatch(format!("axis {axis} for rank {rank}")));
    }
    for (t, _) in inputs {
        let ok = t.rank() == rank
            && t.shape().iter().zip(first.shape()).enumerate().all(|(d, (a, b))| d == axis || a == b);
        if !ok {
            return Err(KernelError::ShapeMismatch(format!("concat of {:?} and {:?}", first.shape(), t.shape())));
        }
    }
    let rescaled: Vec<QTensor> = inputs.iter().map(|(t, qp)| rescale(t, qp, qp_y, act)).collect();
    let outer: usize = first.shape()[..axis].iter().product();
    let mut shape = first.shape().to_vec();
    shape[axis] = rescaled.iter().map(|t| t.shape()[axis]).sum();
    let mut data = Vec::with_capacity(rescaled.iter().map(QTensor::len).sum());
    for o in 0..outer {
        for t in &rescaled {
            let inner: usize = t.shape()[axis..].iter().product();
            data.extend_from_slice(&t.data()[o * inner..(o + 1) * inner]);
        }
    }
    Ok(QTensor::new(shape, data))
}

/// Clamps codes to `[z, hi]`.
pub fn qrelu(x: &QTensor, qp: &QuantParams) -> QTensor {
    rescale(x, qp, qp, FusedActivation::Relu)
}

/// Clamps codes to `[z, quantize(6.0)]`.
pub fn qrelu6(x: &QTensor, qp: &QuantParams) -> QTensor {
    let (lo, hi) = FusedActivation::Relu6.clamp_range(qp);
    debug_assert_eq!(hi, quantize(6.0, qp).min(qp.code_range().1));
    QTensor::new(x.shape().to_vec(), x.data().iter().map(|&c| c.clamp(lo, hi)).collect())
}

/// Average pool over VALID windows, requantized to `qp_y`.
pub fn qavg_pool(
    x: &QTensor,
    qp_x: &QuantParams,
    qp_y: &QuantParams,
    kernel: usize,
    stride: usize,
) -> Result<QTensor, KernelError> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(KernelError::ShapeMismatch(format!("avg pool input {s:?}")));
    }
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    let g = ConvGeom::new(n, h, w, kernel, kernel, stride, Padding::Valid)
        .ok_or_else(|| KernelError::ShapeMismatch(format!("pool window {kernel} on {s:?}")))?;
    let rs = RequantSpec::from_multiplier(qp_x.scale / ((kernel * kernel) as f64 * qp_y.scale));
    let range = qp_y.code_range();
    let mut out = Vec::with_capacity(n * g.out_h * g.out_w * c);
    let mut acc = vec![0i32; c];
    for b in 0..n {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                acc.iter_mut().for_each(|a| *a = 0);
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let base = ((b * h + oy * stride + ky) * w + ox * stride + kx) * c;
                        for (a, &v) in acc.iter_mut().zip(&x.data()[base..base + c]) {
                            *a += v - qp_x.zero_point;
                        }
                    }
                }
                out.extend(acc.iter().map(|&a| requantize(a, &rs, qp_y.zero_point, range)));
            }
        }
    }
    Ok(QTensor::new(vec![n, g.out_h, g.out_w, c], out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{affine_params, dequantize_unchecked, RangeSpec};

    fn qp(lo: f64, hi: f64) -> QuantParams {
        affine_params(RangeSpec::new(lo, hi), 8).unwrap()
    }

    #[test]
    fn add_of_zeros_is_output_zero_point() {
        let (qa, qb, qy) = (qp(-1.0, 1.0), qp(0.0, 3.0), qp(-2.0, 5.0));
        let a = QTensor::filled(vec![4], qa.zero_point);
        let b = QTensor::filled(vec![4], qb.zero_point);
        let y = qadd(&a, &qa, &b, &qb, &qy, FusedActivation::None).unwrap();
        assert!(y.data().iter().all(|&c| c == qy.zero_point));
    }

    #[test]
    fn add_with_zero_operand_keeps_codes() {
        let q = qp(-1.0, 1.0);
        let a = QTensor::new(vec![256], (0..256).collect());
        let b = QTensor::filled(vec![256], q.zero_point);
        let y = qadd(&a, &q, &b, &q, &q, FusedActivation::None).unwrap();
        for (x, y) in a.data().iter().zip(y.data()) {
            assert!((x - y).abs() <= 1, "{x} -> {y}");
        }
    }

    #[test]
    fn add_shape_mismatch() {
        let q = qp(-1.0, 1.0);
        let err = qadd(&QTensor::zeros(vec![2]), &q, &QTensor::zeros(vec![3]), &q, &q, FusedActivation::None);
        assert!(matches!(err, Err(KernelError::ShapeMismatch(_))));
    }

    #[test]
    fn concat_same_params_is_memcpy() {
        let q = qp(0.0, 6.0);
        let a = QTensor::new(vec![1, 2, 1], vec![1, 2]);
        let b = QTensor::new(vec![1, 2, 2], vec![3, 4, 5, 6]);
        let y = qconcat(&[(&a, q), (&b, q)], 2, &q, FusedActivation::None).unwrap();
        assert_eq!(y.data(), &[1, 3, 4, 2, 5, 6]);
        assert!(matches!(qconcat(&[], 0, &q, FusedActivation::None), Err(KernelError::EmptyInput)));
    }

    #[test]
    fn concat_rescales_within_one_code() {
        let (q1, q2) = (qp(0.0, 3.0), qp(0.0, 6.0));
        let a = QTensor::new(vec![256], (0..256).collect());
        let y = qconcat(&[(&a, q1), (&a, q2)], 0, &q2, FusedActivation::None).unwrap();
        for (i, &c) in y.data().iter().enumerate() {
            let src = if i < 256 { &q1 } else { &q2 };
            let exact = dequantize_unchecked(a.data()[i % 256], src) / q2.scale;
            assert!((c as f64 - exact).abs() <= 1.0, "{i}");
        }
    }

    #[test]
    fn relu_variants() {
        let q = qp(-2.0, 8.0);
        let x = QTensor::new(vec![256], (0..256).collect());
        let r = qrelu(&x, &q);
        for (a, b) in x.data().iter().zip(r.data()) {
            let want = dequantize_unchecked(*a, &q).max(0.0);
            assert_eq!(dequantize_unchecked(*b, &q), want);
        }
        let r6 = qrelu6(&x, &q);
        assert_eq!(*r6.data().iter().max().unwrap(), quantize(6.0, &q));
        let q6 = qp(0.0, 6.0);
        assert_eq!(qrelu6(&x, &q6), x);
    }

    #[test]
    fn avg_pool_mean_of_codes() {
        let q = qp(0.0, 4.0);
        let x = QTensor::new(vec![1, 2, 2, 1], vec![10, 20, 30, 41]);
        let y = qavg_pool(&x, &q, &q, 2, 2).unwrap();
        assert_eq!(y.data(), &[25]); // 101 / 4 = 25.25
    }
}
