//! Fixtures shared by the benchmarks.

use qtz_core::graph::LayerKind;
use qtz_core::kernels::{plan_qconv, FusedActivation, QConvPlan};
use qtz_core::ops::Padding;
use qtz_core::quant::{affine_params, quantize_with, tensor_params, RangeSpec};
use qtz_core::{Granularity, QTensor, Scheme, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(shape: Vec<usize>, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// A 3x3 conv plan over an `[n, h, w, cin]` input, with matching input codes.
pub fn conv_fixture(n: usize, hw: usize, cin: usize, cout: usize, scheme: Scheme) -> (QConvPlan, QTensor) {
    let w = random_tensor(vec![3, 3, cin, cout], 1);
    let qp_w = tensor_params(&w, Granularity::PerChannel { axis: 3 }, scheme, 8, false).unwrap();
    let qp_x = affine_params(RangeSpec::new(-1.0, 1.0), 8).unwrap();
    let qp_y = affine_params(RangeSpec::new(-8.0, 8.0), 8).unwrap();
    let x = random_tensor(vec![n, hw, hw, cin], 2);
    let plan = plan_qconv(
        "bench",
        LayerKind::Conv2D,
        1,
        Padding::Same,
        quantize_with(&w, &qp_w),
        &qp_w,
        qp_x,
        qp_y,
        None,
        FusedActivation::Relu,
    )
    .unwrap();
    (plan, quantize_with(&x, &[qp_x]))
}
