//! Uniform quantizers: parameter derivation, quantize/dequantize, stochastic
//! quantization, simulated quantization and its straight-through gradient.
//!
//! Every rounding step in the crate goes through [`round_half_away`], so the
//! float-side simulation and the integer kernels agree bit for bit.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{QTensor, Tensor};

/// Half-width used to widen an all-constant range so that the scale stays positive.
pub const DEGENERATE_WIDEN: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantError {
    #[error("degenerate range [{lo}, {hi}]: scale would not be positive")]
    DegenerateRange { lo: f64, hi: f64 },
    #[error("code {code} outside [{lo}, {hi}]")]
    CodeOutOfRange { code: i32, lo: i32, hi: i32 },
    #[error("unsupported bit depth {0} (expected 4, 8 or 16)")]
    UnsupportedBits(u8),
    #[error("invalid quantizer parameters: {0}")]
    InvalidParams(String),
    #[error("per-channel axis {axis} is not the output-channel axis of a rank-{rank} tensor")]
    InvalidAxis { axis: usize, rank: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[default]
    Affine,
    SymmetricSigned,
    SymmetricUnsigned,
}

impl Scheme {
    pub fn is_symmetric(self) -> bool {
        !matches!(self, Scheme::Affine)
    }
}

impl std::str::FromStr for Scheme {
    type Err = QuantError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "affine" | "asymmetric" => Ok(Scheme::Affine),
            "symmetric" | "symmetric_signed" => Ok(Scheme::SymmetricSigned),
            "symmetric_unsigned" => Ok(Scheme::SymmetricUnsigned),
            other => Err(QuantError::InvalidParams(format!("unknown scheme `{other}`"))),
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scheme::Affine => "affine",
            Scheme::SymmetricSigned => "symmetric_signed",
            Scheme::SymmetricUnsigned => "symmetric_unsigned",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerLayer,
    /// One quantizer per slice along `axis`, which must be the innermost
    /// (output channel) axis.
    PerChannel { axis: usize },
}

impl Granularity {
    /// Per-channel granularity over the innermost axis of a rank-`rank` tensor.
    pub fn per_channel_for_rank(rank: usize) -> Self {
        Granularity::PerChannel { axis: rank.saturating_sub(1) }
    }
}

/// Scale, zero-point and code range of one quantizer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f64,
    pub zero_point: i32,
    pub n_bits: u8,
    pub scheme: Scheme,
    pub narrow_range: bool,
}

/// Closed float interval a quantizer covers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeSpec {
    pub x_min: f64,
    pub x_max: f64,
}

impl RangeSpec {
    pub fn new(x_min: f64, x_max: f64) -> Self {
        debug_assert!(x_min <= x_max, "inverted range ({x_min}, {x_max})");
        Self { x_min, x_max }
    }

    pub fn contains(&self, x: f64) -> bool {
        self.x_min <= x && x <= self.x_max
    }

    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.x_min, self.x_max)
    }
}

/// Round to nearest, ties away from zero.
#[inline]
pub fn round_half_away(x: f64) -> f64 {
    x.round()
}

pub fn n_levels(n_bits: u8) -> i64 {
    1i64 << n_bits
}

fn check_bits(n_bits: u8) -> Result<(), QuantError> {
    match n_bits {
        4 | 8 | 16 => Ok(()),
        b => Err(QuantError::UnsupportedBits(b)),
    }
}

/// Inclusive code range `(lo, hi)` of a scheme.
pub fn code_range(scheme: Scheme, n_bits: u8, narrow_range: bool) -> (i32, i32) {
    let n = n_levels(n_bits);
    let (lo, hi) = match (scheme, narrow_range) {
        (Scheme::Affine, _) => (0, n - 1),
        (Scheme::SymmetricSigned, false) => (-n / 2, n / 2 - 1),
        (Scheme::SymmetricSigned, true) => (-(n / 2 - 1), n / 2 - 1),
        (Scheme::SymmetricUnsigned, false) => (0, n - 1),
        (Scheme::SymmetricUnsigned, true) => (0, n - 2),
    };
    (lo as i32, hi as i32)
}

impl QuantParams {
    /// Validating constructor.
    pub fn new(
        scale: f64,
        zero_point: i32,
        n_bits: u8,
        scheme: Scheme,
        narrow_range: bool,
    ) -> Result<Self, QuantError> {
        check_bits(n_bits)?;
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(QuantError::InvalidParams(format!("scale must be positive, got {scale}")));
        }
        if scheme == Scheme::Affine && narrow_range {
            return Err(QuantError::InvalidParams("narrow range applies to symmetric schemes only".into()));
        }
        let (lo, hi) = code_range(scheme, n_bits, narrow_range);
        match scheme {
            Scheme::Affine if !(lo..=hi).contains(&zero_point) => {
                return Err(QuantError::InvalidParams(format!(
                    "zero-point {zero_point} outside [{lo}, {hi}]"
                )))
            }
            Scheme::SymmetricSigned | Scheme::SymmetricUnsigned if zero_point != 0 => {
                return Err(QuantError::InvalidParams("symmetric zero-point must be 0".into()))
            }
            _ => {}
        }
        Ok(Self { scale, zero_point, n_bits, scheme, narrow_range })
    }

    pub fn code_range(&self) -> (i32, i32) {
        code_range(self.scheme, self.n_bits, self.narrow_range)
    }

    /// Float interval spanned by the representable codes.
    pub fn representable_range(&self) -> RangeSpec {
        let (lo, hi) = self.code_range();
        RangeSpec::new(dequantize_unchecked(lo, self), dequantize_unchecked(hi, self))
    }
}

/// Widens a range so that it contains zero.
pub fn relax_range(r: RangeSpec) -> RangeSpec {
    RangeSpec { x_min: r.x_min.min(0.0), x_max: r.x_max.max(0.0) }
}

/// Relaxes to include zero, then widens a zero-width result by [`DEGENERATE_WIDEN`].
pub fn relax_and_widen(r: RangeSpec) -> RangeSpec {
    let r = relax_range(r);
    if r.x_max > r.x_min {
        r
    } else {
        RangeSpec { x_min: r.x_min - DEGENERATE_WIDEN, x_max: r.x_max + DEGENERATE_WIDEN }
    }
}

/// Affine parameters: `scale = (max - min) / (N - 1)`, zero-point the rounded
/// code of `0.0`. Expects an already relaxed range.
pub fn affine_params(r: RangeSpec, n_bits: u8) -> Result<QuantParams, QuantError> {
    check_bits(n_bits)?;
    if !(r.x_max > r.x_min) {
        return Err(QuantError::DegenerateRange { lo: r.x_min, hi: r.x_max });
    }
    let top = (n_levels(n_bits) - 1) as f64;
    let width = r.x_max - r.x_min;
    let scale = width / top;
    // Computed from the ratio directly so (-1, 1) lands on 127.5 exactly.
    let z = round_half_away(-r.x_min * top / width).clamp(0.0, top) as i32;
    QuantParams::new(scale, z, n_bits, Scheme::Affine, false)
}

/// Symmetric parameters: zero-point 0, `scale = max_abs / largest positive code`.
pub fn symmetric_params(
    max_abs: f64,
    n_bits: u8,
    scheme: Scheme,
    narrow_range: bool,
) -> Result<QuantParams, QuantError> {
    check_bits(n_bits)?;
    if scheme == Scheme::Affine {
        return Err(QuantError::InvalidParams("symmetric_params called with affine scheme".into()));
    }
    if !(max_abs > 0.0) {
        return Err(QuantError::DegenerateRange { lo: -max_abs, hi: max_abs });
    }
    let (_, hi) = code_range(scheme, n_bits, narrow_range);
    QuantParams::new(max_abs / hi as f64, 0, n_bits, scheme, narrow_range)
}

/// Derives parameters of `scheme` from an observed min/max, widening
/// degenerate ranges.
pub fn params_from_range(
    r: RangeSpec,
    n_bits: u8,
    scheme: Scheme,
    narrow_range: bool,
) -> Result<QuantParams, QuantError> {
    match scheme {
        Scheme::Affine => affine_params(relax_and_widen(r), n_bits),
        Scheme::SymmetricSigned => {
            let m = r.x_min.abs().max(r.x_max.abs());
            symmetric_params(if m > 0.0 { m } else { DEGENERATE_WIDEN }, n_bits, scheme, narrow_range)
        }
        Scheme::SymmetricUnsigned => {
            // Negative values saturate at code 0.
            let m = r.x_max.max(0.0);
            symmetric_params(if m > 0.0 { m } else { DEGENERATE_WIDEN }, n_bits, scheme, narrow_range)
        }
    }
}

#[inline]
pub fn quantize(x: f64, qp: &QuantParams) -> i32 {
    let (lo, hi) = qp.code_range();
    let v = round_half_away(x / qp.scale) + qp.zero_point as f64;
    v.clamp(lo as f64, hi as f64) as i32
}

pub fn dequantize(code: i32, qp: &QuantParams) -> Result<f64, QuantError> {
    let (lo, hi) = qp.code_range();
    if !(lo..=hi).contains(&code) {
        return Err(QuantError::CodeOutOfRange { code, lo, hi });
    }
    Ok(dequantize_unchecked(code, qp))
}

#[inline]
pub fn dequantize_unchecked(code: i32, qp: &QuantParams) -> f64 {
    (code - qp.zero_point) as f64 * qp.scale
}

/// Stochastic quantizer with the noise added to `x` in value units:
/// `round((x + eps) / scale) + z`, `eps ~ U(-1/2, 1/2)`.
///
/// Only when `scale == 1` does this coincide with a one-code dither; see
/// [`quantize_dithered`] for the code-unit form.
pub fn quantize_stochastic<R: Rng + ?Sized>(x: f64, qp: &QuantParams, rng: &mut R) -> i32 {
    let eps: f64 = rng.random_range(-0.5..0.5);
    quantize_with_value_noise(x, eps, qp)
}

pub fn quantize_with_value_noise(x: f64, eps: f64, qp: &QuantParams) -> i32 {
    let (lo, hi) = qp.code_range();
    let v = round_half_away((x + eps) / qp.scale) + qp.zero_point as f64;
    v.clamp(lo as f64, hi as f64) as i32
}

/// Stochastic quantizer with noise of one code width:
/// `round(x / scale + u) + z`, `u ~ U(-1/2, 1/2)`. Unbiased inside the
/// representable range and saturating outside it.
pub fn quantize_dithered<R: Rng + ?Sized>(x: f64, qp: &QuantParams, rng: &mut R) -> i32 {
    let u: f64 = rng.random_range(-0.5..0.5);
    let (lo, hi) = qp.code_range();
    let v = round_half_away(x / qp.scale + u) + qp.zero_point as f64;
    v.clamp(lo as f64, hi as f64) as i32
}

/// Quantize followed by dequantize.
#[inline]
pub fn sim_quant(x: f64, qp: &QuantParams) -> f64 {
    dequantize_unchecked(quantize(x, qp), qp)
}

/// Straight-through gradient: passes `upstream_grad` inside `r`, zero outside.
#[inline]
pub fn sim_quant_backward(x: f64, r: &RangeSpec, upstream_grad: f64) -> f64 {
    if r.contains(x) {
        upstream_grad
    } else {
        0.0
    }
}

/// Number of independent quantizers and the slice each element belongs to.
fn channel_count(shape: &[usize], granularity: Granularity) -> Result<usize, QuantError> {
    match granularity {
        Granularity::PerLayer => Ok(1),
        Granularity::PerChannel { axis } => {
            let rank = shape.len();
            if rank == 0 || axis + 1 != rank {
                return Err(QuantError::InvalidAxis { axis, rank });
            }
            Ok(shape[axis])
        }
    }
}

/// Derives one parameter set per slice from the slice's own min/max.
pub fn tensor_params(
    t: &Tensor,
    granularity: Granularity,
    scheme: Scheme,
    n_bits: u8,
    narrow_range: bool,
) -> Result<Vec<QuantParams>, QuantError> {
    let ch = channel_count(t.shape(), granularity)?;
    let ranges: Vec<(f64, f64)> = if ch == 1 {
        vec![t.min_max()]
    } else {
        t.channel_min_max()
    };
    ranges
        .into_iter()
        .map(|(lo, hi)| {
            let (lo, hi) = if lo > hi { (0.0, 0.0) } else { (lo, hi) };
            params_from_range(RangeSpec::new(lo, hi), n_bits, scheme, narrow_range)
        })
        .collect()
}

/// Quantizes a tensor per layer or per output channel.
pub fn quantize_tensor(
    t: &Tensor,
    granularity: Granularity,
    scheme: Scheme,
    n_bits: u8,
) -> Result<(QTensor, Vec<QuantParams>), QuantError> {
    let params = tensor_params(t, granularity, scheme, n_bits, false)?;
    Ok((quantize_with(t, &params), params))
}

/// Applies per-slice params (`params.len()` is 1 or the channel count).
pub fn quantize_with(t: &Tensor, params: &[QuantParams]) -> QTensor {
    let n = params.len();
    let data = t.data().iter().enumerate().map(|(i, &x)| quantize(x, &params[i % n])).collect();
    QTensor::new(t.shape().to_vec(), data)
}

pub fn dequantize_with(q: &QTensor, params: &[QuantParams]) -> Tensor {
    let n = params.len();
    let data = q
        .data()
        .iter()
        .enumerate()
        .map(|(i, &c)| dequantize_unchecked(c, &params[i % n]))
        .collect();
    Tensor::new(q.shape().to_vec(), data)
}

pub fn sim_quant_with(t: &Tensor, params: &[QuantParams]) -> Tensor {
    let n = params.len();
    let data = t.data().iter().enumerate().map(|(i, &x)| sim_quant(x, &params[i % n])).collect();
    Tensor::new(t.shape().to_vec(), data)
}

/// Simulated quantization of a whole tensor with params derived from the tensor itself.
pub fn sim_quant_tensor(
    t: &Tensor,
    granularity: Granularity,
    scheme: Scheme,
    n_bits: u8,
    narrow_range: bool,
) -> Result<(Tensor, Vec<QuantParams>), QuantError> {
    let params = tensor_params(t, granularity, scheme, n_bits, narrow_range)?;
    Ok((sim_quant_with(t, &params), params))
}
