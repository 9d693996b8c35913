//! Integer-only inference kernels.
//!
//! Layers use the zero-point decomposition
//! `acc = sum(w*x) - z_w*sum(x) - z_x*sum(w) + count*z_x*z_w + bias`
//! with every constant term precomputed in a [`QConvPlan`]. Accumulators are
//! `i32`; requantization multiplies by a normalized `i32` mantissa in 64-bit
//! and shifts right with round-half-away-from-zero.

mod conv;
mod elementwise;
mod model;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use conv::{plan_qconv, plan_qconv_int_bias, qconv2d, FusedActivation, QConvPlan};
pub use elementwise::{qadd, qavg_pool, qconcat, qrelu, qrelu6, rescale, ADD_LEFT_SHIFT};
pub use model::{CodeValues, IntModel, IntOp};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("requantization multiplier {0} is not in (0, 1); calibration ranges are inconsistent")]
    MultiplierOutOfRange(f64),
    #[error("worst-case accumulator magnitude {bound} exceeds i32 for `{layer}`")]
    AccumulatorOverflow { layer: String, bound: i64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("{0}")]
    Unsupported(String),
    #[error("empty input list")]
    EmptyInput,
}

/// Fixed-point multiplier `M ~= m0 / 2^31 * 2^-shift`.
///
/// `m0` lies in `[2^30, 2^31)`. A negative `shift` encodes `M >= 1`, which
/// only the rescaling kernels use; layer plans require `shift >= 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequantSpec {
    pub m0: i32,
    pub shift: i32,
}

impl RequantSpec {
    pub fn from_multiplier(m: f64) -> Self {
        assert!(m > 0.0 && m.is_finite(), "multiplier must be positive, got {m}");
        // m = q * 2^e with q in [0.5, 1)
        let mut e = m.log2().floor() as i32 + 1;
        let mut q = m / 2f64.powi(e);
        // log2 can be off by one near powers of two.
        if q >= 1.0 {
            q /= 2.0;
            e += 1;
        } else if q < 0.5 {
            q *= 2.0;
            e -= 1;
        }
        let mut m0 = (q * (1u64 << 31) as f64).round() as i64;
        if m0 == 1i64 << 31 {
            m0 /= 2;
            e += 1;
        }
        Self { m0: m0 as i32, shift: -e }
    }

    pub fn multiplier(&self) -> f64 {
        self.m0 as f64 / (1u64 << 31) as f64 * 2f64.powi(-self.shift)
    }

    /// `round_half_away(acc * M)` evaluated in integer arithmetic.
    #[inline]
    pub fn apply(&self, acc: i32) -> i64 {
        let total = 31 + self.shift;
        let p = acc as i64 * self.m0 as i64;
        if total <= 0 {
            return p << (-total);
        }
        if total >= 63 {
            return 0;
        }
        let half = 1i64 << (total - 1);
        if p >= 0 {
            (p + half) >> total
        } else {
            -((-p + half) >> total)
        }
    }
}

/// Maps an `i32` accumulator to an output code.
#[inline]
pub fn requantize(acc: i32, rs: &RequantSpec, z_y: i32, range: (i32, i32)) -> i32 {
    (rs.apply(acc) + z_y as i64).clamp(range.0 as i64, range.1 as i64) as i32
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn multiplier_normalization() {
        let rs = RequantSpec::from_multiplier(0.5);
        assert_eq!(rs, RequantSpec { m0: 1 << 30, shift: 0 });
        for m in [0.75, 0.1, 1e-4, 0.999_999_999, 3.0, 1.0] {
            let rs = RequantSpec::from_multiplier(m);
            assert!(rs.m0 >= 1 << 30, "{m}: {rs:?}");
            assert!(((rs.multiplier() - m) / m).abs() <= 2f64.powi(-31), "{m}");
        }
    }

    #[test]
    fn requantize_examples() {
        let half = RequantSpec::from_multiplier(0.5);
        assert_eq!(requantize(0, &half, 7, (0, 255)), 7);
        assert_eq!(requantize(100, &half, 7, (0, 255)), 57);
        assert_eq!(requantize(i32::MAX, &half, 0, (0, 255)), 255);
        // Ties round away from zero on both signs.
        assert_eq!(requantize(3, &half, 0, (-128, 127)), 2);
        assert_eq!(requantize(-3, &half, 0, (-128, 127)), -2);
    }

    #[test]
    fn requantize_matches_real_rounding() {
        for m in [0.3, 0.013, 0.000_71] {
            let rs = RequantSpec::from_multiplier(m);
            for acc in (-100_000..100_000).step_by(997) {
                let exact = (acc as f64 * rs.multiplier()).round() as i64;
                assert_eq!(rs.apply(acc), exact, "m={m} acc={acc}");
            }
        }
    }
}
