//! Dense row-major tensors used on the float side and the integer side.
//!
//! Activations are NHWC. Conv weights are `[Kh, Kw, Cin, Cout]`, depthwise
//! weights `[Kh, Kw, C, multiplier]`, fully-connected weights `[Cin, Cout]`.
//! In every layout the output channel is the innermost axis.

use serde::{Deserialize, Serialize};

/// Float tensor. Values are held in `f64`; files store them as `f32`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Integer code tensor produced by a quantizer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QTensor {
    shape: Vec<usize>,
    data: Vec<i32>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

macro_rules! tensor_common {
    ($ty:ident, $elem:ty) => {
        impl $ty {
            pub fn new(shape: Vec<usize>, data: Vec<$elem>) -> Self {
                assert_eq!(
                    numel(&shape),
                    data.len(),
                    "shape {:?} does not match {} elements",
                    shape,
                    data.len()
                );
                Self { shape, data }
            }

            pub fn zeros(shape: Vec<usize>) -> Self {
                let n = numel(&shape);
                Self { shape, data: vec![<$elem>::default(); n] }
            }

            pub fn filled(shape: Vec<usize>, value: $elem) -> Self {
                let n = numel(&shape);
                Self { shape, data: vec![value; n] }
            }

            pub fn shape(&self) -> &[usize] {
                &self.shape
            }

            pub fn data(&self) -> &[$elem] {
                &self.data
            }

            pub fn data_mut(&mut self) -> &mut [$elem] {
                &mut self.data
            }

            pub fn into_data(self) -> Vec<$elem> {
                self.data
            }

            pub fn len(&self) -> usize {
                self.data.len()
            }

            pub fn is_empty(&self) -> bool {
                self.data.is_empty()
            }

            pub fn rank(&self) -> usize {
                self.shape.len()
            }

            /// Size of the innermost (channel) axis.
            pub fn channels(&self) -> usize {
                self.shape.last().copied().unwrap_or(1)
            }

            pub fn reshape(mut self, shape: Vec<usize>) -> Self {
                assert_eq!(numel(&shape), self.data.len(), "reshape changes element count");
                self.shape = shape;
                self
            }

            /// Element `c` of every innermost-axis row, i.e. one channel slice.
            pub fn channel(&self, c: usize) -> impl Iterator<Item = $elem> + '_ {
                let ch = self.channels();
                self.data.iter().skip(c).step_by(ch).copied()
            }
        }
    };
}

tensor_common!(Tensor, f64);
tensor_common!(QTensor, i32);

impl Tensor {
    pub fn scalar_vec(values: Vec<f64>) -> Self {
        let n = values.len();
        Self::new(vec![n], values)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &v| m.max(v.abs()))
    }

    /// Largest elementwise `|a - b|`.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Per-channel (innermost axis) min and max.
    pub fn channel_min_max(&self) -> Vec<(f64, f64)> {
        let ch = self.channels();
        let mut out = vec![(f64::INFINITY, f64::NEG_INFINITY); ch];
        for (i, &v) in self.data.iter().enumerate() {
            let e = &mut out[i % ch];
            e.0 = e.0.min(v);
            e.1 = e.1.max(v);
        }
        out
    }

    /// Rounds every element through `f32`, the storage precision of model files.
    pub fn round_to_f32(&self) -> Tensor {
        self.map(|v| v as f32 as f64)
    }
}

impl Default for QTensor {
    fn default() -> Self {
        QTensor::zeros(vec![0])
    }
}
