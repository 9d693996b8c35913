//! Quantization-aware training of the reference CNN.
//!
//! The model is `[Conv3x3 + BN + ReLU] x k -> AvgPool -> FC -> softmax`.
//! Forward and backward passes are written out by hand so that every
//! quantizer, straight-through gate and batch-norm correction term is explicit.

mod model;
mod state;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{GraphError, QuantConfig};
use crate::quant::{QuantError, Scheme};

pub use model::{ConvBnLayer, ConvSpec, ForwardCache, ForwardOptions, Grads, ModelSpec, QatModel};
pub use state::{
    ema_update, update_activation_ranges, update_bn_statistics, BNState, CalibrationStats, WeightState,
};
pub use train::{evaluate, train, write_metrics_csv, MetricsRow, TrainOutcome, METRICS_HEADER};

#[derive(Debug, Error)]
pub enum QatError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dataset has {have} samples, a batch needs {need}")]
    DataExhausted { need: usize, have: usize },
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(u64),
    #[error("non-finite gradient for `{0}`")]
    NonFiniteGradient(String),
    #[error("no activation range for `{0}`")]
    MissingRange(String),
    #[error("model does not match the reference structure: {0}")]
    Structure(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Quant(#[from] QuantError),
}

/// How batch norm is folded into the weights while training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnFolding {
    /// Weights scaled by `gamma / sigma` (long-term), output corrected by
    /// `sigma / sigma_B` until freeze, bias-only afterwards.
    #[default]
    Corrected,
    /// Weights scaled by `gamma / sigma_B` of the current batch; never frozen.
    Naive,
}

fn default_lr() -> f64 {
    0.05
}
fn default_bits() -> u8 {
    8
}
fn default_batch() -> usize {
    32
}
fn default_steps() -> u64 {
    1000
}
fn default_momentum() -> f64 {
    0.99
}
fn default_eps() -> f64 {
    1e-3
}
fn default_eval_every() -> u64 {
    100
}
fn default_eval_samples() -> usize {
    1000
}

/// Training configuration; field names are the TOML keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    /// Step at which fake quantization switches on; absent means float training.
    #[serde(default)]
    pub quant_delay: Option<u64>,
    /// Step at which batch-norm statistics (and activation ranges) freeze.
    #[serde(default)]
    pub freeze_bn_delay: Option<u64>,
    #[serde(default)]
    pub ema_decay: Option<f64>,
    #[serde(default)]
    pub stochastic_weights: bool,
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
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_steps")]
    pub total_steps: u64,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default)]
    pub bn_folding: BnFolding,
    #[serde(default = "default_momentum")]
    pub bn_momentum: f64,
    #[serde(default = "default_eps")]
    pub bn_epsilon: f64,
    #[serde(default = "default_momentum")]
    pub activation_momentum: f64,
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        toml::from_str("").expect("all fields have defaults")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), QatError> {
        let bad = |m: String| Err(QatError::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        for (name, b) in [("weight_bits", self.weight_bits), ("activation_bits", self.activation_bits)] {
            if ![4, 8, 16].contains(&b) {
                return bad(format!("{name} must be 4, 8 or 16, got {b}"));
            }
        }
        if let Some(q) = self.quant_delay {
            if q > self.total_steps {
                return bad(format!("quant_delay {q} exceeds total_steps {}", self.total_steps));
            }
            if let Some(f) = self.freeze_bn_delay {
                if f < q {
                    return bad(format!("freeze_bn_delay {f} is before quant_delay {q}"));
                }
            }
        }
        if let Some(d) = self.ema_decay {
            if !(d > 0.0 && d < 1.0) {
                return bad(format!("ema_decay must be in (0, 1), got {d}"));
            }
        }
        for (name, m) in [("bn_momentum", self.bn_momentum), ("activation_momentum", self.activation_momentum)] {
            if !(0.0..=1.0).contains(&m) {
                return bad(format!("{name} must be in [0, 1], got {m}"));
            }
        }
        if !(self.bn_epsilon > 0.0) {
            return bad("bn_epsilon must be positive".into());
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

    pub fn quantize_at(&self, step: u64) -> bool {
        self.quant_delay.is_some_and(|d| step >= d)
    }

    pub fn frozen_at(&self, step: u64) -> bool {
        self.freeze_bn_delay.is_some_and(|d| step >= d)
    }

    /// Forward options for training step `step`.
    pub fn forward_options(&self, step: u64) -> ForwardOptions {
        ForwardOptions {
            quantize: self.quantize_at(step),
            freeze: self.frozen_at(step) && self.bn_folding == BnFolding::Corrected,
            folding: self.bn_folding,
            surrogate: false,
            update_ranges: !self.frozen_at(step),
            stochastic: self.stochastic_weights,
        }
    }
}
