use serde::{Deserialize, Serialize};

use crate::quant::RangeSpec;
use crate::tensor::Tensor;

/// Batch-norm parameters and statistics of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BNState {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub moving_mean: Vec<f64>,
    pub moving_var: Vec<f64>,
    /// Statistics of the most recent training batch.
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
    pub frozen: bool,
}

impl BNState {
    pub fn new(channels: usize, momentum: f64, epsilon: f64) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            moving_mean: vec![0.0; channels],
            moving_var: vec![1.0; channels],
            batch_mean: vec![0.0; channels],
            batch_var: vec![1.0; channels],
            momentum,
            epsilon,
            frozen: false,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// `sigma = sqrt(moving_var + eps)`.
    pub fn moving_std(&self) -> Vec<f64> {
        self.moving_var.iter().map(|v| (v + self.epsilon).sqrt()).collect()
    }

    pub fn batch_std(&self) -> Vec<f64> {
        self.batch_var.iter().map(|v| (v + self.epsilon).sqrt()).collect()
    }
}

/// Folds a batch's moments into the long-term statistics, or freezes them
/// once `step` reaches `freeze_bn_delay`.
pub fn update_bn_statistics(
    bn: &BNState,
    batch_mean: &[f64],
    batch_var: &[f64],
    step: u64,
    freeze_bn_delay: Option<u64>,
) -> BNState {
    let mut out = bn.clone();
    out.batch_mean = batch_mean.to_vec();
    out.batch_var = batch_var.to_vec();
    if freeze_bn_delay.is_some_and(|d| step >= d) {
        out.frozen = true;
        return out;
    }
    let m = bn.momentum;
    for c in 0..bn.channels() {
        out.moving_mean[c] = m * bn.moving_mean[c] + (1.0 - m) * batch_mean[c];
        out.moving_var[c] = m * bn.moving_var[c] + (1.0 - m) * batch_var[c];
    }
    out.frozen = false;
    out
}

/// Master float weights plus an optional exponential moving average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightState {
    pub w_float: Tensor,
    #[serde(default)]
    pub w_ema: Option<Tensor>,
    /// Quantizer ranges used by the latest forward pass, one per quantizer.
    #[serde(default)]
    pub ranges: Vec<RangeSpec>,
}

impl WeightState {
    pub fn new(w: Tensor) -> Self {
        Self { w_float: w, w_ema: None, ranges: Vec::new() }
    }

    /// EMA weights if tracked, else the float weights.
    pub fn ema_or_float(&self) -> &Tensor {
        self.w_ema.as_ref().unwrap_or(&self.w_float)
    }
}

/// `w_ema <- decay * w_ema + (1 - decay) * w_float`; the first call copies `w_float`.
pub fn ema_update(ws: &WeightState, decay: f64) -> WeightState {
    let mut out = ws.clone();
    out.w_ema = Some(match &ws.w_ema {
        None => ws.w_float.clone(),
        Some(e) => Tensor::new(
            e.shape().to_vec(),
            e.data().iter().zip(ws.w_float.data()).map(|(a, w)| decay * a + (1.0 - decay) * w).collect(),
        ),
    });
    out
}

pub(crate) fn ema_vec(ema: &mut Option<Vec<f64>>, value: &[f64], decay: f64) {
    match ema {
        None => *ema = Some(value.to_vec()),
        Some(e) => e.iter_mut().zip(value).for_each(|(a, v)| *a = decay * *a + (1.0 - decay) * v),
    }
}

/// Moving min/max of one activation tensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStats {
    pub moving_min: f64,
    pub moving_max: f64,
    pub momentum: f64,
    pub sample_count: u64,
}

impl CalibrationStats {
    pub fn new(momentum: f64) -> Self {
        Self { moving_min: 0.0, moving_max: 0.0, momentum, sample_count: 0 }
    }

    /// Range seen so far; `None` before the first update.
    pub fn range(&self) -> Option<RangeSpec> {
        (self.sample_count > 0).then(|| RangeSpec::new(self.moving_min, self.moving_max))
    }

    pub fn observe(&self, lo: f64, hi: f64) -> Self {
        let mut out = *self;
        if self.sample_count == 0 {
            out.moving_min = lo;
            out.moving_max = hi;
        } else {
            let m = self.momentum;
            out.moving_min = m * self.moving_min + (1.0 - m) * lo;
            out.moving_max = m * self.moving_max + (1.0 - m) * hi;
        }
        out.sample_count += 1;
        out
    }
}

/// Moving-average update from one batch tensor. The first batch initializes.
pub fn update_activation_ranges(stats: &CalibrationStats, t: &Tensor) -> CalibrationStats {
    assert!(!t.is_empty(), "activation tensor is empty");
    let (lo, hi) = t.min_max();
    stats.observe(lo, hi)
}
