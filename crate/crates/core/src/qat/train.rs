use std::io::{self, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::QatModel;
use super::state::update_bn_statistics;
use super::{QatError, TrainConfig};
use crate::data::Dataset;
use crate::graph::QuantConfig;
use crate::ops::argmax_rows;

/// One line of the training log. Eval columns are empty on steps without evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub loss: f64,
    pub eval_acc_inst: Option<f64>,
    pub eval_acc_ema: Option<f64>,
    pub bn_frozen: bool,
    /// Fraction of weight codes that changed since the previous step.
    pub weight_code_churn: Option<f64>,
}

pub const METRICS_HEADER: &str = "step,loss,eval_acc_inst,eval_acc_ema,bn_frozen,weight_code_churn";

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.step,
            self.loss,
            opt(self.eval_acc_inst),
            opt(self.eval_acc_ema),
            self.bn_frozen as u8,
            opt(self.weight_code_churn)
        )
    }
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], mut w: W) -> io::Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.csv_line())?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: QatModel,
    pub metrics: Vec<MetricsRow>,
}

/// Top-1 accuracy of inference-mode forward passes over `data`.
pub fn evaluate(model: &QatModel, data: &Dataset, qc: Option<&QuantConfig>, use_ema: bool) -> Result<f64, QatError> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for (x, labels) in data.batches(256) {
        let logits = model.infer(&x, qc, use_ema)?;
        correct += argmax_rows(&logits).iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

fn churn(prev: &[Vec<i32>], cur: &[Vec<i32>]) -> Option<f64> {
    if prev.is_empty() || prev.len() != cur.len() {
        return None;
    }
    let total: usize = cur.iter().map(Vec::len).sum();
    let changed: usize = prev.iter().zip(cur).map(|(a, b)| a.iter().zip(b).filter(|(x, y)| x != y).count()).sum();
    Some(changed as f64 / total as f64)
}

/// Runs `cfg.total_steps` SGD steps. Schedules (`quant_delay`,
/// `freeze_bn_delay`) count from the start of this call.
pub fn train(model: &QatModel, train: &Dataset, eval: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome, QatError> {
    cfg.validate()?;
    let mut model = model.clone();
    if cfg.total_steps == 0 {
        return Ok(TrainOutcome { model, metrics: Vec::new() });
    }
    if train.len() < cfg.batch_size {
        return Err(QatError::DataExhausted { need: cfg.batch_size, have: train.len() });
    }
    model.act_momentum = cfg.activation_momentum;
    for l in &mut model.convs {
        l.bn.momentum = cfg.bn_momentum;
    }
    let qc = cfg.quant_config();
    let eval_set = eval.head(cfg.eval_samples);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed.wrapping_add(1));
    let mut quant_rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed.wrapping_add(2));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut pos = order.len();
    let mut prev_codes: Vec<Vec<i32>> = Vec::new();
    let mut metrics = Vec::with_capacity(cfg.total_steps as usize);
    for t in 0..cfg.total_steps {
        if pos + cfg.batch_size > order.len() {
            order.shuffle(&mut order_rng);
            pos = 0;
        }
        let (x, labels) = train.batch(&order[pos..pos + cfg.batch_size]);
        pos += cfg.batch_size;
        let cache = model.forward_train(&x, &labels, t, cfg, Some(&mut quant_rng))?;
        if !cache.loss.is_finite() {
            return Err(QatError::NonFiniteLoss(t));
        }
        let churn = churn(&prev_codes, &cache.weight_codes);
        model.backward_update(&cache, cfg.learning_rate)?;
        for (l, moments) in model.convs.iter_mut().zip(&cache.batch_moments) {
            l.bn = match moments {
                Some((m, v)) => update_bn_statistics(&l.bn, m, v, t, cfg.freeze_bn_delay),
                None => {
                    let (m, v) = (l.bn.batch_mean.clone(), l.bn.batch_var.clone());
                    update_bn_statistics(&l.bn, &m, &v, t, cfg.freeze_bn_delay)
                }
            };
        }
        if let Some(d) = cfg.ema_decay {
            model.update_ema(d);
        }
        model.step += 1;
        let last = t + 1 == cfg.total_steps;
        let (mut inst, mut ema) = (None, None);
        if last || (cfg.eval_every > 0 && (t + 1) % cfg.eval_every == 0) {
            let q = cfg.quantize_at(t).then_some(&qc);
            inst = Some(evaluate(&model, &eval_set, q, false)?);
            if model.has_ema() {
                ema = Some(evaluate(&model, &eval_set, q, true)?);
            }
        }
        metrics.push(MetricsRow {
            step: t,
            loss: cache.loss,
            eval_acc_inst: inst,
            eval_acc_ema: ema,
            bn_frozen: cfg.frozen_at(t),
            weight_code_churn: churn,
        });
        prev_codes = cache.weight_codes;
    }
    Ok(TrainOutcome { model, metrics })
}
