//! Weight diagnostics: per-output-channel SQNR under different quantizers and
//! normalized weight-power histograms.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{fold_bn_eval, Graph, GraphError, LayerKind};
use crate::quant::{sim_quant_tensor, Granularity, QuantError, Scheme};
use crate::tensor::Tensor;

/// Reported SQNR for a channel with zero quantization error.
pub const SQNR_CAP_DB: f64 = 100.0;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("tensor has zero average power")]
    DegenerateTensor,
    #[error("empty tensor")]
    Empty,
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// SQNR in dB for each slice along the innermost axis:
/// `10 log10(sum W^2 / sum (W - Q(W))^2)`, capped at [`SQNR_CAP_DB`].
pub fn sqnr(w: &Tensor, scheme: Scheme, granularity: Granularity, n_bits: u8) -> Result<Vec<f64>, AnalysisError> {
    if w.is_empty() {
        return Err(AnalysisError::Empty);
    }
    let channels = *w.shape().last().unwrap_or(&1);
    let (q, _) = sim_quant_tensor(w, granularity, scheme, n_bits, false)?;
    let mut signal = vec![0.0; channels];
    let mut noise = vec![0.0; channels];
    for (i, (&a, &b)) in w.data().iter().zip(q.data()).enumerate() {
        signal[i % channels] += a * a;
        noise[i % channels] += (a - b) * (a - b);
    }
    Ok(signal.iter().zip(&noise).map(|(&s, &n)| db(s, n)).collect())
}

fn db(signal: f64, noise: f64) -> f64 {
    if noise == 0.0 {
        return SQNR_CAP_DB;
    }
    if signal == 0.0 {
        return -SQNR_CAP_DB;
    }
    (10.0 * (signal / noise).log10()).clamp(-SQNR_CAP_DB, SQNR_CAP_DB)
}

/// Histogram with `edges.len() == counts.len() + 1`; the last bin is closed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Equal-width bins over `[lo, hi]`.
    pub fn build(values: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        let bins = bins.max(1);
        let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
        let edges = (0..=bins).map(|i| lo + i as f64 * width).collect();
        let mut counts = vec![0; bins];
        for &v in values {
            let i = ((v - lo) / width).floor();
            let i = if i < 0.0 { 0 } else { (i as usize).min(bins - 1) };
            counts[i] += 1;
        }
        Self { edges, counts }
    }

    /// Bins of width 1 covering the integer span of `values`.
    pub fn unit_bins(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { edges: vec![0.0], counts: Vec::new() };
        }
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min).floor();
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max).floor() + 1.0;
        Self::build(values, lo, hi, (hi - lo) as usize)
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerHistogram {
    pub mean_power: f64,
    /// Largest `W^2 / E[W^2]`; large values flag outliers.
    pub max_normalized_power: f64,
    pub histogram: Histogram,
}

/// Histogram of `W^2 / E[W^2]` over `bins` equal-width bins on `[0, max]`.
pub fn weight_power_histogram(w: &Tensor, bins: usize) -> Result<PowerHistogram, AnalysisError> {
    if w.is_empty() {
        return Err(AnalysisError::Empty);
    }
    let mean_power = w.data().iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
    if !(mean_power > 0.0) {
        return Err(AnalysisError::DegenerateTensor);
    }
    let p: Vec<f64> = w.data().iter().map(|v| v * v / mean_power).collect();
    let max = p.iter().cloned().fold(0.0, f64::max);
    Ok(PowerHistogram { mean_power, max_normalized_power: max, histogram: Histogram::build(&p, 0.0, max, bins) })
}

/// One of the quantizers compared per layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeChoice {
    AsymmetricPerLayer,
    SymmetricPerChannel,
    AsymmetricPerChannel,
}

impl SchemeChoice {
    pub const ALL: [SchemeChoice; 3] =
        [SchemeChoice::AsymmetricPerLayer, SchemeChoice::SymmetricPerChannel, SchemeChoice::AsymmetricPerChannel];

    pub fn name(self) -> &'static str {
        match self {
            SchemeChoice::AsymmetricPerLayer => "asymmetric_per_layer",
            SchemeChoice::SymmetricPerChannel => "symmetric_per_channel",
            SchemeChoice::AsymmetricPerChannel => "asymmetric_per_channel",
        }
    }

    pub fn scheme(self) -> Scheme {
        match self {
            SchemeChoice::SymmetricPerChannel => Scheme::SymmetricSigned,
            _ => Scheme::Affine,
        }
    }

    pub fn granularity(self) -> Granularity {
        match self {
            SchemeChoice::AsymmetricPerLayer => Granularity::PerLayer,
            _ => Granularity::PerChannel { axis: 1 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SqnrReport {
    pub layer: String,
    pub scheme: SchemeChoice,
    pub n_bits: u8,
    pub sqnr_db: Vec<f64>,
    /// 1 dB bins over `sqnr_db`.
    pub histogram: Histogram,
}

impl SqnrReport {
    pub fn min_db(&self) -> f64 {
        self.sqnr_db.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn mean_db(&self) -> f64 {
        self.sqnr_db.iter().sum::<f64>() / self.sqnr_db.len().max(1) as f64
    }
}

/// Reshapes a layer weight to `[elements per channel, output channels]`.
pub fn channel_matrix(layer: LayerKind, w: &Tensor) -> Tensor {
    let cout = match layer {
        LayerKind::DepthwiseConv2D => w.shape()[2] * w.shape()[3],
        _ => *w.shape().last().unwrap_or(&1),
    };
    w.clone().reshape(vec![w.len() / cout, cout])
}

pub fn layer_report(
    name: &str,
    layer: LayerKind,
    w: &Tensor,
    choice: SchemeChoice,
    n_bits: u8,
) -> Result<SqnrReport, AnalysisError> {
    let m = channel_matrix(layer, w);
    let sqnr_db = sqnr(&m, choice.scheme(), choice.granularity(), n_bits)?;
    let histogram = Histogram::unit_bins(&sqnr_db);
    Ok(SqnrReport { layer: name.to_string(), scheme: choice, n_bits, sqnr_db, histogram })
}

/// Per-layer SQNR of the BN-folded weights under every [`SchemeChoice`].
pub fn compare_schemes(g: &Graph, n_bits: u8) -> Result<Vec<SqnrReport>, AnalysisError> {
    let folded = fold_bn_eval(g)?;
    let mut out = Vec::new();
    for node in &folded.nodes {
        let Some(layer) = node.op.layer_kind() else { continue };
        let Some(w) = folded.params.get(&node.inputs[1]) else { continue };
        for choice in SchemeChoice::ALL {
            out.push(layer_report(&node.name, layer, w, choice, n_bits)?);
        }
    }
    Ok(out)
}

pub const REPORT_CSV_HEADER: &str = "layer,scheme,n_bits,channel,sqnr_db";

/// Long-format CSV: one row per (layer, scheme, channel).
pub fn reports_csv(reports: &[SqnrReport]) -> String {
    let mut s = String::from(REPORT_CSV_HEADER);
    s.push('\n');
    for r in reports {
        for (c, v) in r.sqnr_db.iter().enumerate() {
            let _ = writeln!(s, "{},{},{},{c},{v}", r.layer, r.scheme.name(), r.n_bits);
        }
    }
    s
}

/// `(x, y)` series of a histogram: bin centers and counts.
pub fn histogram_series(h: &Histogram) -> String {
    let mut s = String::from("x,y\n");
    for (i, c) in h.counts.iter().enumerate() {
        let _ = writeln!(s, "{},{c}", (h.edges[i] + h.edges[i + 1]) / 2.0);
    }
    s
}
