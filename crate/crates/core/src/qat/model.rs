use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::state::{ema_vec, update_activation_ranges, BNState, CalibrationStats, WeightState};
use super::{BnFolding, QatError, TrainConfig};
use crate::graph::{Graph, LayerKind, Node, Op, QuantConfig};
use crate::ops::{self, Padding};
use crate::quant::{
    dequantize_unchecked, params_from_range, quantize, quantize_dithered, relax_and_widen, sim_quant, tensor_params,
    Granularity, QuantParams, RangeSpec, Scheme,
};
use crate::tensor::Tensor;

pub const INPUT: &str = "image";
pub const POOL: &str = "pool";
pub const LOGITS: &str = "logits";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Architecture of a `[Conv + BN + ReLU] x k -> AvgPool -> FC` classifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// `[H, W, C]` of one input image.
    pub input: [usize; 3],
    pub convs: Vec<ConvSpec>,
    /// Average-pool window and stride.
    pub pool: usize,
    pub classes: usize,
}

impl ModelSpec {
    /// 28x28x1 -> conv3x3/1 (8) -> conv3x3/2 (16) -> avgpool 2 -> fc 784 -> 10.
    pub fn reference() -> Self {
        Self {
            input: [28, 28, 1],
            convs: vec![
                ConvSpec { out_channels: 8, kernel: 3, stride: 1 },
                ConvSpec { out_channels: 16, kernel: 3, stride: 2 },
            ],
            pool: 2,
            classes: 10,
        }
    }

    /// `[H, W, C]` after the pool.
    pub fn pooled_shape(&self) -> [usize; 3] {
        let (mut h, mut w, mut c) = (self.input[0], self.input[1], self.input[2]);
        for cs in &self.convs {
            h = h.div_ceil(cs.stride);
            w = w.div_ceil(cs.stride);
            c = cs.out_channels;
        }
        [(h - self.pool) / self.pool + 1, (w - self.pool) / self.pool + 1, c]
    }

    pub fn feature_len(&self) -> usize {
        self.pooled_shape().iter().product()
    }
}

pub fn relu_name(i: usize) -> String {
    format!("relu{}", i + 1)
}

/// One conv layer with its batch norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvBnLayer {
    pub spec: ConvSpec,
    pub weight: WeightState,
    pub bn: BNState,
    #[serde(default)]
    pub gamma_ema: Option<Vec<f64>>,
    #[serde(default)]
    pub beta_ema: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QatModel {
    pub spec: ModelSpec,
    pub convs: Vec<ConvBnLayer>,
    pub fc_weight: WeightState,
    pub fc_bias: WeightState,
    /// Moving activation ranges keyed by tensor name.
    pub act_stats: BTreeMap<String, CalibrationStats>,
    pub act_momentum: f64,
    /// Completed training steps.
    pub step: u64,
}

/// What a training forward pass simulates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    pub quantize: bool,
    /// Batch norm uses the frozen long-term statistics (corrected folding only).
    pub freeze: bool,
    pub folding: BnFolding,
    /// Replace rounding by its clamp surrogate (identity inside the range).
    pub surrogate: bool,
    /// Fold this batch into the activation range statistics.
    pub update_ranges: bool,
    /// Dithered rounding for weights.
    pub stochastic: bool,
}

impl ForwardOptions {
    pub fn float() -> Self {
        Self {
            quantize: false,
            freeze: false,
            folding: BnFolding::Corrected,
            surrogate: false,
            update_ranges: false,
            stochastic: false,
        }
    }
}

struct LayerCache {
    a: Tensor,
    wq: Tensor,
    wgate: Vec<bool>,
    raw: Option<Tensor>,
    mu_b: Vec<f64>,
    sigma_b: Vec<f64>,
    y: Tensor,
    relu_mask: Vec<bool>,
    act_gate: Option<Vec<bool>>,
}

/// Values kept from a forward pass for the backward pass.
pub struct ForwardCache {
    pub loss: f64,
    pub logits: Tensor,
    /// Batch mean and biased variance per conv layer, when computed.
    pub batch_moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
    /// Codes of every quantized weight tensor used (convs, then fc).
    pub weight_codes: Vec<Vec<i32>>,
    opts: ForwardOptions,
    layers: Vec<LayerCache>,
    pool_in_shape: Vec<usize>,
    pool_gate: Option<Vec<bool>>,
    feat: Tensor,
    fc_wq: Tensor,
    fc_gate: Vec<bool>,
    logits_gate: Option<Vec<bool>>,
    dlogits: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub conv_w: Vec<Tensor>,
    pub gamma: Vec<Vec<f64>>,
    pub beta: Vec<Vec<f64>>,
    pub fc_w: Tensor,
    pub fc_b: Vec<f64>,
}

struct WeightQuant {
    wq: Tensor,
    gate: Vec<bool>,
    codes: Vec<i32>,
    ranges: Vec<RangeSpec>,
}

/// Interval a quantizer with observed min/max `r` covers.
fn quantizer_range(r: RangeSpec, scheme: Scheme) -> RangeSpec {
    match scheme {
        Scheme::Affine => relax_and_widen(r),
        Scheme::SymmetricSigned => {
            let m = r.x_min.abs().max(r.x_max.abs());
            RangeSpec::new(-m, m)
        }
        Scheme::SymmetricUnsigned => RangeSpec::new(0.0, r.x_max.max(0.0)),
    }
}

fn quantize_weight(
    w: &Tensor,
    qc: &QuantConfig,
    layer: LayerKind,
    opts: &ForwardOptions,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<WeightQuant, QatError> {
    let cout = w.channels();
    let flat = w.clone().reshape(vec![w.len() / cout, cout]);
    let attrs = qc.weight_attrs(layer);
    let gran = if attrs.per_channel { Granularity::PerChannel { axis: 1 } } else { Granularity::PerLayer };
    let params: Vec<QuantParams> = tensor_params(&flat, gran, attrs.scheme, attrs.n_bits, attrs.narrow_range)?;
    let minmax = if attrs.per_channel { flat.channel_min_max() } else { vec![flat.min_max()] };
    let ranges: Vec<RangeSpec> = minmax.iter().map(|&(lo, hi)| quantizer_range(RangeSpec::new(lo, hi), attrs.scheme)).collect();
    let k = params.len();
    let mut gate = Vec::with_capacity(w.len());
    let mut codes = Vec::with_capacity(w.len());
    let mut vals = Vec::with_capacity(w.len());
    let mut rng = rng;
    for (i, &v) in w.data().iter().enumerate() {
        let (qp, r) = (&params[i % k], &ranges[i % k]);
        gate.push(r.contains(v));
        let code = match (&mut rng, opts.stochastic) {
            (Some(g), true) => quantize_dithered(v, qp, *g),
            _ => quantize(v, qp),
        };
        codes.push(code);
        vals.push(if opts.surrogate { r.clamp(v) } else { dequantize_unchecked(code, qp) });
    }
    Ok(WeightQuant { wq: Tensor::new(w.shape().to_vec(), vals), gate, codes, ranges })
}

fn scale_channels(t: &Tensor, f: &[f64]) -> Tensor {
    let c = f.len();
    Tensor::new(t.shape().to_vec(), t.data().iter().enumerate().map(|(i, &v)| v * f[i % c]).collect())
}

fn mask(t: &mut Tensor, m: &Option<Vec<bool>>) {
    if let Some(m) = m {
        t.data_mut().iter_mut().zip(m).for_each(|(v, &keep)| {
            if !keep {
                *v = 0.0
            }
        });
    }
}

fn channel_sums(t: &Tensor, c: usize) -> Vec<f64> {
    let mut s = vec![0.0; c];
    t.data().iter().enumerate().for_each(|(i, &v)| s[i % c] += v);
    s
}

fn check_finite(name: &str, v: &[f64]) -> Result<(), QatError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(QatError::NonFiniteGradient(name.into()))
    }
}

fn sgd(w: &mut [f64], g: &[f64], lr: f64) {
    w.iter_mut().zip(g).for_each(|(w, g)| *w -= lr * g);
}

impl QatModel {
    /// He-initialized conv weights, unit batch norm, small fc weights.
    pub fn new(spec: ModelSpec, cfg: &TrainConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
        let mut cin = spec.input[2];
        let mut convs = Vec::new();
        for cs in &spec.convs {
            let fan_in = cs.kernel * cs.kernel * cin;
            let n = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
            let shape = vec![cs.kernel, cs.kernel, cin, cs.out_channels];
            let data = (0..fan_in * cs.out_channels).map(|_| n.sample(&mut rng)).collect();
            convs.push(ConvBnLayer {
                spec: *cs,
                weight: WeightState::new(Tensor::new(shape, data)),
                bn: BNState::new(cs.out_channels, cfg.bn_momentum, cfg.bn_epsilon),
                gamma_ema: None,
                beta_ema: None,
            });
            cin = cs.out_channels;
        }
        let f = spec.feature_len();
        let n = Normal::new(0.0, (1.0 / f as f64).sqrt()).unwrap();
        let fc = Tensor::new(vec![f, spec.classes], (0..f * spec.classes).map(|_| n.sample(&mut rng)).collect());
        Self {
            convs,
            fc_weight: WeightState::new(fc),
            fc_bias: WeightState::new(Tensor::zeros(vec![spec.classes])),
            spec,
            act_stats: BTreeMap::new(),
            act_momentum: cfg.activation_momentum,
            step: 0,
        }
    }

    /// Names of the activation tensors that carry quantizers, in order.
    pub fn activation_names(&self) -> Vec<String> {
        let mut v = vec![INPUT.to_string()];
        v.extend((0..self.convs.len()).map(relu_name));
        v.push(POOL.into());
        v.push(LOGITS.into());
        v
    }

    /// Zero-relaxation is left to the quantizer; these are the raw moving ranges.
    pub fn activation_ranges(&self) -> BTreeMap<String, RangeSpec> {
        self.act_stats.iter().filter_map(|(k, s)| s.range().map(|r| (k.clone(), r))).collect()
    }

    fn observe(&mut self, name: &str, t: &Tensor) {
        let m = self.act_momentum;
        let s = self.act_stats.entry(name.to_string()).or_insert_with(|| CalibrationStats::new(m));
        *s = update_activation_ranges(s, t);
    }

    fn act_quant(
        &self,
        name: &str,
        t: Tensor,
        bits: u8,
        quantize: bool,
        surrogate: bool,
    ) -> Result<(Tensor, Option<Vec<bool>>), QatError> {
        if !quantize {
            return Ok((t, None));
        }
        let r = self.act_stats.get(name).and_then(|s| s.range()).ok_or_else(|| QatError::MissingRange(name.into()))?;
        let qp = params_from_range(r, bits, Scheme::Affine, false)?;
        let gr = relax_and_widen(r);
        let gate = t.data().iter().map(|&v| gr.contains(v)).collect();
        let out = if surrogate { t.map(|v| gr.clamp(v)) } else { t.map(|v| sim_quant(v, &qp)) };
        Ok((out, Some(gate)))
    }

    /// Training forward pass for step `step` of `cfg`.
    pub fn forward_train(
        &mut self,
        x: &Tensor,
        labels: &[usize],
        step: u64,
        cfg: &TrainConfig,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardCache, QatError> {
        self.forward_with(x, labels, cfg.forward_options(step), &cfg.quant_config(), rng)
    }

    /// Training forward pass: batch-statistics batch norm with the chosen
    /// folding, simulated quantization per `opts`, softmax cross-entropy.
    pub fn forward_with(
        &mut self,
        x: &Tensor,
        labels: &[usize],
        opts: ForwardOptions,
        qc: &QuantConfig,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardCache, QatError> {
        let s = x.shape();
        if s.len() != 4 || s[1..] != self.spec.input[..] || labels.len() != s[0] {
            return Err(QatError::Structure(format!("batch {s:?} with {} labels", labels.len())));
        }
        let bits = qc.activation_bits;
        if opts.update_ranges {
            self.observe(INPUT, x);
        }
        let (mut a, _) = self.act_quant(INPUT, x.clone(), bits, opts.quantize, opts.surrogate)?;
        let mut layers = Vec::with_capacity(self.convs.len());
        let mut batch_moments = Vec::new();
        let mut weight_codes = Vec::new();
        for i in 0..self.convs.len() {
            let l = &mut self.convs[i];
            let (stride, eps) = (l.spec.stride, l.bn.epsilon);
            let (gamma, beta) = (&l.bn.gamma, &l.bn.beta);
            let sigma = l.bn.moving_std();
            let c = gamma.len();
            let w = &l.weight.w_float;
            let need_batch = !(opts.folding == BnFolding::Corrected && opts.freeze);
            let (raw, mu_b, sigma_b) = if need_batch {
                let raw = ops::conv2d(&a, w, None, stride, Padding::Same);
                let (m, v) = ops::channel_moments(&raw);
                let sb: Vec<f64> = v.iter().map(|v| (v + eps).sqrt()).collect();
                batch_moments.push(Some((m.clone(), v)));
                (Some(raw), m, sb)
            } else {
                batch_moments.push(None);
                (None, Vec::new(), Vec::new())
            };
            let fold: Vec<f64> = match opts.folding {
                BnFolding::Corrected => (0..c).map(|n| gamma[n] / sigma[n]).collect(),
                BnFolding::Naive => (0..c).map(|n| gamma[n] / sigma_b[n]).collect(),
            };
            let w_c = scale_channels(w, &fold);
            let (wq, wgate) = if opts.quantize {
                let q = quantize_weight(&w_c, qc, LayerKind::Conv2D, &opts, rng.as_deref_mut())?;
                weight_codes.push(q.codes);
                l.weight.ranges = q.ranges;
                (q.wq, q.gate)
            } else {
                let n = w_c.len();
                (w_c, vec![true; n])
            };
            let (y, out) = match (opts.folding, opts.freeze) {
                (BnFolding::Corrected, false) => {
                    let y = ops::conv2d(&a, &wq, None, stride, Padding::Same);
                    let inv_c: Vec<f64> = (0..c).map(|n| sigma[n] / sigma_b[n]).collect();
                    let bias: Vec<f64> = (0..c).map(|n| beta[n] - gamma[n] * mu_b[n] / sigma_b[n]).collect();
                    let data = y.data().iter().enumerate().map(|(k, &v)| v * inv_c[k % c] + bias[k % c]).collect();
                    let out = Tensor::new(y.shape().to_vec(), data);
                    (y, out)
                }
                (BnFolding::Corrected, true) => {
                    let bias: Vec<f64> = (0..c).map(|n| beta[n] - gamma[n] * l.bn.moving_mean[n] / sigma[n]).collect();
                    let out = ops::conv2d(&a, &wq, Some(&bias), stride, Padding::Same);
                    (Tensor::zeros(vec![0]), out)
                }
                (BnFolding::Naive, _) => {
                    let bias: Vec<f64> = (0..c).map(|n| beta[n] - gamma[n] * mu_b[n] / sigma_b[n]).collect();
                    let out = ops::conv2d(&a, &wq, Some(&bias), stride, Padding::Same);
                    (Tensor::zeros(vec![0]), out)
                }
            };
            let relu_mask: Vec<bool> = out.data().iter().map(|&v| v > 0.0).collect();
            let act = ops::relu(&out);
            let name = relu_name(i);
            if opts.update_ranges {
                self.observe(&name, &act);
            }
            let (next, act_gate) = self.act_quant(&name, act, bits, opts.quantize, opts.surrogate)?;
            layers.push(LayerCache { a, wq, wgate, raw, mu_b, sigma_b, y, relu_mask, act_gate });
            a = next;
        }
        let pool_in_shape = a.shape().to_vec();
        let pooled = ops::avg_pool(&a, self.spec.pool, self.spec.pool);
        if opts.update_ranges {
            self.observe(POOL, &pooled);
        }
        let (feat, pool_gate) = self.act_quant(POOL, pooled, bits, opts.quantize, opts.surrogate)?;
        let (fc_wq, fc_gate) = if opts.quantize {
            let q = quantize_weight(&self.fc_weight.w_float, qc, LayerKind::FullyConnected, &opts, rng)?;
            weight_codes.push(q.codes);
            self.fc_weight.ranges = q.ranges;
            (q.wq, q.gate)
        } else {
            (self.fc_weight.w_float.clone(), vec![true; self.fc_weight.w_float.len()])
        };
        let raw_logits = ops::fully_connected(&feat, &fc_wq, Some(self.fc_bias.w_float.data()));
        if opts.update_ranges {
            self.observe(LOGITS, &raw_logits);
        }
        let (logits, logits_gate) = self.act_quant(LOGITS, raw_logits, bits, opts.quantize, opts.surrogate)?;
        let (loss, dlogits) = ops::softmax_cross_entropy(&logits, labels);
        Ok(ForwardCache {
            loss,
            logits,
            batch_moments,
            weight_codes,
            opts,
            layers,
            pool_in_shape,
            pool_gate,
            feat,
            fc_wq,
            fc_gate,
            logits_gate,
            dlogits,
        })
    }

    /// Gradients of the cached loss. Quantizers pass gradients straight
    /// through inside their range and block them outside.
    pub fn gradients(&self, cache: &ForwardCache) -> Grads {
        let mut g = cache.dlogits.clone();
        mask(&mut g, &cache.logits_gate);
        let (dfeat, mut fc_w) = ops::fully_connected_backward(&cache.feat, &cache.fc_wq, &g);
        mask(&mut fc_w, &Some(cache.fc_gate.clone()));
        let fc_b = channel_sums(&g, self.spec.classes);
        let mut dpool = dfeat;
        mask(&mut dpool, &cache.pool_gate);
        let mut up = ops::avg_pool_backward(&cache.pool_in_shape, &dpool, self.spec.pool, self.spec.pool);
        let k = self.convs.len();
        let (mut conv_w, mut gamma_g, mut beta_g) = (vec![None; k], vec![Vec::new(); k], vec![Vec::new(); k]);
        for i in (0..k).rev() {
            let l = &self.convs[i];
            let lc = &cache.layers[i];
            let (gamma, w) = (&l.bn.gamma, &l.weight.w_float);
            let sigma = l.bn.moving_std();
            let c = gamma.len();
            let (stride, need_dx) = (l.spec.stride, i > 0);
            mask(&mut up, &lc.act_gate);
            let mut g = up;
            g.data_mut().iter_mut().zip(&lc.relu_mask).for_each(|(v, &on)| {
                if !on {
                    *v = 0.0
                }
            });
            let sum_g = channel_sums(&g, c);
            let mut dgamma = vec![0.0; c];
            let mut dmu_b = vec![0.0; c];
            let mut dsigma_b = vec![0.0; c];
            let dy = match (cache.opts.folding, cache.opts.freeze) {
                (BnFolding::Corrected, false) => {
                    let (mu_b, sb) = (&lc.mu_b, &lc.sigma_b);
                    let mut gy_sum = vec![0.0; c];
                    let mut dy = g.clone();
                    for (idx, (d, &yv)) in dy.data_mut().iter_mut().zip(lc.y.data()).enumerate() {
                        let n = idx % c;
                        gy_sum[n] += *d * yv;
                        *d *= sigma[n] / sb[n];
                    }
                    for n in 0..c {
                        dsigma_b[n] = (-sigma[n] * gy_sum[n] + gamma[n] * mu_b[n] * sum_g[n]) / (sb[n] * sb[n]);
                        dmu_b[n] = -gamma[n] / sb[n] * sum_g[n];
                        dgamma[n] = -mu_b[n] / sb[n] * sum_g[n];
                    }
                    dy
                }
                (BnFolding::Corrected, true) => {
                    for n in 0..c {
                        dgamma[n] = -l.bn.moving_mean[n] / sigma[n] * sum_g[n];
                    }
                    g
                }
                (BnFolding::Naive, _) => {
                    let (mu_b, sb) = (&lc.mu_b, &lc.sigma_b);
                    for n in 0..c {
                        dgamma[n] = -mu_b[n] / sb[n] * sum_g[n];
                        dmu_b[n] = -gamma[n] / sb[n] * sum_g[n];
                        dsigma_b[n] = gamma[n] * mu_b[n] / (sb[n] * sb[n]) * sum_g[n];
                    }
                    g
                }
            };
            let (dx1, mut gwq) = ops::conv2d_backward(&lc.a, &lc.wq, &dy, stride, Padding::Same, need_dx);
            mask(&mut gwq, &Some(lc.wgate.clone()));
            // Chain through w_c = fold * W.
            let fold: Vec<f64> = match cache.opts.folding {
                BnFolding::Corrected => (0..c).map(|n| gamma[n] / sigma[n]).collect(),
                BnFolding::Naive => (0..c).map(|n| gamma[n] / lc.sigma_b[n]).collect(),
            };
            let mut dfold = vec![0.0; c];
            for (idx, (&gv, &wv)) in gwq.data().iter().zip(w.data()).enumerate() {
                dfold[idx % c] += gv * wv;
            }
            let mut dw = scale_channels(&gwq, &fold);
            for n in 0..c {
                match cache.opts.folding {
                    BnFolding::Corrected => dgamma[n] += dfold[n] / sigma[n],
                    BnFolding::Naive => {
                        let sb = lc.sigma_b[n];
                        dgamma[n] += dfold[n] / sb;
                        dsigma_b[n] -= dfold[n] * gamma[n] / (sb * sb);
                    }
                }
            }
            let mut dx = dx1;
            if let Some(raw) = &lc.raw {
                // Batch moments depend on the raw convolution output.
                let m = (raw.len() / c) as f64;
                let dr_data = raw
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(idx, &r)| {
                        let n = idx % c;
                        dmu_b[n] / m + dsigma_b[n] * (r - lc.mu_b[n]) / (m * lc.sigma_b[n])
                    })
                    .collect();
                let dr = Tensor::new(raw.shape().to_vec(), dr_data);
                let (dx2, gw) = ops::conv2d_backward(&lc.a, w, &dr, stride, Padding::Same, need_dx);
                dw.data_mut().iter_mut().zip(gw.data()).for_each(|(a, b)| *a += b);
                if let (Some(d1), Some(d2)) = (dx.as_mut(), dx2) {
                    d1.data_mut().iter_mut().zip(d2.data()).for_each(|(a, b)| *a += b);
                }
            }
            conv_w[i] = Some(dw);
            gamma_g[i] = dgamma;
            beta_g[i] = sum_g;
            up = dx.unwrap_or_else(|| Tensor::zeros(vec![0]));
        }
        Grads {
            conv_w: conv_w.into_iter().map(Option::unwrap).collect(),
            gamma: gamma_g,
            beta: beta_g,
            fc_w,
            fc_b,
        }
    }

    /// One SGD step on the float master weights.
    pub fn backward_update(&mut self, cache: &ForwardCache, lr: f64) -> Result<Grads, QatError> {
        let g = self.gradients(cache);
        for (i, l) in self.convs.iter().enumerate() {
            check_finite(&format!("conv{}/weight", i + 1), g.conv_w[i].data())?;
            check_finite(&format!("bn{}/gamma", i + 1), &g.gamma[i])?;
            check_finite(&format!("bn{}/beta", i + 1), &g.beta[i])?;
            debug_assert_eq!(l.bn.gamma.len(), g.gamma[i].len());
        }
        check_finite("fc/weight", g.fc_w.data())?;
        check_finite("fc/bias", &g.fc_b)?;
        for (i, l) in self.convs.iter_mut().enumerate() {
            sgd(l.weight.w_float.data_mut(), g.conv_w[i].data(), lr);
            sgd(&mut l.bn.gamma, &g.gamma[i], lr);
            sgd(&mut l.bn.beta, &g.beta[i], lr);
        }
        sgd(self.fc_weight.w_float.data_mut(), g.fc_w.data(), lr);
        sgd(self.fc_bias.w_float.data_mut(), &g.fc_b, lr);
        Ok(g)
    }

    /// Moves every learnable tensor's EMA copy towards its current value.
    pub fn update_ema(&mut self, decay: f64) {
        for l in &mut self.convs {
            l.weight = super::state::ema_update(&l.weight, decay);
            ema_vec(&mut l.gamma_ema, &l.bn.gamma, decay);
            ema_vec(&mut l.beta_ema, &l.bn.beta, decay);
        }
        self.fc_weight = super::state::ema_update(&self.fc_weight, decay);
        self.fc_bias = super::state::ema_update(&self.fc_bias, decay);
    }

    pub fn has_ema(&self) -> bool {
        self.fc_weight.w_ema.is_some()
    }

    /// Inference forward with long-term batch-norm statistics folded into the
    /// weights, optionally with simulated quantization.
    pub fn infer(&self, x: &Tensor, qc: Option<&QuantConfig>, use_ema: bool) -> Result<Tensor, QatError> {
        let quantize = qc.is_some();
        let bits = qc.map_or(8, |q| q.activation_bits);
        let opts = ForwardOptions { quantize, ..ForwardOptions::float() };
        let (mut a, _) = self.act_quant(INPUT, x.clone(), bits, quantize, false)?;
        for (i, l) in self.convs.iter().enumerate() {
            let pick = |ema: &Option<Vec<f64>>, v: &Vec<f64>| if use_ema { ema.clone().unwrap_or(v.clone()) } else { v.clone() };
            let gamma = pick(&l.gamma_ema, &l.bn.gamma);
            let beta = pick(&l.beta_ema, &l.bn.beta);
            let w = if use_ema { l.weight.ema_or_float() } else { &l.weight.w_float };
            let sigma = l.bn.moving_std();
            let c = gamma.len();
            let fold: Vec<f64> = (0..c).map(|n| gamma[n] / sigma[n]).collect();
            let w_c = scale_channels(w, &fold);
            let wq = match qc {
                Some(qc) => quantize_weight(&w_c, qc, LayerKind::Conv2D, &opts, None)?.wq,
                None => w_c,
            };
            let bias: Vec<f64> = (0..c).map(|n| beta[n] - fold[n] * l.bn.moving_mean[n]).collect();
            let out = ops::relu(&ops::conv2d(&a, &wq, Some(&bias), l.spec.stride, Padding::Same));
            a = self.act_quant(&relu_name(i), out, bits, quantize, false)?.0;
        }
        let pooled = ops::avg_pool(&a, self.spec.pool, self.spec.pool);
        let feat = self.act_quant(POOL, pooled, bits, quantize, false)?.0;
        let (fw, fb) = if use_ema {
            (self.fc_weight.ema_or_float(), self.fc_bias.ema_or_float())
        } else {
            (&self.fc_weight.w_float, &self.fc_bias.w_float)
        };
        let wq = match qc {
            Some(qc) => quantize_weight(fw, qc, LayerKind::FullyConnected, &opts, None)?.wq,
            None => fw.clone(),
        };
        let logits = ops::fully_connected(&feat, &wq, Some(fb.data()));
        Ok(self.act_quant(LOGITS, logits, bits, quantize, false)?.0)
    }

    /// Float graph with explicit batch-norm nodes (instantaneous or EMA weights).
    pub fn to_graph(&self, use_ema: bool) -> Graph {
        let mut g = Graph::new();
        let [h, w, c] = self.spec.input;
        g.push(Node::new("input", Op::Input { shape: vec![1, h, w, c] }, &[], INPUT));
        let mut prev = INPUT.to_string();
        for (i, l) in self.convs.iter().enumerate() {
            let k = i + 1;
            let pick = |ema: &Option<Vec<f64>>, v: &Vec<f64>| if use_ema { ema.clone().unwrap_or(v.clone()) } else { v.clone() };
            let wname = format!("conv{k}/weight");
            let weight = if use_ema { l.weight.ema_or_float() } else { &l.weight.w_float };
            g.add_param(&wname, weight.clone());
            let bn: Vec<String> = ["gamma", "beta", "moving_mean", "moving_variance"].iter().map(|p| format!("bn{k}/{p}")).collect();
            g.add_param(&bn[0], Tensor::scalar_vec(pick(&l.gamma_ema, &l.bn.gamma)));
            g.add_param(&bn[1], Tensor::scalar_vec(pick(&l.beta_ema, &l.bn.beta)));
            g.add_param(&bn[2], Tensor::scalar_vec(l.bn.moving_mean.clone()));
            g.add_param(&bn[3], Tensor::scalar_vec(l.bn.moving_var.clone()));
            let conv = format!("conv{k}");
            let bnn = format!("bn{k}");
            g.push(Node::new(&conv, Op::Conv2D { stride: l.spec.stride, padding: Padding::Same }, &[&prev, &wname], &conv));
            g.push(Node::new(
                &bnn,
                Op::BatchNorm { epsilon: l.bn.epsilon, momentum: l.bn.momentum },
                &[&conv, &bn[0], &bn[1], &bn[2], &bn[3]],
                &bnn,
            ));
            let relu = relu_name(i);
            g.push(Node::new(&relu, Op::Relu, &[&bnn], &relu));
            prev = relu;
        }
        g.push(Node::new(POOL, Op::AvgPool { kernel: self.spec.pool, stride: self.spec.pool }, &[&prev], POOL));
        let (fw, fb) = if use_ema {
            (self.fc_weight.ema_or_float(), self.fc_bias.ema_or_float())
        } else {
            (&self.fc_weight.w_float, &self.fc_bias.w_float)
        };
        g.add_param("fc/weight", fw.clone());
        g.add_param("fc/bias", fb.clone());
        g.push(Node::new("fc", Op::FullyConnected, &[POOL, "fc/weight", "fc/bias"], LOGITS));
        g.push(Node::new("output", Op::Output, &[LOGITS], "output"));
        g
    }

    /// Rebuilds a model from a graph produced by [`QatModel::to_graph`].
    pub fn from_graph(g: &Graph, cfg: &TrainConfig) -> Result<Self, QatError> {
        let err = |m: String| QatError::Structure(m);
        let input = g.input_nodes().next().ok_or_else(|| err("no input node".into()))?;
        let Op::Input { shape } = &input.op else { unreachable!() };
        if shape.len() != 4 {
            return Err(err(format!("input shape {shape:?}")));
        }
        let param = |name: &str| g.params.get(name).ok_or_else(|| err(format!("missing parameter `{name}`")));
        let mut convs = Vec::new();
        let mut pool = None;
        for n in &g.nodes {
            match &n.op {
                Op::Conv2D { stride, .. } => {
                    let w = param(&n.inputs[1])?.clone();
                    let bn_node = g
                        .consumers(&n.output)
                        .into_iter()
                        .find(|c| matches!(c.op, Op::BatchNorm { .. }))
                        .ok_or_else(|| err(format!("`{}` is not followed by batch norm", n.name)))?;
                    let Op::BatchNorm { epsilon, momentum } = bn_node.op else { unreachable!() };
                    let v = |i: usize| param(&bn_node.inputs[i]).map(|t| t.data().to_vec());
                    let spec = ConvSpec { out_channels: w.shape()[3], kernel: w.shape()[0], stride: *stride };
                    let mut bn = BNState::new(spec.out_channels, momentum, epsilon);
                    bn.gamma = v(1)?;
                    bn.beta = v(2)?;
                    bn.moving_mean = v(3)?;
                    bn.moving_var = v(4)?;
                    convs.push(ConvBnLayer { spec, weight: WeightState::new(w), bn, gamma_ema: None, beta_ema: None });
                }
                Op::AvgPool { kernel, .. } => pool = Some(*kernel),
                _ => {}
            }
        }
        let fc = g
            .nodes
            .iter()
            .find(|n| matches!(n.op, Op::FullyConnected))
            .ok_or_else(|| err("no fully-connected layer".into()))?;
        let fw = param(&fc.inputs[1])?.clone();
        let classes = fw.shape()[1];
        let fb = match fc.input(2) {
            Some(b) => param(b)?.clone(),
            None => Tensor::zeros(vec![classes]),
        };
        let spec = ModelSpec {
            input: [shape[1], shape[2], shape[3]],
            convs: convs.iter().map(|c| c.spec).collect(),
            pool: pool.ok_or_else(|| err("no average pool".into()))?,
            classes,
        };
        if spec.feature_len() != fw.shape()[0] {
            return Err(err(format!("fc expects {} features, model produces {}", fw.shape()[0], spec.feature_len())));
        }
        Ok(Self {
            spec,
            convs,
            fc_weight: WeightState::new(fw),
            fc_bias: WeightState::new(fb),
            act_stats: BTreeMap::new(),
            act_momentum: cfg.activation_momentum,
            step: 0,
        })
    }
}
