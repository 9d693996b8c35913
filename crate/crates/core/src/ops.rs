//! Float reference kernels (NHWC) with the backward passes the trainer needs.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Same,
    Valid,
}

/// Spatial geometry of a strided 2-D window over an NHWC input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

fn out_and_pad(input: usize, k: usize, stride: usize, padding: Padding) -> Option<(usize, usize)> {
    match padding {
        Padding::Valid => {
            if input < k {
                return None;
            }
            Some(((input - k) / stride + 1, 0))
        }
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(input);
            Some((out, total / 2))
        }
    }
}

impl ConvGeom {
    pub fn new(
        batch: usize,
        in_h: usize,
        in_w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: Padding,
    ) -> Option<Self> {
        if stride == 0 || kh == 0 || kw == 0 {
            return None;
        }
        let (out_h, pad_top) = out_and_pad(in_h, kh, stride, padding)?;
        let (out_w, pad_left) = out_and_pad(in_w, kw, stride, padding)?;
        Some(Self { batch, in_h, in_w, kh, kw, stride, out_h, out_w, pad_top, pad_left })
    }

    /// Input coordinate under tap `(ky, kx)` of output `(oy, ox)`, if inside the image.
    #[inline]
    pub fn input_at(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.stride + ky).checked_sub(self.pad_top)?;
        let ix = (ox * self.stride + kx).checked_sub(self.pad_left)?;
        (iy < self.in_h && ix < self.in_w).then_some((iy, ix))
    }
}

/// 2-D convolution. `w` is `[Kh, Kw, Cin, Cout]`; `bias` has `Cout` entries.
pub fn conv2d(x: &Tensor, w: &Tensor, bias: Option<&[f64]>, stride: usize, padding: Padding) -> Tensor {
    let (n, h, wd, cin) = dims4(x);
    let (kh, kw, wcin, cout) = dims4(w);
    assert_eq!(cin, wcin, "conv input channels");
    let g = ConvGeom::new(n, h, wd, kh, kw, stride, padding).expect("conv geometry");
    let xs = x.data();
    let ws = w.data();
    let mut out = vec![0.0; n * g.out_h * g.out_w * cout];
    for b in 0..n {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let o = ((b * g.out_h + oy) * g.out_w + ox) * cout;
                let acc = &mut out[o..o + cout];
                if let Some(bias) = bias {
                    acc.copy_from_slice(bias);
                }
                for ky in 0..kh {
                    for kx in 0..kw {
                        let Some((iy, ix)) = g.input_at(oy, ox, ky, kx) else { continue };
                        let xi = ((b * h + iy) * wd + ix) * cin;
                        let wi = (ky * kw + kx) * cin * cout;
                        for ci in 0..cin {
                            let xv = xs[xi + ci];
                            if xv == 0.0 {
                                continue;
                            }
                            let wrow = &ws[wi + ci * cout..wi + (ci + 1) * cout];
                            for (a, &wv) in acc.iter_mut().zip(wrow) {
                                *a += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, g.out_h, g.out_w, cout], out)
}

/// Gradients of [`conv2d`] with respect to input and weights.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    stride: usize,
    padding: Padding,
    need_dx: bool,
) -> (Option<Tensor>, Tensor) {
    let (n, h, wd, cin) = dims4(x);
    let (kh, kw, _, cout) = dims4(w);
    let g = ConvGeom::new(n, h, wd, kh, kw, stride, padding).expect("conv geometry");
    let xs = x.data();
    let ws = w.data();
    let dys = dy.data();
    let mut dw = vec![0.0; w.len()];
    let mut dx = if need_dx { vec![0.0; x.len()] } else { Vec::new() };
    for b in 0..n {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let o = ((b * g.out_h + oy) * g.out_w + ox) * cout;
                let grow = &dys[o..o + cout];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let Some((iy, ix)) = g.input_at(oy, ox, ky, kx) else { continue };
                        let xi = ((b * h + iy) * wd + ix) * cin;
                        let wi = (ky * kw + kx) * cin * cout;
                        for ci in 0..cin {
                            let xv = xs[xi + ci];
                            let base = wi + ci * cout;
                            let dwrow = &mut dw[base..base + cout];
                            for (d, &gv) in dwrow.iter_mut().zip(grow) {
                                *d += xv * gv;
                            }
                            if need_dx {
                                let wrow = &ws[base..base + cout];
                                dx[xi + ci] += wrow.iter().zip(grow).map(|(a, b)| a * b).sum::<f64>();
                            }
                        }
                    }
                }
            }
        }
    }
    (need_dx.then(|| Tensor::new(x.shape().to_vec(), dx)), Tensor::new(w.shape().to_vec(), dw))
}

/// Depthwise convolution. `w` is `[Kh, Kw, C, multiplier]`; output channel
/// `c * multiplier + m`.
pub fn depthwise_conv2d(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&[f64]>,
    stride: usize,
    padding: Padding,
) -> Tensor {
    let (n, h, wd, c) = dims4(x);
    let (kh, kw, wc, mult) = dims4(w);
    assert_eq!(c, wc, "depthwise channels");
    let g = ConvGeom::new(n, h, wd, kh, kw, stride, padding).expect("conv geometry");
    let cout = c * mult;
    let mut out = vec![0.0; n * g.out_h * g.out_w * cout];
    for b in 0..n {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let o = ((b * g.out_h + oy) * g.out_w + ox) * cout;
                for (oc, slot) in out[o..o + cout].iter_mut().enumerate() {
                    let ci = oc / mult;
                    let mut acc = bias.map_or(0.0, |bv| bv[oc]);
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let Some((iy, ix)) = g.input_at(oy, ox, ky, kx) else { continue };
                            acc += x.data()[((b * h + iy) * wd + ix) * c + ci] * w.data()[(ky * kw + kx) * cout + oc];
                        }
                    }
                    *slot = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, g.out_h, g.out_w, cout], out)
}

/// Fully connected layer over the flattened per-sample input. `w` is `[Cin, Cout]`.
pub fn fully_connected(x: &Tensor, w: &Tensor, bias: Option<&[f64]>) -> Tensor {
    let n = x.shape()[0];
    let cin = x.len() / n.max(1);
    let (wcin, cout) = (w.shape()[0], w.shape()[1]);
    assert_eq!(cin, wcin, "fc input features");
    let mut out = vec![0.0; n * cout];
    for b in 0..n {
        let acc = &mut out[b * cout..(b + 1) * cout];
        if let Some(bias) = bias {
            acc.copy_from_slice(bias);
        }
        for (i, &xv) in x.data()[b * cin..(b + 1) * cin].iter().enumerate() {
            let wrow = &w.data()[i * cout..(i + 1) * cout];
            for (a, &wv) in acc.iter_mut().zip(wrow) {
                *a += xv * wv;
            }
        }
    }
    Tensor::new(vec![n, cout], out)
}

/// Returns `(dx, dw)` for [`fully_connected`]; `dx` has the shape of `x`.
pub fn fully_connected_backward(x: &Tensor, w: &Tensor, dy: &Tensor) -> (Tensor, Tensor) {
    let n = x.shape()[0];
    let cin = x.len() / n.max(1);
    let cout = w.shape()[1];
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    for b in 0..n {
        let grow = &dy.data()[b * cout..(b + 1) * cout];
        for i in 0..cin {
            let xv = x.data()[b * cin + i];
            let wrow = &w.data()[i * cout..(i + 1) * cout];
            let dwrow = &mut dw[i * cout..(i + 1) * cout];
            let mut s = 0.0;
            for o in 0..cout {
                dwrow[o] += xv * grow[o];
                s += wrow[o] * grow[o];
            }
            dx[b * cin + i] = s;
        }
    }
    (Tensor::new(x.shape().to_vec(), dx), Tensor::new(w.shape().to_vec(), dw))
}

/// Average pool with VALID windows.
pub fn avg_pool(x: &Tensor, k: usize, stride: usize) -> Tensor {
    let (n, h, wd, c) = dims4(x);
    let g = ConvGeom::new(n, h, wd, k, k, stride, Padding::Valid).expect("pool geometry");
    let inv = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; n * g.out_h * g.out_w * c];
    for b in 0..n {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let o = ((b * g.out_h + oy) * g.out_w + ox) * c;
                for ky in 0..k {
                    for kx in 0..k {
                        let (iy, ix) = (oy * stride + ky, ox * stride + kx);
                        let xi = ((b * h + iy) * wd + ix) * c;
                        for ch in 0..c {
                            out[o + ch] += x.data()[xi + ch];
                        }
                    }
                }
                for v in &mut out[o..o + c] {
                    *v *= inv;
                }
            }
        }
    }
    Tensor::new(vec![n, g.out_h, g.out_w, c], out)
}

pub fn avg_pool_backward(x_shape: &[usize], dy: &Tensor, k: usize, stride: usize) -> Tensor {
    let (n, h, wd, c) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (oh, ow) = (dy.shape()[1], dy.shape()[2]);
    let inv = 1.0 / (k * k) as f64;
    let mut dx = vec![0.0; n * h * wd * c];
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let o = ((b * oh + oy) * ow + ox) * c;
                for ky in 0..k {
                    for kx in 0..k {
                        let xi = ((b * h + oy * stride + ky) * wd + ox * stride + kx) * c;
                        for ch in 0..c {
                            dx[xi + ch] += dy.data()[o + ch] * inv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(x_shape.to_vec(), dx)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn relu6(x: &Tensor) -> Tensor {
    x.map(|v| v.clamp(0.0, 6.0))
}

pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.shape(), b.shape());
    Tensor::new(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect())
}

/// Concatenation along `axis`.
pub fn concat(inputs: &[&Tensor], axis: usize) -> Tensor {
    let first = inputs[0].shape();
    let outer: usize = first[..axis].iter().product();
    let mut shape = first.to_vec();
    shape[axis] = inputs.iter().map(|t| t.shape()[axis]).sum();
    let mut data = Vec::with_capacity(inputs.iter().map(|t| t.len()).sum());
    for o in 0..outer {
        for t in inputs {
            let inner: usize = t.shape()[axis..].iter().product();
            data.extend_from_slice(&t.data()[o * inner..(o + 1) * inner]);
        }
    }
    Tensor::new(shape, data)
}

/// Per-channel (innermost axis) mean and biased variance over all other axes.
pub fn channel_moments(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let c = x.channels();
    let m = (x.len() / c) as f64;
    let mut mean = vec![0.0; c];
    for (i, &v) in x.data().iter().enumerate() {
        mean[i % c] += v;
    }
    mean.iter_mut().for_each(|v| *v /= m);
    let mut var = vec![0.0; c];
    for (i, &v) in x.data().iter().enumerate() {
        let d = v - mean[i % c];
        var[i % c] += d * d;
    }
    var.iter_mut().for_each(|v| *v /= m);
    (mean, var)
}

/// Row-wise softmax cross-entropy. Returns mean loss and `dloss/dlogits`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> (f64, Tensor) {
    let n = logits.shape()[0];
    let k = logits.shape()[1];
    let mut grad = vec![0.0; n * k];
    let mut loss = 0.0;
    for b in 0..n {
        let row = &logits.data()[b * k..(b + 1) * k];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
        let sum: f64 = exps.iter().sum();
        loss -= (exps[labels[b]] / sum).ln();
        for j in 0..k {
            grad[b * k + j] = (exps[j] / sum - if j == labels[b] { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    (loss / n as f64, Tensor::new(vec![n, k], grad))
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

pub(crate) fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 4, "expected rank-4 tensor, got {s:?}");
    (s[0], s[1], s[2], s[3])
}
