//! Fused operations whose backward rules are cheaper written by hand than
//! composed from primitives.

use super::{Backward, Tensor};
use crate::error::{cfg_err, dim_err, Result};

fn last_axis(x: &Tensor) -> Result<(usize, usize)> {
    let d = *x.shape().last().unwrap_or(&0);
    if d == 0 {
        return Err(dim_err!("empty last axis in {:?}", x.shape()));
    }
    Ok((x.numel() / d, d))
}

// ---------------------------------------------------------------------------

struct LayerNorm {
    eps: f64,
    rows: usize,
    width: usize,
}

fn normalize_row(row: &[f64], eps: f64, out: &mut [f64]) -> f64 {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    for (o, v) in out.iter_mut().zip(row) {
        *o = (v - mean) * inv;
    }
    inv
}

impl Backward for LayerNorm {
    fn name(&self) -> &'static str {
        "layer_norm"
    }

    fn backward(&self, parents: &[Tensor], _out: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (x, gain) = (&parents[0], &parents[1]);
        let w = self.width;
        let gd = gain.data();
        let mut gx = vec![0.0; x.numel()];
        let mut ggain = vec![0.0; w];
        let mut gbias = vec![0.0; w];
        let mut xhat = vec![0.0; w];
        let mut dxhat = vec![0.0; w];
        for r in 0..self.rows {
            let row = &x.data()[r * w..(r + 1) * w];
            let g = &grad[r * w..(r + 1) * w];
            let inv = normalize_row(row, self.eps, &mut xhat);
            for i in 0..w {
                dxhat[i] = g[i] * gd[i];
                ggain[i] += g[i] * xhat[i];
                gbias[i] += g[i];
            }
            let mean_d = dxhat.iter().sum::<f64>() / w as f64;
            let mean_dx = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / w as f64;
            for i in 0..w {
                gx[r * w + i] = inv * (dxhat[i] - mean_d - xhat[i] * mean_dx);
            }
        }
        vec![Some(gx), gain.requires_grad().then_some(ggain), parents[2].requires_grad().then_some(gbias)]
    }
}

/// Normalizes each position over the last axis, then applies `gain` and
/// `bias` (both sized like the last axis).
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let (rows, w) = last_axis(x)?;
    if gain.shape() != [w] || bias.shape() != [w] {
        return Err(dim_err!(
            "layer_norm affine shapes {:?}/{:?} do not match last axis of {:?}",
            gain.shape(),
            bias.shape(),
            x.shape()
        ));
    }
    let mut out = vec![0.0; x.numel()];
    let (gd, bd) = (gain.data(), bias.data());
    for r in 0..rows {
        let o = &mut out[r * w..(r + 1) * w];
        normalize_row(&x.data()[r * w..(r + 1) * w], eps, o);
        for i in 0..w {
            o[i] = o[i] * gd[i] + bd[i];
        }
    }
    Ok(Tensor::from_op(
        out,
        x.shape().to_vec(),
        vec![x.clone(), gain.clone(), bias.clone()],
        LayerNorm { eps, rows, width: w },
    ))
}

// ---------------------------------------------------------------------------

struct Softmax {
    width: usize,
    log: bool,
}

impl Backward for Softmax {
    fn name(&self) -> &'static str {
        if self.log {
            "log_softmax"
        } else {
            "softmax"
        }
    }

    fn backward(&self, _parents: &[Tensor], out: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let w = self.width;
        let y = out.data();
        let mut gx = vec![0.0; y.len()];
        for ((gx, y), g) in gx.chunks_mut(w).zip(y.chunks(w)).zip(grad.chunks(w)) {
            if self.log {
                let gsum: f64 = g.iter().sum();
                for i in 0..w {
                    gx[i] = g[i] - y[i].exp() * gsum;
                }
            } else {
                let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                for i in 0..w {
                    gx[i] = y[i] * (g[i] - dot);
                }
            }
        }
        vec![Some(gx)]
    }
}

fn softmax_impl(x: &Tensor, log: bool) -> Tensor {
    let w = *x.shape().last().expect("tensor has at least one axis");
    let mut out = vec![0.0; x.numel()];
    for (o, row) in out.chunks_mut(w).zip(x.data().chunks(w)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, v) in o.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        if log {
            let lse = max + sum.ln();
            for (o, v) in o.iter_mut().zip(row) {
                *o = v - lse;
            }
        } else {
            o.iter_mut().for_each(|v| *v /= sum);
        }
    }
    Tensor::from_op(out, x.shape().to_vec(), vec![x.clone()], Softmax { width: w, log })
}

/// Row-wise softmax over the last axis, stabilized by subtracting the row max.
pub fn softmax_lastaxis(x: &Tensor) -> Tensor {
    softmax_impl(x, false)
}

impl Tensor {
    pub fn softmax(&self) -> Tensor {
        softmax_impl(self, false)
    }

    pub fn log_softmax(&self) -> Tensor {
        softmax_impl(self, true)
    }

    /// Gated linear unit over the last axis: first half times sigmoid of the
    /// second half.
    pub fn glu(&self) -> Result<Tensor> {
        let (rows, w) = last_axis(self)?;
        if w % 2 != 0 {
            return Err(dim_err!("glu needs an even last axis, got {:?}", self.shape()));
        }
        let h = w / 2;
        let mut out = Vec::with_capacity(rows * h);
        for row in self.data().chunks(w) {
            for i in 0..h {
                out.push(row[i] * sigmoid(row[h + i]));
            }
        }
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = h;
        Ok(Tensor::from_op(out, shape, vec![self.clone()], Glu { half: h }))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct Glu {
    half: usize,
}

impl Backward for Glu {
    fn name(&self) -> &'static str {
        "glu"
    }

    fn backward(&self, parents: &[Tensor], _out: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let h = self.half;
        let x = parents[0].data();
        let mut gx = vec![0.0; x.len()];
        for ((gx, row), g) in gx.chunks_mut(2 * h).zip(x.chunks(2 * h)).zip(grad.chunks(h)) {
            for i in 0..h {
                let s = sigmoid(row[h + i]);
                gx[i] = g[i] * s;
                gx[h + i] = g[i] * row[i] * s * (1.0 - s);
            }
        }
        vec![Some(gx)]
    }
}

// ---------------------------------------------------------------------------

struct DepthwiseConv {
    time: usize,
    channels: usize,
    kernel: usize,
}

/// Per-channel convolution along time with zero "same" padding.
///
/// `x` is `[T, C]`, `kernels` is `[C, K]`; output is `[T, C]` with
/// `y[t, c] = sum_j kernels[c, j] * x[t + j - K/2, c]`.
pub fn depthwise_conv1d(x: &Tensor, kernels: &Tensor, kernel_size: usize) -> Result<Tensor> {
    if kernel_size.is_multiple_of(2) {
        return Err(cfg_err!("depthwise kernel size must be odd, got {kernel_size}"));
    }
    let (xs, ks) = (x.shape(), kernels.shape());
    if xs.len() != 2 || ks != [xs[1], kernel_size] {
        return Err(dim_err!("depthwise conv expects x [T, C] and kernels [C, {kernel_size}], got {xs:?} and {ks:?}"));
    }
    let (t_len, c) = (xs[0], xs[1]);
    let pad = kernel_size / 2;
    let (xd, kd) = (x.data(), kernels.data());
    let mut out = vec![0.0; t_len * c];
    for j in 0..kernel_size {
        // source frame for output t is t + j - pad
        let lo = pad.saturating_sub(j);
        let hi = (t_len + pad).saturating_sub(j).min(t_len);
        for t in lo..hi {
            let src = t + j - pad;
            let o = &mut out[t * c..(t + 1) * c];
            let s = &xd[src * c..(src + 1) * c];
            for ch in 0..c {
                o[ch] += kd[ch * kernel_size + j] * s[ch];
            }
        }
    }
    Ok(Tensor::from_op(
        out,
        vec![t_len, c],
        vec![x.clone(), kernels.clone()],
        DepthwiseConv { time: t_len, channels: c, kernel: kernel_size },
    ))
}

impl Backward for DepthwiseConv {
    fn name(&self) -> &'static str {
        "depthwise_conv1d"
    }

    fn backward(&self, parents: &[Tensor], _out: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (t_len, c, k) = (self.time, self.channels, self.kernel);
        let pad = k / 2;
        let (xd, kd) = (parents[0].data(), parents[1].data());
        let mut gx = vec![0.0; t_len * c];
        let mut gk = vec![0.0; c * k];
        for j in 0..k {
            let lo = pad.saturating_sub(j);
            let hi = (t_len + pad).saturating_sub(j).min(t_len);
            for t in lo..hi {
                let src = t + j - pad;
                let g = &grad[t * c..(t + 1) * c];
                for ch in 0..c {
                    gx[src * c + ch] += g[ch] * kd[ch * k + j];
                    gk[ch * k + j] += g[ch] * xd[src * c + ch];
                }
            }
        }
        vec![parents[0].requires_grad().then_some(gx), parents[1].requires_grad().then_some(gk)]
    }
}

// ---------------------------------------------------------------------------

/// Bucket of the clipped relative offset `j - i` in a table of `2W + 1` rows.
pub(crate) fn rel_bucket(i: usize, j: usize, window: usize) -> usize {
    let d = j as isize - i as isize;
    (d.clamp(-(window as isize), window as isize) + window as isize) as usize
}

struct RelIndex {
    heads: usize,
    time: usize,
    window: usize,
    gather: bool,
}

fn rel_gather_raw(src: &[f64], heads: usize, t_len: usize, window: usize) -> Vec<f64> {
    let r = 2 * window + 1;
    let mut out = vec![0.0; heads * t_len * t_len];
    for h in 0..heads {
        for i in 0..t_len {
            let s = &src[(h * t_len + i) * r..][..r];
            let o = &mut out[(h * t_len + i) * t_len..][..t_len];
            for (j, v) in o.iter_mut().enumerate() {
                *v = s[rel_bucket(i, j, window)];
            }
        }
    }
    out
}

fn rel_scatter_raw(src: &[f64], heads: usize, t_len: usize, window: usize) -> Vec<f64> {
    let r = 2 * window + 1;
    let mut out = vec![0.0; heads * t_len * r];
    for h in 0..heads {
        for i in 0..t_len {
            let s = &src[(h * t_len + i) * t_len..][..t_len];
            let o = &mut out[(h * t_len + i) * r..][..r];
            for (j, v) in s.iter().enumerate() {
                o[rel_bucket(i, j, window)] += v;
            }
        }
    }
    out
}

impl Backward for RelIndex {
    fn name(&self) -> &'static str {
        if self.gather {
            "rel_gather"
        } else {
            "rel_scatter"
        }
    }

    fn backward(&self, _parents: &[Tensor], _out: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        // the two index maps are adjoint to each other
        let g = if self.gather {
            rel_scatter_raw(grad, self.heads, self.time, self.window)
        } else {
            rel_gather_raw(grad, self.heads, self.time, self.window)
        };
        vec![Some(g)]
    }
}

/// `[H, T, 2W+1]` per-offset scores to `[H, T, T]` pairwise scores:
/// `out[h, i, j] = rel[h, i, clip(j - i) + W]`.
pub fn rel_gather(rel: &Tensor, window: usize) -> Result<Tensor> {
    let s = rel.shape();
    if s.len() != 3 || s[2] != 2 * window + 1 {
        return Err(dim_err!("rel_gather expects [H, T, {}], got {s:?}", 2 * window + 1));
    }
    let (heads, t_len) = (s[0], s[1]);
    let out = rel_gather_raw(rel.data(), heads, t_len, window);
    Ok(Tensor::from_op(out, vec![heads, t_len, t_len], vec![rel.clone()], RelIndex {
        heads,
        time: t_len,
        window,
        gather: true,
    }))
}

/// Adjoint of [`rel_gather`]: sums `[H, T, T]` weights into their offset
/// buckets, giving `[H, T, 2W+1]`.
pub fn rel_scatter(weights: &Tensor, window: usize) -> Result<Tensor> {
    let s = weights.shape();
    if s.len() != 3 || s[1] != s[2] {
        return Err(dim_err!("rel_scatter expects [H, T, T], got {s:?}"));
    }
    let (heads, t_len) = (s[0], s[1]);
    let out = rel_scatter_raw(weights.data(), heads, t_len, window);
    Ok(Tensor::from_op(out, vec![heads, t_len, 2 * window + 1], vec![weights.clone()], RelIndex {
        heads,
        time: t_len,
        window,
        gather: false,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_norm_examples() {
        let one = Tensor::new(vec![1.0; 2], &[2]);
        let zero = Tensor::zeros(&[2]);
        let c = layer_norm(&Tensor::new(vec![4.0, 4.0], &[1, 2]), &one, &zero, 1e-5).unwrap();
        assert_eq!(c.data(), &[0.0, 0.0]);
        let y = layer_norm(&Tensor::new(vec![1.0, 3.0], &[1, 2]), &one, &zero, 0.0).unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);
        let empty = Tensor::scalar(1.0).reshape(&[1]).unwrap();
        assert!(layer_norm(&empty, &zero, &zero, 1e-5).is_err());
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(Tensor::new(vec![0.0, 0.0], &[2]).softmax().data(), &[0.5, 0.5]);
        let s = Tensor::new(vec![1f64.ln(), 3f64.ln()], &[2]).softmax();
        assert!((s.data()[0] - 0.25).abs() < 1e-15 && (s.data()[1] - 0.75).abs() < 1e-15);
        let x = Tensor::new(vec![0.3, -2.0, 5.0], &[3]);
        let shifted = x.add_scalar(123.4).softmax();
        for (a, b) in x.softmax().data().iter().zip(shifted.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_examples() {
        let x = Tensor::new(vec![1.0, 2.0, 3.0], &[3, 1]);
        let ones = Tensor::new(vec![1.0; 3], &[1, 3]);
        assert_eq!(depthwise_conv1d(&x, &ones, 3).unwrap().data(), &[3.0, 6.0, 5.0]);
        let delta = Tensor::new(vec![0.0, 1.0, 0.0], &[1, 3]);
        assert_eq!(depthwise_conv1d(&x, &delta, 3).unwrap().data(), x.data());
        let even = Tensor::new(vec![1.0; 2], &[1, 2]);
        assert!(matches!(depthwise_conv1d(&x, &even, 2), Err(crate::Error::Config(_))));
    }

    #[test]
    fn glu_zero_gate_halves() {
        let x = Tensor::new(vec![3.0, -8.0, 0.0, 0.0], &[1, 4]);
        assert_eq!(x.glu().unwrap().data(), &[1.5, -4.0]);
    }

    #[test]
    fn rel_gather_scatter_are_adjoint() {
        let (h, t, w) = (2, 5, 2);
        let a: Vec<f64> = (0..h * t * (2 * w + 1)).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..h * t * t).map(|i| (i as f64 * 0.11).cos()).collect();
        let ga = rel_gather_raw(&a, h, t, w);
        let sb = rel_scatter_raw(&b, h, t, w);
        let lhs: f64 = ga.iter().zip(&b).map(|(x, y)| x * y).sum();
        let rhs: f64 = a.iter().zip(&sb).map(|(x, y)| x * y).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
