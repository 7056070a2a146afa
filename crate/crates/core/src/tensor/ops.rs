use super::{numel, Backward, Tensor};
use crate::error::{dim_err, Error, Result};

/// Pointwise operation kinds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Div,
    Sigmoid,
    Swish,
    Relu,
    Log,
    Exp,
}

/// Dispatches a pointwise operation by kind. Binary kinds need `y`.
pub fn elementwise(op: ElementwiseOp, x: &Tensor, y: Option<&Tensor>) -> Result<Tensor> {
    use ElementwiseOp::*;
    let need = |y: Option<&Tensor>| {
        y.cloned().ok_or_else(|| dim_err!("{op:?} needs a second operand"))
    };
    match op {
        Add => x.add(&need(y)?),
        Sub => x.sub(&need(y)?),
        Mul => x.mul(&need(y)?),
        Div => x.div(&need(y)?),
        Sigmoid => Ok(x.sigmoid()),
        Swish => Ok(x.swish()),
        Relu => Ok(x.relu()),
        Log => x.log(),
        Exp => Ok(x.exp()),
    }
}

#[derive(Clone, Copy)]
enum Bin {
    Add,
    Sub,
    Mul,
    Div,
}

struct BinaryOp(Bin);

fn broadcast_len(a: &[usize], b: &[usize]) -> Result<usize> {
    let nb = numel(b);
    if a == b || nb == 1 || (b.len() <= a.len() && a[a.len() - b.len()..] == *b) {
        Ok(nb)
    } else {
        Err(dim_err!("cannot broadcast {b:?} onto {a:?}"))
    }
}

impl Backward for BinaryOp {
    fn name(&self) -> &'static str {
        match self.0 {
            Bin::Add => "add",
            Bin::Sub => "sub",
            Bin::Mul => "mul",
            Bin::Div => "div",
        }
    }

    fn backward(&self, parents: &[Tensor], _out: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (a, b) = (&parents[0], &parents[1]);
        let nb = b.numel();
        let (ad, bd) = (a.data(), b.data());
        let ga = a.requires_grad().then(|| match self.0 {
            Bin::Add | Bin::Sub => grad.to_vec(),
            Bin::Mul => grad.iter().enumerate().map(|(i, g)| g * bd[i % nb]).collect(),
            Bin::Div => grad.iter().enumerate().map(|(i, g)| g / bd[i % nb]).collect(),
        });
        let gb = b.requires_grad().then(|| {
            let mut gb = vec![0.0; nb];
            for (i, g) in grad.iter().enumerate() {
                let j = i % nb;
                gb[j] += match self.0 {
                    Bin::Add => *g,
                    Bin::Sub => -g,
                    Bin::Mul => g * ad[i],
                    Bin::Div => -g * ad[i] / (bd[j] * bd[j]),
                };
            }
            gb
        });
        vec![ga, gb]
    }
}

fn binary(a: &Tensor, b: &Tensor, kind: Bin) -> Result<Tensor> {
    let nb = broadcast_len(a.shape(), b.shape())?;
    let bd = b.data();
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let y = bd[i % nb];
            match kind {
                Bin::Add => x + y,
                Bin::Sub => x - y,
                Bin::Mul => x * y,
                Bin::Div => x / y,
            }
        })
        .collect();
    Ok(Tensor::from_op(data, a.shape().to_vec(), vec![a.clone(), b.clone()], BinaryOp(kind)))
}

#[derive(Clone, Copy)]
enum Un {
    Scale(f64),
    AddScalar(f64),
    Sigmoid,
    Swish,
    Relu,
    Log,
    LogClamped(f64),
    Exp,
    Sqrt,
    Square,
    ClampMin(f64),
}

struct UnaryOp(Un);

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Backward for UnaryOp {
    fn name(&self) -> &'static str {
        match self.0 {
            Un::Scale(_) => "scale",
            Un::AddScalar(_) => "add_scalar",
            Un::Sigmoid => "sigmoid",
            Un::Swish => "swish",
            Un::Relu => "relu",
            Un::Log => "log",
            Un::LogClamped(_) => "log_clamped",
            Un::Exp => "exp",
            Un::Sqrt => "sqrt",
            Un::Square => "square",
            Un::ClampMin(_) => "clamp_min",
        }
    }

    fn backward(&self, parents: &[Tensor], out: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let x = parents[0].data();
        let y = out.data();
        let g: Vec<f64> = (0..grad.len())
            .map(|i| {
                let d = match self.0 {
                    Un::Scale(c) => c,
                    Un::AddScalar(_) => 1.0,
                    Un::Sigmoid => y[i] * (1.0 - y[i]),
                    Un::Swish => {
                        let s = sigmoid(x[i]);
                        s + x[i] * s * (1.0 - s)
                    }
                    Un::Relu => f64::from(u8::from(x[i] > 0.0)),
                    Un::Log => 1.0 / x[i],
                    Un::LogClamped(eps) => {
                        if x[i] > eps {
                            1.0 / x[i]
                        } else {
                            0.0
                        }
                    }
                    Un::Exp => y[i],
                    Un::Sqrt => {
                        if y[i] > 0.0 {
                            0.5 / y[i]
                        } else {
                            0.0
                        }
                    }
                    Un::Square => 2.0 * x[i],
                    Un::ClampMin(c) => f64::from(u8::from(x[i] > c)),
                };
                grad[i] * d
            })
            .collect();
        vec![Some(g)]
    }
}

fn unary(x: &Tensor, kind: Un) -> Tensor {
    let data = x
        .data()
        .iter()
        .map(|&v| match kind {
            Un::Scale(c) => v * c,
            Un::AddScalar(c) => v + c,
            Un::Sigmoid => sigmoid(v),
            Un::Swish => v * sigmoid(v),
            Un::Relu => v.max(0.0),
            Un::Log => v.ln(),
            Un::LogClamped(eps) => v.max(eps).ln(),
            Un::Exp => v.exp(),
            Un::Sqrt => v.sqrt(),
            Un::Square => v * v,
            Un::ClampMin(c) => v.max(c),
        })
        .collect();
    Tensor::from_op(data, x.shape().to_vec(), vec![x.clone()], UnaryOp(kind))
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, Bin::Add)
    }
    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, Bin::Sub)
    }
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, Bin::Mul)
    }
    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, Bin::Div)
    }
    pub fn scale(&self, c: f64) -> Tensor {
        unary(self, Un::Scale(c))
    }
    pub fn neg(&self) -> Tensor {
        unary(self, Un::Scale(-1.0))
    }
    pub fn add_scalar(&self, c: f64) -> Tensor {
        unary(self, Un::AddScalar(c))
    }
    pub fn sigmoid(&self) -> Tensor {
        unary(self, Un::Sigmoid)
    }
    /// `x * sigmoid(x)`
    pub fn swish(&self) -> Tensor {
        unary(self, Un::Swish)
    }
    pub fn relu(&self) -> Tensor {
        unary(self, Un::Relu)
    }
    pub fn exp(&self) -> Tensor {
        unary(self, Un::Exp)
    }
    pub fn sqrt(&self) -> Tensor {
        unary(self, Un::Sqrt)
    }
    pub fn square(&self) -> Tensor {
        unary(self, Un::Square)
    }
    pub fn clamp_min(&self, c: f64) -> Tensor {
        unary(self, Un::ClampMin(c))
    }

    /// Natural log; any non-positive entry is a domain error.
    pub fn log(&self) -> Result<Tensor> {
        if let Some(v) = self.data().iter().find(|v| **v <= 0.0 || v.is_nan()) {
            return Err(Error::Domain(format!("log of non-positive value {v}")));
        }
        Ok(unary(self, Un::Log))
    }

    /// `ln(max(x, eps))`, with zero gradient where the floor is active.
    pub fn log_clamped(&self, eps: f64) -> Tensor {
        unary(self, Un::LogClamped(eps))
    }
}

// ---------------------------------------------------------------------------
// matmul

struct MatMul {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    b_shared: bool,
}

/// `c[bt] (+)= a[bt] · b[bt]` with explicit strides; `accumulate` keeps `c`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: the caller sizes every slice for the strides given; indices
    // touched by dgemm stay within (m-1)*rs + (k-1)*cs for each operand.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            if accumulate { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Backward for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(&self, parents: &[Tensor], _out: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (a, b) = (&parents[0], &parents[1]);
        let (m, k, n) = (self.m, self.k, self.n);
        let ga = a.requires_grad().then(|| {
            let mut ga = vec![0.0; self.batch * m * k];
            for bt in 0..self.batch {
                let boff = if self.b_shared { 0 } else { bt * k * n };
                // g (m×n) · bᵀ (n×k)
                gemm(
                    m,
                    n,
                    k,
                    &grad[bt * m * n..],
                    n as isize,
                    1,
                    &b.data()[boff..],
                    1,
                    n as isize,
                    &mut ga[bt * m * k..],
                    false,
                );
            }
            ga
        });
        let gb = b.requires_grad().then(|| {
            if self.b_shared {
                let mut gb = vec![0.0; k * n];
                let rows = self.batch * m;
                gemm(k, rows, n, a.data(), 1, k as isize, grad, n as isize, 1, &mut gb, false);
                gb
            } else {
                let mut gb = vec![0.0; self.batch * k * n];
                for bt in 0..self.batch {
                    gemm(
                        k,
                        m,
                        n,
                        &a.data()[bt * m * k..],
                        1,
                        k as isize,
                        &grad[bt * m * n..],
                        n as isize,
                        1,
                        &mut gb[bt * k * n..],
                        false,
                    );
                }
                gb
            }
        });
        vec![ga, gb]
    }
}

/// Matrix product over the last two axes. `b` is either 2-D (shared across
/// all leading axes of `a`) or has the same leading axes as `a`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() < 2 || sb.len() < 2 {
        return Err(dim_err!("matmul needs rank >= 2 operands, got {sa:?} and {sb:?}"));
    }
    let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
    if k != k2 {
        return Err(dim_err!("matmul inner dimensions differ: {sa:?} x {sb:?}"));
    }
    let batch = numel(&sa[..sa.len() - 2]);
    let b_shared = sb.len() == 2;
    if !b_shared && sb[..sb.len() - 2] != sa[..sa.len() - 2] {
        return Err(dim_err!("matmul batch dimensions differ: {sa:?} x {sb:?}"));
    }
    let mut out = vec![0.0; batch * m * n];
    if b_shared {
        gemm(batch * m, k, n, a.data(), k as isize, 1, b.data(), n as isize, 1, &mut out, false);
    } else {
        for bt in 0..batch {
            gemm(
                m,
                k,
                n,
                &a.data()[bt * m * k..],
                k as isize,
                1,
                &b.data()[bt * k * n..],
                n as isize,
                1,
                &mut out[bt * m * n..],
                false,
            );
        }
    }
    let mut shape = sa[..sa.len() - 2].to_vec();
    shape.extend([m, n]);
    Ok(Tensor::from_op(out, shape, vec![a.clone(), b.clone()], MatMul { batch, m, k, n, b_shared }))
}

// ---------------------------------------------------------------------------
// reductions

struct SumAxis {
    outer: usize,
    len: usize,
    inner: usize,
    scale: f64,
}

impl Backward for SumAxis {
    fn name(&self) -> &'static str {
        "sum_axis"
    }

    fn backward(&self, _parents: &[Tensor], _out: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let mut g = vec![0.0; self.outer * self.len * self.inner];
        for o in 0..self.outer {
            for l in 0..self.len {
                let dst = &mut g[(o * self.len + l) * self.inner..][..self.inner];
                let src = &grad[o * self.inner..][..self.inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s * self.scale;
                }
            }
        }
        vec![Some(g)]
    }
}

impl Tensor {
    fn reduce_axis(&self, axis: usize, mean: bool) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(dim_err!("axis {axis} out of range for {shape:?}"));
        }
        let outer = numel(&shape[..axis]);
        let len = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let scale = if mean { 1.0 / len as f64 } else { 1.0 };
        let mut out = vec![0.0; outer * inner];
        let d = self.data();
        for o in 0..outer {
            let dst = &mut out[o * inner..][..inner];
            for l in 0..len {
                for (acc, v) in dst.iter_mut().zip(&d[(o * len + l) * inner..][..inner]) {
                    *acc += v;
                }
            }
            if mean {
                dst.iter_mut().for_each(|v| *v *= scale);
            }
        }
        let mut out_shape: Vec<usize> =
            shape.iter().enumerate().filter(|(i, _)| *i != axis).map(|(_, d)| *d).collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        Ok(Tensor::from_op(out, out_shape, vec![self.clone()], SumAxis { outer, len, inner, scale }))
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce_axis(axis, false)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce_axis(axis, true)
    }

    pub fn sum_all(&self) -> Tensor {
        let n = self.numel();
        let total = self.data().iter().sum();
        Tensor::from_op(vec![total], vec![1], vec![self.clone()], SumAxis {
            outer: 1,
            len: n,
            inner: 1,
            scale: 1.0,
        })
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel();
        let total: f64 = self.data().iter().sum();
        Tensor::from_op(vec![total / n as f64], vec![1], vec![self.clone()], SumAxis {
            outer: 1,
            len: n,
            inner: 1,
            scale: 1.0 / n as f64,
        })
    }

    /// Frobenius norm over all entries. The gradient at the origin is taken
    /// to be zero.
    pub fn frobenius(&self) -> Tensor {
        let norm = self.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        Tensor::from_op(vec![norm], vec![1], vec![self.clone()], Frobenius)
    }
}

struct Frobenius;

impl Backward for Frobenius {
    fn name(&self) -> &'static str {
        "frobenius"
    }

    fn backward(&self, parents: &[Tensor], out: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let norm = out.data()[0];
        let x = parents[0].data();
        let g = if norm > 0.0 {
            let s = grad[0] / norm;
            x.iter().map(|v| v * s).collect()
        } else {
            vec![0.0; x.len()]
        };
        vec![Some(g)]
    }
}

// ---------------------------------------------------------------------------
// shape manipulation

struct Reshape;

impl Backward for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, _p: &[Tensor], _out: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        vec![Some(grad.to_vec())]
    }
}

struct Permute {
    /// out flat index -> input flat index
    map: Vec<usize>,
}

impl Backward for Permute {
    fn name(&self) -> &'static str {
        "permute"
    }
    fn backward(&self, parents: &[Tensor], _out: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let mut g = vec![0.0; parents[0].numel()];
        for (o, &i) in self.map.iter().enumerate() {
            g[i] = grad[o];
        }
        vec![Some(g)]
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

struct Narrow {
    outer: usize,
    len: usize,
    start: usize,
    take: usize,
    inner: usize,
}

impl Backward for Narrow {
    fn name(&self) -> &'static str {
        "narrow"
    }
    fn backward(&self, _p: &[Tensor], _out: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let mut g = vec![0.0; self.outer * self.len * self.inner];
        let chunk = self.take * self.inner;
        for o in 0..self.outer {
            let dst = (o * self.len + self.start) * self.inner;
            g[dst..dst + chunk].copy_from_slice(&grad[o * chunk..(o + 1) * chunk]);
        }
        vec![Some(g)]
    }
}

struct Concat {
    outer: usize,
    inner: usize,
    lens: Vec<usize>,
}

impl Backward for Concat {
    fn name(&self) -> &'static str {
        "concat"
    }
    fn backward(&self, _p: &[Tensor], _out: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let total: usize = self.lens.iter().sum();
        let mut start = 0;
        self.lens
            .iter()
            .map(|&len| {
                let mut g = Vec::with_capacity(self.outer * len * self.inner);
                for o in 0..self.outer {
                    let src = (o * total + start) * self.inner;
                    g.extend_from_slice(&grad[src..src + len * self.inner]);
                }
                start += len;
                Some(g)
            })
            .collect()
    }
}

struct IndexSelect {
    indices: Vec<usize>,
    row: usize,
}

impl Backward for IndexSelect {
    fn name(&self) -> &'static str {
        "index_select"
    }
    fn backward(&self, parents: &[Tensor], _out: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let mut g = vec![0.0; parents[0].numel()];
        for (r, &idx) in self.indices.iter().enumerate() {
            let dst = &mut g[idx * self.row..][..self.row];
            for (d, s) in dst.iter_mut().zip(&grad[r * self.row..][..self.row]) {
                *d += s;
            }
        }
        vec![Some(g)]
    }
}

impl Tensor {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() || shape.contains(&0) {
            return Err(dim_err!("cannot reshape {:?} to {shape:?}", self.shape()));
        }
        Ok(Tensor::from_op(self.data().to_vec(), shape.to_vec(), vec![self.clone()], Reshape))
    }

    /// Reorders axes: output axis `i` is input axis `dims[i]`.
    pub fn permute(&self, dims: &[usize]) -> Result<Tensor> {
        let shape = self.shape();
        let mut seen = vec![false; shape.len()];
        if dims.len() != shape.len() || dims.iter().any(|&d| d >= shape.len() || std::mem::replace(&mut seen[d], true)) {
            return Err(dim_err!("invalid permutation {dims:?} for {shape:?}"));
        }
        let in_strides = strides(shape);
        let out_shape: Vec<usize> = dims.iter().map(|&d| shape[d]).collect();
        let n = self.numel();
        let mut map = Vec::with_capacity(n);
        let mut idx = vec![0usize; out_shape.len()];
        for _ in 0..n {
            map.push(idx.iter().zip(dims).map(|(i, &d)| i * in_strides[d]).sum());
            for ax in (0..idx.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < out_shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        let src = self.data();
        let data = map.iter().map(|&i| src[i]).collect();
        Ok(Tensor::from_op(data, out_shape, vec![self.clone()], Permute { map }))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self) -> Result<Tensor> {
        let r = self.shape().len();
        if r < 2 {
            return Err(dim_err!("transpose needs rank >= 2, got {:?}", self.shape()));
        }
        let mut dims: Vec<usize> = (0..r).collect();
        dims.swap(r - 2, r - 1);
        self.permute(&dims)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(dim_err!("narrow({axis}, {start}, {len}) out of range for {shape:?}"));
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let full = shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * full + start) * inner;
            data.extend_from_slice(&self.data()[s..s + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        Ok(Tensor::from_op(data, out_shape, vec![self.clone()], Narrow {
            outer,
            len: full,
            start,
            take: len,
            inner,
        }))
    }

    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| dim_err!("concat of zero tensors"))?;
        let shape = first.shape();
        if axis >= shape.len() {
            return Err(dim_err!("axis {axis} out of range for {shape:?}"));
        }
        for p in parts {
            let ps = p.shape();
            if ps.len() != shape.len()
                || ps.iter().zip(shape).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(dim_err!("cannot concat {ps:?} with {shape:?} along {axis}"));
            }
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let mut data = Vec::with_capacity(parts.iter().map(Tensor::numel).sum());
        for o in 0..outer {
            for (p, &len) in parts.iter().zip(&lens) {
                data.extend_from_slice(&p.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = lens.iter().sum();
        Ok(Tensor::from_op(data, out_shape, parts.to_vec(), Concat { outer, inner, lens }))
    }

    /// Gathers rows of a 2-D table.
    pub fn index_select(&self, indices: &[usize]) -> Result<Tensor> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(dim_err!("index_select needs a 2-D table, got {shape:?}"));
        }
        if indices.is_empty() {
            return Err(dim_err!("index_select with no indices"));
        }
        let (rows, row) = (shape[0], shape[1]);
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            if i >= rows {
                return Err(dim_err!("row index {i} out of range for {shape:?}"));
            }
            data.extend_from_slice(&self.data()[i * row..(i + 1) * row]);
        }
        Ok(Tensor::from_op(data, vec![indices.len(), row], vec![self.clone()], IndexSelect {
            indices: indices.to_vec(),
            row,
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul() {
        let a = Tensor::new(vec![0.3, -1.2, 4.0, 2.5], &[2, 2]);
        let i = Tensor::new(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]);
        assert_eq!(matmul(&i, &a).unwrap().data(), a.data());
    }

    #[test]
    fn small_matmul() {
        let a = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = Tensor::new(vec![1.0, 1.0], &[2, 1]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("x [2, 3]"), "{msg}");
    }

    #[test]
    fn sum_of_product_grad_is_b_transpose() {
        let a = Tensor::param(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let b = Tensor::new(vec![1.0, -1.0, 2.0, 0.5, 3.0, -2.0], &[3, 2]);
        matmul(&a, &b).unwrap().sum_all().backward().unwrap();
        // d/dA_ij sum(AB) = sum_k B_jk
        assert_eq!(a.grad().unwrap(), vec![0.0, 2.5, 1.0, 0.0, 2.5, 1.0]);
    }

    #[test]
    fn pointwise_examples() {
        assert_eq!(Tensor::scalar(0.0).sigmoid().item(), 0.5);
        let m = Tensor::new(vec![2.0, 4.0], &[2]).mul(&Tensor::new(vec![1.0, 0.0], &[2])).unwrap();
        assert_eq!(m.data(), &[2.0, 0.0]);
        assert!(matches!(Tensor::new(vec![1.0, 0.0], &[2]).log(), Err(Error::Domain(_))));
        let d = elementwise(ElementwiseOp::Sub, &Tensor::scalar(3.0), Some(&Tensor::scalar(1.0)));
        assert_eq!(d.unwrap().item(), 2.0);
        assert!(elementwise(ElementwiseOp::Add, &Tensor::scalar(3.0), None).is_err());
    }

    #[test]
    fn broadcast_rules() {
        let x = Tensor::zeros(&[3, 2]);
        assert!(x.add(&Tensor::zeros(&[2])).is_ok());
        assert!(x.add(&Tensor::scalar(1.0)).is_ok());
        assert!(x.add(&Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn permute_and_narrow() {
        let x = Tensor::new((0..6).map(f64::from).collect(), &[2, 3]);
        let t = x.transpose_last().unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        let n = x.narrow(1, 1, 2).unwrap();
        assert_eq!(n.data(), &[1.0, 2.0, 4.0, 5.0]);
        let c = Tensor::concat(&[x.narrow(1, 0, 1).unwrap(), n], 1).unwrap();
        assert_eq!(c.data(), x.data());
    }

    #[test]
    fn frobenius_zero_subgradient() {
        let x = Tensor::param(vec![0.0, 0.0], &[2]);
        x.frobenius().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.0]);
    }
}
