//! The conformer block: `z1 = z0 + MHSA(ln z0)`, `z2 = z1 + CONV(ln z1)`,
//! `z3 = z2 + FFN(ln z2)`. Single FFN, no macaron halves, no final norm.
//!
//! Parameters live in a flat [`ParamStore`] under a caller-chosen prefix;
//! see [`init_block`] for the names.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{cfg_err, dim_err, Result};
use crate::tensor::{depthwise_conv1d, layer_norm, matmul, rel_gather, rel_scatter, Bound, ParamStore, Tensor};

pub const LN_EPS: f64 = 1e-5;

/// Shape of one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockDims {
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub conv_channels: usize,
    pub conv_kernel: usize,
    pub rel_window: usize,
    pub se_reduction: usize,
}

impl BlockDims {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(cfg_err!("attention dim {} not divisible by {} heads", self.dim, self.heads));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return Err(cfg_err!("conv kernel must be odd, got {}", self.conv_kernel));
        }
        if self.ffn_dim == 0 || self.conv_channels == 0 || self.se_reduction == 0 {
            return Err(cfg_err!("block widths must be positive"));
        }
        Ok(())
    }

    pub fn se_hidden(&self) -> usize {
        (self.dim / self.se_reduction).max(1)
    }

    fn rel_rows(&self) -> usize {
        2 * self.rel_window + 1
    }

    /// Scalar parameter count of one block.
    pub fn param_count(&self) -> usize {
        let (d, cc, k) = (self.dim, self.conv_channels, self.conv_kernel);
        let lin = |i: usize, o: usize| i * o + o;
        let ln = 2 * d;
        let mhsa = ln + 4 * lin(d, d) + 2 * self.rel_rows() * d;
        let conv = ln + lin(d, 2 * cc) + cc * k + cc + 2 * cc + lin(cc, d) + lin(d, self.se_hidden()) + lin(self.se_hidden(), d);
        let ffn = ln + lin(d, self.ffn_dim) + lin(self.ffn_dim, d);
        mhsa + conv + ffn
    }
}

pub(crate) fn init_linear(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
    store.init_uniform(&format!("{name}.w"), &[fan_in, fan_out], fan_in, rng);
    store.init_const(&format!("{name}.b"), &[fan_out], 0.0);
}

pub(crate) fn init_norm(store: &mut ParamStore, name: &str, width: usize) {
    store.init_const(&format!("{name}.g"), &[width], 1.0);
    store.init_const(&format!("{name}.b"), &[width], 0.0);
}

/// Registers one block's parameters under `prefix`. Weights are uniform in
/// `+-1/sqrt(fan_in)`; biases and relative embeddings start at zero; norm
/// gains at one.
pub fn init_block(store: &mut ParamStore, prefix: &str, d: &BlockDims, rng: &mut impl Rng) {
    let p = |s: &str| format!("{prefix}.{s}");
    init_norm(store, &p("mhsa.ln"), d.dim);
    for w in ["q", "k", "v", "o"] {
        init_linear(store, &p(&format!("mhsa.{w}")), d.dim, d.dim, rng);
    }
    store.init_const(&p("mhsa.rel_k"), &[d.rel_rows(), d.dim], 0.0);
    store.init_const(&p("mhsa.rel_v"), &[d.rel_rows(), d.dim], 0.0);
    init_norm(store, &p("conv.ln"), d.dim);
    init_linear(store, &p("conv.pw1"), d.dim, 2 * d.conv_channels, rng);
    store.init_uniform(&p("conv.dw.k"), &[d.conv_channels, d.conv_kernel], d.conv_kernel, rng);
    store.init_const(&p("conv.dw.b"), &[d.conv_channels], 0.0);
    init_norm(store, &p("conv.norm"), d.conv_channels);
    init_linear(store, &p("conv.pw2"), d.conv_channels, d.dim, rng);
    init_linear(store, &p("conv.se1"), d.dim, d.se_hidden(), rng);
    init_linear(store, &p("conv.se2"), d.se_hidden(), d.dim, rng);
    init_norm(store, &p("ffn.ln"), d.dim);
    init_linear(store, &p("ffn.w1"), d.dim, d.ffn_dim, rng);
    init_linear(store, &p("ffn.w2"), d.ffn_dim, d.dim, rng);
}

/// Zeroes the three residual-branch output projections, making the block an
/// identity map.
pub fn zero_block_outputs(store: &mut ParamStore, prefix: &str) {
    for name in ["mhsa.o.w", "mhsa.o.b", "conv.pw2.w", "conv.pw2.b", "ffn.w2.w", "ffn.w2.b"] {
        if let Some(a) = store.get_mut(&format!("{prefix}.{name}")) {
            a.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

pub fn linear(x: &Tensor, p: &Bound, name: &str) -> Result<Tensor> {
    matmul(x, p.get(&format!("{name}.w"))?)?.add(p.get(&format!("{name}.b"))?)
}

pub fn norm(x: &Tensor, p: &Bound, name: &str) -> Result<Tensor> {
    layer_norm(x, p.get(&format!("{name}.g"))?, p.get(&format!("{name}.b"))?, LN_EPS)
}

fn time_len(x: &Tensor, d: &BlockDims) -> Result<usize> {
    match x.shape() {
        [t, w] if *w == d.dim => Ok(*t),
        s => Err(dim_err!("block input must be [T, {}], got {s:?}", d.dim)),
    }
}

/// `[T, H*dk]` to `[H, T, dk]`.
pub(crate) fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (t, w) = (x.shape()[0], x.shape()[1]);
    x.reshape(&[t, heads, w / heads])?.permute(&[1, 0, 2])
}

pub(crate) fn merge_heads(x: &Tensor) -> Result<Tensor> {
    let (h, t, dk) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    x.permute(&[1, 0, 2])?.reshape(&[t, h * dk])
}

/// Self-attention with learned relative positions: scores
/// `q_i . (k_j + a^K_{clip(j-i)})` and outputs
/// `sum_j alpha_ij (v_j + a^V_{clip(j-i)})`. Returns the output and the
/// `[H, T, T]` attention weights.
pub fn mhsa_with_weights(x: &Tensor, p: &Bound, prefix: &str, d: &BlockDims) -> Result<(Tensor, Tensor)> {
    let t = time_len(x, d)?;
    let (h, dk) = (d.heads, d.dim / d.heads);
    let q = split_heads(&linear(x, p, &format!("{prefix}.q"))?, h)?;
    let k = split_heads(&linear(x, p, &format!("{prefix}.k"))?, h)?;
    let v = split_heads(&linear(x, p, &format!("{prefix}.v"))?, h)?;
    // offsets beyond T-1 never occur, so only the central rows are needed
    let w = d.rel_window.min(t - 1);
    let rows = 2 * w + 1;
    let table = |name: &str| -> Result<Tensor> {
        p.get(&format!("{prefix}.{name}"))?.narrow(0, d.rel_window - w, rows)?.reshape(&[rows, h, dk])
    };
    let rel_k = table("rel_k")?.permute(&[1, 2, 0])?;
    let rel_v = table("rel_v")?.permute(&[1, 0, 2])?;
    let content = matmul(&q, &k.transpose_last()?)?;
    let position = rel_gather(&matmul(&q, &rel_k)?, w)?;
    let attn = content.add(&position)?.scale(1.0 / (dk as f64).sqrt()).softmax();
    let ctx = matmul(&attn, &v)?.add(&matmul(&rel_scatter(&attn, w)?, &rel_v)?)?;
    Ok((linear(&merge_heads(&ctx)?, p, &format!("{prefix}.o"))?, attn))
}

pub fn mhsa_relpos(x: &Tensor, p: &Bound, prefix: &str, d: &BlockDims) -> Result<Tensor> {
    Ok(mhsa_with_weights(x, p, prefix, d)?.0)
}

/// Pointwise expand, GLU, depthwise conv, layer norm, swish, pointwise
/// project, then squeeze-and-excitation over the projected channels.
pub fn conv_module_se(x: &Tensor, p: &Bound, prefix: &str, d: &BlockDims) -> Result<Tensor> {
    time_len(x, d)?;
    let n = |s: &str| format!("{prefix}.{s}");
    let y = linear(x, p, &n("pw1"))?.glu()?;
    let y = depthwise_conv1d(&y, p.get(&n("dw.k"))?, d.conv_kernel)?.add(p.get(&n("dw.b"))?)?;
    let y = norm(&y, p, &n("norm"))?.swish();
    let y = linear(&y, p, &n("pw2"))?;
    let pooled = y.mean_axis(0)?.reshape(&[1, d.dim])?;
    let gate = linear(&linear(&pooled, p, &n("se1"))?.relu(), p, &n("se2"))?.sigmoid();
    y.mul(&gate.reshape(&[d.dim])?)
}

pub fn feed_forward(x: &Tensor, p: &Bound, prefix: &str) -> Result<Tensor> {
    linear(&linear(x, p, &format!("{prefix}.w1"))?.swish(), p, &format!("{prefix}.w2"))
}

pub fn conformer_block(z0: &Tensor, p: &Bound, prefix: &str, d: &BlockDims) -> Result<Tensor> {
    time_len(z0, d)?;
    let n = |s: &str| format!("{prefix}.{s}");
    let z1 = z0.add(&mhsa_relpos(&norm(z0, p, &n("mhsa.ln"))?, p, &n("mhsa"), d)?)?;
    let z2 = z1.add(&conv_module_se(&norm(&z1, p, &n("conv.ln"))?, p, &n("conv"), d)?)?;
    z2.add(&feed_forward(&norm(&z2, p, &n("ffn.ln"))?, p, &n("ffn"))?)
}
