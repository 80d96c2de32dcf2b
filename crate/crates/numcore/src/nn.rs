//! Composite layers built from graph primitives.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};

/// `x · w + b` over the last axis of `x`; `w` is `[in, out]`.
pub fn linear(g: &mut Graph, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let xs = g.shape(x).to_vec();
    let ws = g.shape(w).to_vec();
    let Some((&d_in, lead)) = xs.split_last() else {
        return Err(Error::Dimension("linear of a scalar".into()));
    };
    if ws.len() != 2 || ws[0] != d_in {
        return Err(Error::Dimension(format!(
            "linear: weight {ws:?} does not accept input {xs:?}"
        )));
    }
    let rows: usize = lead.iter().product();
    let flat = g.reshape(x, &[rows, d_in])?;
    let y = g.matmul(flat, w)?;
    let mut out_shape = lead.to_vec();
    out_shape.push(ws[1]);
    let y = g.reshape(y, &out_shape)?;
    match b {
        Some(b) => g.add_suffix(y, b),
        None => Ok(y),
    }
}

/// Projection weights of one multi-head self-attention layer.
#[derive(Debug, Clone, Copy)]
pub struct AttentionWeights {
    /// `[d, 3d]`, columns ordered query | key | value.
    pub w_qkv: Var,
    pub b_qkv: Var,
    /// `[d, d]`
    pub w_out: Var,
    pub b_out: Var,
}

/// Multi-head scaled dot-product self-attention over the sequence axis of
/// `x[L×d]` or `x[B×L×d]`. Output has the shape of `x`.
pub fn self_attention(g: &mut Graph, x: Var, num_heads: usize, w: AttentionWeights) -> Result<Var> {
    let xs = g.shape(x).to_vec();
    let (batch, len, d) = match xs.as_slice() {
        [l, d] => (1, *l, *d),
        [b, l, d] => (*b, *l, *d),
        _ => {
            return Err(Error::Dimension(format!(
                "self_attention expects [L, d] or [B, L, d], got {xs:?}"
            )))
        }
    };
    if num_heads == 0 || d % num_heads != 0 {
        return Err(Error::Config(format!(
            "feature dim {d} is not divisible by {num_heads} heads"
        )));
    }
    let dh = d / num_heads;
    let x3 = g.reshape(x, &[batch, len, d])?;
    let qkv = linear(g, x3, w.w_qkv, Some(w.b_qkv))?;
    let split = |g: &mut Graph, part: usize, perm: &[usize]| -> Result<Var> {
        let p = g.narrow(qkv, 2, part * d, d)?;
        let p = g.reshape(p, &[batch, len, num_heads, dh])?;
        let p = g.permute(p, perm)?;
        let s = g.shape(p).to_vec();
        g.reshape(p, &[batch * num_heads, s[2], s[3]])
    };
    let q = split(g, 0, &[0, 2, 1, 3])?;
    let kt = split(g, 1, &[0, 2, 3, 1])?;
    let v = split(g, 2, &[0, 2, 1, 3])?;
    let scores = g.batch_matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
    let att = g.softmax(scores)?;
    let out = g.batch_matmul(att, v)?;
    let out = g.reshape(out, &[batch, num_heads, len, dh])?;
    let out = g.permute(out, &[0, 2, 1, 3])?;
    let out = g.reshape(out, &[batch, len, d])?;
    let out = linear(g, out, w.w_out, Some(w.b_out))?;
    g.reshape(out, &xs)
}

/// Number of normalization groups for `channels`: 8, or one per channel
/// below 8 channels.
pub fn norm_groups(channels: usize) -> usize {
    if channels < 8 {
        channels
    } else {
        8
    }
}
