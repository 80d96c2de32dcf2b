//! Recorded computation tape with reverse-mode gradients.
//!
//! Every operation appends a node holding its output value. `backward` walks
//! the tape in reverse and returns gradients for the leaves that require them.
//! A fresh `Graph` is built per training step.

use std::collections::BTreeMap;

use crate::error::{dim_err, Error, Result};
use crate::gemm::{gemm, MatRef};
use crate::tensor::{ParameterSet, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddSuffix(Var, Var),
    AddPrefix(Var, Var),
    MulPrefix(Var, Var),
    AddAxis(Var, Var, usize),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Silu(Var),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    Conv1d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        stats: Vec<(f64, f64)>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    PadEnd {
        x: Var,
        axis: usize,
    },
    Upsample2(Var),
    Sinusoidal {
        x: Var,
        freqs: Vec<f64>,
    },
    MaskMul(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Parameter name → leaf handle for one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Precondition(format!("parameter `{name}` is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Adds the gradient of every bound parameter into `params`.
    pub fn accumulate(&self, grads: &Gradients, params: &mut ParameterSet) -> Result<()> {
        for (name, var) in &self.vars {
            if let Some(g) = grads.get(*var) {
                let t = params
                    .get_mut(name)
                    .ok_or_else(|| Error::Precondition(format!("unknown parameter `{name}`")))?;
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

/// Gradients of leaf nodes, produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Splits `shape` around `axis` into (outer, size, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn permutation_map(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = numel(shape);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    for _ in 0..total {
        map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

struct ConvDims {
    batch: usize,
    c_in: usize,
    len: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    len_out: usize,
}

/// Unfolds `x[B, Ci, L]` into `cols[Ci*K, B*Lout]`.
fn im2col(x: &[f64], d: &ConvDims) -> Vec<f64> {
    let mut cols = Vec::with_capacity(d.c_in * d.k * d.batch * d.len_out);
    for ci in 0..d.c_in {
        for kk in 0..d.k {
            for b in 0..d.batch {
                let xrow = &x[(b * d.c_in + ci) * d.len..(b * d.c_in + ci + 1) * d.len];
                if d.stride == 1 {
                    // output o reads input o + kk - pad
                    let shift = kk as isize - d.pad as isize;
                    let lo = (-shift).clamp(0, d.len_out as isize) as usize;
                    let hi = (d.len as isize - shift).clamp(lo as isize, d.len_out as isize) as usize;
                    cols.resize(cols.len() + lo, 0.0);
                    let start = (lo as isize + shift) as usize;
                    cols.extend_from_slice(&xrow[start..start + (hi - lo)]);
                    cols.resize(cols.len() + d.len_out - hi, 0.0);
                } else {
                    cols.extend((0..d.len_out).map(|o| {
                        let pos = (o * d.stride + kk) as isize - d.pad as isize;
                        if pos >= 0 && (pos as usize) < d.len {
                            xrow[pos as usize]
                        } else {
                            0.0
                        }
                    }));
                }
            }
        }
    }
    cols
}

fn col2im_add(dcols: &[f64], d: &ConvDims, dx: &mut [f64]) {
    let cols_w = d.batch * d.len_out;
    for ci in 0..d.c_in {
        for kk in 0..d.k {
            let row = &dcols[(ci * d.k + kk) * cols_w..(ci * d.k + kk + 1) * cols_w];
            for b in 0..d.batch {
                let base = (b * d.c_in + ci) * d.len;
                for o in 0..d.len_out {
                    let pos = (o * d.stride + kk) as isize - d.pad as isize;
                    if pos >= 0 && (pos as usize) < d.len {
                        dx[base + pos as usize] += row[b * d.len_out + o];
                    }
                }
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        if let Some(bad) = value.iter().position(|v| !v.is_finite()) {
            return Err(Error::Evaluation(format!(
                "non-finite value {} at flat index {bad} produced by {:?}-shaped node",
                value[bad], shape
            )));
        }
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a leaf. Leaves with `requires_grad` receive gradients in `backward`.
    pub fn leaf(&mut self, shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Result<Var> {
        if numel(shape) != data.len() {
            return dim_err(format!(
                "leaf of shape {shape:?} given {} values",
                data.len()
            ));
        }
        self.push(shape.to_vec(), data, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        self.leaf(shape, data, false)
    }

    pub fn tensor(&mut self, t: &Tensor) -> Result<Var> {
        self.leaf(t.shape(), t.data().to_vec(), t.requires_grad())
    }

    /// Records every parameter as a gradient-requiring leaf.
    pub fn bind(&mut self, params: &ParameterSet) -> Result<Bindings> {
        let mut vars = BTreeMap::new();
        for (name, t) in params.iter() {
            let v = self.leaf(t.shape(), t.data().to_vec(), true)?;
            vars.insert(name.to_string(), v);
        }
        Ok(Bindings { vars })
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        let needs = self.needs(a) || self.needs(b);
        self.push(self.shape(a).to_vec(), value, op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let value = self.value(a).iter().map(|x| x * s).collect();
        let needs = self.needs(a);
        self.push(self.shape(a).to_vec(), value, Op::Scale(a, s), needs)
    }

    /// `a + b` where `b`'s shape equals the trailing dimensions of `a` (bias add).
    pub fn add_suffix(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return dim_err(format!("add_suffix: {sb:?} is not a suffix of {sa:?}"));
        }
        let nb = self.value(b).len().max(1);
        let bv = self.value(b);
        let value = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv[i % nb])
            .collect();
        let needs = self.needs(a) || self.needs(b);
        self.push(sa.to_vec(), value, Op::AddSuffix(a, b), needs)
    }

    /// `a + b` where `b`'s shape equals the leading dimensions of `a`
    /// (per-channel offsets broadcast over the trailing axes).
    pub fn add_prefix(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[..sb.len()] != *sb {
            return dim_err(format!("add_prefix: {sb:?} is not a prefix of {sa:?}"));
        }
        let inner = numel(&sa[sb.len()..]);
        let bv = self.value(b);
        let value = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv[i / inner])
            .collect();
        let needs = self.needs(a) || self.needs(b);
        self.push(sa.to_vec(), value, Op::AddPrefix(a, b), needs)
    }

    /// `a * b` where `b`'s shape equals the leading dimensions of `a`
    /// (per-channel gains broadcast over the trailing axes).
    pub fn mul_prefix(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[..sb.len()] != *sb {
            return dim_err(format!("mul_prefix: {sb:?} is not a prefix of {sa:?}"));
        }
        let inner = numel(&sa[sb.len()..]);
        let bv = self.value(b);
        let value = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x * bv[i / inner])
            .collect();
        let needs = self.needs(a) || self.needs(b);
        self.push(sa.to_vec(), value, Op::MulPrefix(a, b), needs)
    }

    /// `a + b` where `b` is a vector broadcast along `axis` of `a`
    /// (per-channel bias).
    pub fn add_axis(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if axis >= sa.len() || sb != [sa[axis]] {
            return dim_err(format!("add_axis: {sb:?} does not match axis {axis} of {sa:?}"));
        }
        let (_, size, inner) = split_axis(sa, axis);
        let bv = self.value(b);
        let value = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv[(i / inner) % size])
            .collect();
        let needs = self.needs(a) || self.needs(b);
        self.push(sa.to_vec(), value, Op::AddAxis(a, b, axis), needs)
    }

    /// Matrix product of `a[m×k]` and `b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return dim_err(format!("matmul: cannot multiply {sa:?} by {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            MatRef::row_major(self.value(a), m, k),
            MatRef::row_major(self.value(b), k, n),
            &mut out,
            0.0,
        );
        let needs = self.needs(a) || self.needs(b);
        self.push(vec![m, n], out, Op::MatMul(a, b), needs)
    }

    /// Batched matrix product of `a[B×m×k]` and `b[B×k×n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return dim_err(format!("batch_matmul: cannot multiply {sa:?} by {sb:?}"));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        let (av, bv) = (self.value(a), self.value(b));
        for i in 0..bs {
            gemm(
                MatRef::row_major(&av[i * m * k..(i + 1) * m * k], m, k),
                MatRef::row_major(&bv[i * k * n..(i + 1) * k * n], k, n),
                &mut out[i * m * n..(i + 1) * m * n],
                0.0,
            );
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(vec![bs, m, n], out, Op::BatchMatMul(a, b), needs)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() {
            return dim_err(format!(
                "reshape: {:?} cannot become {shape:?}",
                self.shape(a)
            ));
        }
        let value = self.value(a).to_vec();
        let needs = self.needs(a);
        self.push(shape.to_vec(), value, Op::Reshape(a), needs)
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return dim_err(format!("permute: {perm:?} is not a permutation of {shape:?}"));
        }
        let map = permutation_map(&shape, perm);
        let src = self.value(a);
        let value = map.iter().map(|&i| src[i]).collect();
        let out_shape = perm.iter().map(|&p| shape[p]).collect();
        let needs = self.needs(a);
        self.push(out_shape, value, Op::Permute(a, map), needs)
    }

    /// Elementwise `x · sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).iter().map(|&x| x * sigmoid(x)).collect();
        let needs = self.needs(a);
        self.push(self.shape(a).to_vec(), value, Op::Silu(a), needs)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let width = *shape.last().ok_or_else(|| Error::Dimension("softmax of a scalar".into()))?;
        let mut value = self.value(a).to_vec();
        for row in value.chunks_mut(width.max(1)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        let needs = self.needs(a);
        self.push(shape, value, Op::Softmax(a), needs)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        let needs = self.needs(a);
        self.push(vec![], vec![s], Op::Sum(a), needs)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return dim_err("mean of an empty tensor");
        }
        let s = self.value(a).iter().sum::<f64>() / n as f64;
        let needs = self.needs(a);
        self.push(vec![], vec![s], Op::Mean(a), needs)
    }

    /// Mean of squared differences between two same-shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }

    /// 1-D cross-correlation of `x[B×Ci×L]` (or `x[Ci×L]`) with `w[Co×Ci×K]`,
    /// zero padding `pad` on both ends.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let unbatched = xs.len() == 2;
        let (batch, c_in, len) = match xs.as_slice() {
            [c, l] => (1, *c, *l),
            [b, c, l] => (*b, *c, *l),
            _ => return dim_err(format!("conv1d: input must be [C, L] or [B, C, L], got {xs:?}")),
        };
        let ws = self.shape(w).to_vec();
        if ws.len() != 3 || ws[1] != c_in {
            return dim_err(format!("conv1d: kernel {ws:?} does not match input {xs:?}"));
        }
        if !(1..=2).contains(&stride) {
            return Err(Error::Config(format!("conv1d: stride must be 1 or 2, got {stride}")));
        }
        let (c_out, k) = (ws[0], ws[2]);
        let span = len as isize + 2 * pad as isize - k as isize;
        if span < 0 {
            return dim_err(format!(
                "conv1d: kernel {k} with pad {pad} does not fit length {len}"
            ));
        }
        let len_out = span as usize / stride + 1;
        let d = ConvDims {
            batch,
            c_in,
            len,
            c_out,
            k,
            stride,
            pad,
            len_out,
        };
        let cols = im2col(self.value(x), &d);
        let mut out2 = vec![0.0; c_out * batch * len_out];
        gemm(
            MatRef::row_major(self.value(w), c_out, c_in * k),
            MatRef::row_major(&cols, c_in * k, batch * len_out),
            &mut out2,
            0.0,
        );
        let mut value = Vec::with_capacity(batch * c_out * len_out);
        for b in 0..batch {
            for co in 0..c_out {
                value.extend_from_slice(&out2[co * batch * len_out + b * len_out..][..len_out]);
            }
        }
        let shape = if unbatched {
            vec![c_out, len_out]
        } else {
            vec![batch, c_out, len_out]
        };
        let needs = self.needs(x) || self.needs(w);
        self.push(shape, value, Op::Conv1d { x, w, stride, pad }, needs)
    }

    /// Group normalization of `x[B×C×L]` with per-channel affine `gamma`, `beta`.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return dim_err(format!("group_norm: expected [B, C, L], got {xs:?}"));
        }
        let (batch, ch, len) = (xs[0], xs[1], xs[2]);
        if groups == 0 || ch % groups != 0 {
            return Err(Error::Config(format!(
                "group_norm: {ch} channels not divisible into {groups} groups"
            )));
        }
        if self.shape(gamma) != [ch] || self.shape(beta) != [ch] {
            return dim_err(format!(
                "group_norm: affine shapes {:?}/{:?} for {ch} channels",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        let per = ch / groups;
        let n = (per * len) as f64;
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let mut value = vec![0.0; xv.len()];
        let mut stats = Vec::with_capacity(batch * groups);
        for b in 0..batch {
            for g in 0..groups {
                let start = (b * ch + g * per) * len;
                let block = &xv[start..start + per * len];
                let mean = block.iter().sum::<f64>() / n;
                let var = block.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let rstd = 1.0 / (var + EPS).sqrt();
                stats.push((mean, rstd));
                for c in 0..per {
                    let chan = g * per + c;
                    for l in 0..len {
                        let i = start + c * len + l;
                        value[i] = (xv[i] - mean) * rstd * gv[chan] + bv[chan];
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            xs,
            value,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
            needs,
        )
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Dimension("concat of nothing".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return dim_err(format!("concat: axis {axis} out of range for {base:?}"));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return dim_err(format!("concat: {s:?} incompatible with {base:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut value = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let size = self.shape(*v)[axis];
                value.extend_from_slice(&self.value(*v)[o * size * inner..(o + 1) * size * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let needs = inputs.iter().any(|v| self.needs(*v));
        self.push(
            shape,
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            needs,
        )
    }

    /// Slice `[start, start+len)` of `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return dim_err(format!("narrow: [{start}, {}) outside axis {axis} of {shape:?}", start + len));
        }
        let (outer, size, inner) = split_axis(&shape, axis);
        let src = self.value(x);
        let mut value = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * size + start) * inner;
            value.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let needs = self.needs(x);
        self.push(out_shape, value, Op::Narrow { x, axis, start }, needs)
    }

    /// Appends `amount` zeros at the end of `axis`.
    pub fn pad_end(&mut self, x: Var, axis: usize, amount: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return dim_err(format!("pad_end: axis {axis} out of range for {shape:?}"));
        }
        let (outer, size, inner) = split_axis(&shape, axis);
        let src = self.value(x);
        let mut value = Vec::with_capacity(outer * (size + amount) * inner);
        for o in 0..outer {
            value.extend_from_slice(&src[o * size * inner..(o + 1) * size * inner]);
            value.extend(std::iter::repeat_n(0.0, amount * inner));
        }
        let mut out_shape = shape;
        out_shape[axis] += amount;
        let needs = self.needs(x);
        self.push(out_shape, value, Op::PadEnd { x, axis }, needs)
    }

    /// Nearest-neighbour upsampling by 2 along the last axis.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let mut shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return dim_err("upsample2 of a scalar");
        }
        let value = self.value(x).iter().flat_map(|&v| [v, v]).collect();
        *shape.last_mut().unwrap() *= 2;
        let needs = self.needs(x);
        self.push(shape, value, Op::Upsample2(x), needs)
    }

    /// Sinusoidal features: appends an axis of size `dim` holding
    /// `[sin(x·ω_0) … sin(x·ω_{d/2-1}), cos(x·ω_0) … cos(x·ω_{d/2-1})]`,
    /// `ω_i = max_period^(-2i/d)`.
    pub fn sinusoidal(&mut self, x: Var, dim: usize, max_period: f64) -> Result<Var> {
        if dim == 0 || !dim.is_multiple_of(2) {
            return Err(Error::Config(format!("sinusoidal dimension must be even and positive, got {dim}")));
        }
        let freqs = sinusoidal_frequencies(dim, max_period);
        let half = dim / 2;
        let mut value = Vec::with_capacity(self.value(x).len() * dim);
        for &v in self.value(x) {
            value.extend(freqs.iter().map(|w| (v * w).sin()));
            value.extend(freqs.iter().map(|w| (v * w).cos()));
        }
        debug_assert_eq!(freqs.len(), half);
        let mut shape = self.shape(x).to_vec();
        shape.push(dim);
        let needs = self.needs(x);
        self.push(shape, value, Op::Sinusoidal { x, freqs }, needs)
    }

    /// Elementwise product with a fixed mask (dropout).
    pub fn mask_mul(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return dim_err(format!(
                "mask of length {} for tensor of shape {:?}",
                mask.len(),
                self.shape(x)
            ));
        }
        let value = self.value(x).iter().zip(&mask).map(|(a, m)| a * m).collect();
        let needs = self.needs(x);
        self.push(self.shape(x).to_vec(), value, Op::MaskMul(x, mask), needs)
    }

    /// Reverse pass from a one-element `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return dim_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        if !self.needs(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.needs(v) {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(s) = self.slot(grads, v) {
                        s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                }
                if let Some(s) = self.slot(grads, *b) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s -= g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(s) = self.slot(grads, *a) {
                    for i in 0..s.len() {
                        s[i] += g[i] * bv[i];
                    }
                }
                if let Some(s) = self.slot(grads, *b) {
                    for i in 0..s.len() {
                        s[i] += g[i] * av[i];
                    }
                }
            }
            Op::Scale(a, k) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g * k);
                }
            }
            Op::AddSuffix(a, b) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                }
                if let Some(s) = self.slot(grads, *b) {
                    let nb = s.len().max(1);
                    for (i, gi) in g.iter().enumerate() {
                        s[i % nb] += gi;
                    }
                }
            }
            Op::AddPrefix(a, b) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                }
                if let Some(s) = self.slot(grads, *b) {
                    let inner = g.len() / s.len();
                    for (i, gi) in g.iter().enumerate() {
                        s[i / inner] += gi;
                    }
                }
            }
            Op::MulPrefix(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let inner = g.len() / bv.len().max(1);
                if let Some(s) = self.slot(grads, *a) {
                    for (i, gi) in g.iter().enumerate() {
                        s[i] += gi * bv[i / inner];
                    }
                }
                if let Some(s) = self.slot(grads, *b) {
                    for (i, gi) in g.iter().enumerate() {
                        s[i / inner] += gi * av[i];
                    }
                }
            }
            Op::AddAxis(a, b, axis) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                }
                if let Some(s) = self.slot(grads, *b) {
                    let (_, size, inner) = split_axis(&node.shape, *axis);
                    for (i, gi) in g.iter().enumerate() {
                        s[(i / inner) % size] += gi;
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let gm = MatRef::row_major(g, m, n);
                if self.needs(*a) {
                    let bv = MatRef::row_major(self.value(*b), k, n);
                    let s = self.slot(grads, *a).unwrap();
                    gemm(gm, bv.t(), s, 1.0);
                }
                if self.needs(*b) {
                    let av = MatRef::row_major(self.value(*a), m, k);
                    let s = self.slot(grads, *b).unwrap();
                    gemm(av.t(), gm, s, 1.0);
                }
            }
            Op::BatchMatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                if self.needs(*a) {
                    let bv = self.value(*b);
                    let s = self.slot(grads, *a).unwrap();
                    for i in 0..bs {
                        gemm(
                            MatRef::row_major(&g[i * m * n..(i + 1) * m * n], m, n),
                            MatRef::row_major(&bv[i * k * n..(i + 1) * k * n], k, n).t(),
                            &mut s[i * m * k..(i + 1) * m * k],
                            1.0,
                        );
                    }
                }
                if self.needs(*b) {
                    let av = self.value(*a);
                    let s = self.slot(grads, *b).unwrap();
                    for i in 0..bs {
                        gemm(
                            MatRef::row_major(&av[i * m * k..(i + 1) * m * k], m, k).t(),
                            MatRef::row_major(&g[i * m * n..(i + 1) * m * n], m, n),
                            &mut s[i * k * n..(i + 1) * k * n],
                            1.0,
                        );
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                }
            }
            Op::Permute(a, map) => {
                if let Some(s) = self.slot(grads, *a) {
                    for (j, &i) in map.iter().enumerate() {
                        s[i] += g[j];
                    }
                }
            }
            Op::Silu(a) => {
                let av = self.value(*a);
                if let Some(s) = self.slot(grads, *a) {
                    for i in 0..s.len() {
                        let sg = sigmoid(av[i]);
                        s[i] += g[i] * (sg + av[i] * sg * (1.0 - sg));
                    }
                }
            }
            Op::Softmax(a) => {
                let width = *node.shape.last().unwrap();
                if let Some(s) = self.slot(grads, *a) {
                    for (r, (yr, gr)) in node.value.chunks(width).zip(g.chunks(width)).enumerate() {
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for j in 0..width {
                            s[r * width + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    s.iter_mut().for_each(|s| *s += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    let k = g[0] / s.len() as f64;
                    s.iter_mut().for_each(|s| *s += k);
                }
            }
            Op::Conv1d { x, w, stride, pad } => {
                let xs = self.shape(*x);
                let (batch, c_in, len) = match xs {
                    [c, l] => (1, *c, *l),
                    [b, c, l] => (*b, *c, *l),
                    _ => unreachable!(),
                };
                let ws = self.shape(*w);
                let len_out = *node.shape.last().unwrap();
                let d = ConvDims {
                    batch,
                    c_in,
                    len,
                    c_out: ws[0],
                    k: ws[2],
                    stride: *stride,
                    pad: *pad,
                    len_out,
                };
                let cols_w = batch * len_out;
                let mut g2 = vec![0.0; d.c_out * cols_w];
                for b in 0..batch {
                    for co in 0..d.c_out {
                        g2[co * cols_w + b * len_out..][..len_out]
                            .copy_from_slice(&g[(b * d.c_out + co) * len_out..][..len_out]);
                    }
                }
                let g2m = MatRef::row_major(&g2, d.c_out, cols_w);
                if self.needs(*w) {
                    let cols = im2col(self.value(*x), &d);
                    let s = self.slot(grads, *w).unwrap();
                    gemm(g2m, MatRef::row_major(&cols, c_in * d.k, cols_w).t(), s, 1.0);
                }
                if self.needs(*x) {
                    let mut dcols = vec![0.0; c_in * d.k * cols_w];
                    gemm(
                        MatRef::row_major(self.value(*w), d.c_out, c_in * d.k).t(),
                        g2m,
                        &mut dcols,
                        0.0,
                    );
                    let s = self.slot(grads, *x).unwrap();
                    col2im_add(&dcols, &d, s);
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            } => {
                let (batch, ch, len) = (node.shape[0], node.shape[1], node.shape[2]);
                let per = ch / groups;
                let n = (per * len) as f64;
                let xv = self.value(*x);
                let gv = self.value(*gamma);
                let mut dgamma = vec![0.0; ch];
                let mut dbeta = vec![0.0; ch];
                let mut dx = if self.needs(*x) {
                    Some(vec![0.0; xv.len()])
                } else {
                    None
                };
                for b in 0..batch {
                    for gi in 0..*groups {
                        let (mean, rstd) = stats[b * groups + gi];
                        let start = (b * ch + gi * per) * len;
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for c in 0..per {
                            let chan = gi * per + c;
                            for l in 0..len {
                                let i = start + c * len + l;
                                let xhat = (xv[i] - mean) * rstd;
                                dgamma[chan] += g[i] * xhat;
                                dbeta[chan] += g[i];
                                let dxhat = g[i] * gv[chan];
                                sum_d += dxhat;
                                sum_dx += dxhat * xhat;
                            }
                        }
                        if let Some(dx) = dx.as_mut() {
                            let (md, mdx) = (sum_d / n, sum_dx / n);
                            for c in 0..per {
                                let chan = gi * per + c;
                                for l in 0..len {
                                    let i = start + c * len + l;
                                    let xhat = (xv[i] - mean) * rstd;
                                    dx[i] = rstd * (g[i] * gv[chan] - md - xhat * mdx);
                                }
                            }
                        }
                    }
                }
                if let (Some(dx), Some(s)) = (dx, self.slot(grads, *x)) {
                    s.iter_mut().zip(&dx).for_each(|(s, d)| *s += d);
                }
                if let Some(s) = self.slot(grads, *gamma) {
                    s.iter_mut().zip(&dgamma).for_each(|(s, d)| *s += d);
                }
                if let Some(s) = self.slot(grads, *beta) {
                    s.iter_mut().zip(&dbeta).for_each(|(s, d)| *s += d);
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(&node.shape, *axis);
                let mut offset = 0;
                for v in inputs {
                    let size = self.shape(*v)[*axis];
                    if let Some(s) = self.slot(grads, *v) {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..][..size * inner];
                            s[o * size * inner..][..size * inner]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(s, g)| *s += g);
                        }
                    }
                    offset += size;
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, size, inner) = split_axis(self.shape(*x), *axis);
                let len = node.shape[*axis];
                if let Some(s) = self.slot(grads, *x) {
                    for o in 0..outer {
                        let dst = &mut s[(o * size + start) * inner..][..len * inner];
                        dst.iter_mut()
                            .zip(&g[o * len * inner..][..len * inner])
                            .for_each(|(s, g)| *s += g);
                    }
                }
            }
            Op::PadEnd { x, axis } => {
                let (outer, size, inner) = split_axis(self.shape(*x), *axis);
                let padded = node.shape[*axis];
                if let Some(s) = self.slot(grads, *x) {
                    for o in 0..outer {
                        s[o * size * inner..][..size * inner]
                            .iter_mut()
                            .zip(&g[o * padded * inner..][..size * inner])
                            .for_each(|(s, g)| *s += g);
                    }
                }
            }
            Op::Upsample2(x) => {
                if let Some(s) = self.slot(grads, *x) {
                    for (i, s) in s.iter_mut().enumerate() {
                        *s += g[2 * i] + g[2 * i + 1];
                    }
                }
            }
            Op::Sinusoidal { x, freqs } => {
                let half = freqs.len();
                if let Some(s) = self.slot(grads, *x) {
                    for (i, s) in s.iter_mut().enumerate() {
                        let out = &node.value[i * 2 * half..(i + 1) * 2 * half];
                        let gi = &g[i * 2 * half..(i + 1) * 2 * half];
                        let mut acc = 0.0;
                        for (j, w) in freqs.iter().enumerate() {
                            acc += w * (gi[j] * out[half + j] - gi[half + j] * out[j]);
                        }
                        *s += acc;
                    }
                }
            }
            Op::MaskMul(x, mask) => {
                if let Some(s) = self.slot(grads, *x) {
                    for i in 0..s.len() {
                        s[i] += g[i] * mask[i];
                    }
                }
            }
        }
    }
}

/// `ω_i = max_period^(-2i/d)` for `i < d/2`.
pub fn sinusoidal_frequencies(dim: usize, max_period: f64) -> Vec<f64> {
    (0..dim / 2)
        .map(|i| max_period.powf(-2.0 * i as f64 / dim as f64))
        .collect()
}
