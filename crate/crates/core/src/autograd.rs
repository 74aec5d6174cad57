//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node in construction order, which
//! is also a topological order. [`Graph::backward`] walks the tape once in
//! reverse and accumulates gradients additively, so a value that fans out to
//! several consumers receives the sum of their contributions.
//!
//! Parameters live outside the tape in a [`ParamStore`]; [`Graph::param`]
//! copies a parameter onto the tape once per graph and remembers the binding
//! so that [`Graph::param_grads`] can hand gradients back to the optimizer.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::Stream;
use crate::tensor::{gemm, Tensor};

/// Additive logit applied to masked attention keys.
pub const MASK_LOGIT: f64 = -1e9;

/// Probability clamp used by [`Graph::bce`].
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        b_t: bool,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        b_t: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow {
        x: Var,
        row: Var,
    },
    MulRow {
        x: Var,
        row: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    Sigmoid(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
        weights: Vec<f64>,
        seq: usize,
    },
    Gather {
        table: Var,
        indices: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
    },
    SplitHeads {
        x: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        head_dim: usize,
    },
    MergeHeads {
        x: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        head_dim: usize,
    },
    Reshape(Var),
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    Bce {
        p: Var,
        targets: Vec<f64>,
    },
    SoftmaxXent {
        logits: Var,
        probs: Vec<f64>,
        targets: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    bound: HashMap<ParamId, Var>,
    bound_order: Vec<ParamId>,
}

/// Validates a boolean sequence mask against an `x` of shape `[batch, seq, d]`
/// (or `[seq, d]`, treated as a batch of one). Returns `(batch, seq, d)`.
fn pool_dims(shape: &[usize], mask_len: usize) -> Result<(usize, usize, usize)> {
    let (b, s, d) = match *shape {
        [s, d] => (1, s, d),
        [b, s, d] => (b, s, d),
        _ => return Err(Error::shape("pool", shape, &[mask_len])),
    };
    if b * s != mask_len {
        return Err(Error::shape("pool", shape, &[mask_len]));
    }
    Ok((b, s, d))
}

fn pooled_shape(shape: &[usize], d: usize) -> Vec<usize> {
    if shape.len() == 2 {
        vec![d]
    } else {
        vec![shape[0], d]
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Records a leaf. It is differentiable iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs = tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn variable(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    /// Puts parameter `id` on the tape (once per graph).
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.bound.get(&id) {
            return *v;
        }
        let p = store.get(id);
        let v = self.leaf(p.tensor.clone().with_requires_grad(p.trainable));
        self.bind_param(id, v);
        v
    }

    /// Binds an existing tape variable to parameter `id`.
    pub fn bind_param(&mut self, id: ParamId, v: Var) {
        if self.bound.insert(id, v).is_none() {
            self.bound_order.push(id);
        }
    }

    /// Gradients of all bound, differentiable parameters (zeros when the loss
    /// does not depend on them).
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<f64>)> {
        self.bound_order
            .iter()
            .filter_map(|id| {
                let v = self.bound[id];
                if !self.needs(v) {
                    return None;
                }
                let g = self
                    .grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; self.value(v).len()]);
                Some((*id, g))
            })
            .collect()
    }

    // ----- linear algebra -------------------------------------------------

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, b_t: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if b_t { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(Error::shape("matmul", sa, sb));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.data(a),
            false,
            self.data(b),
            b_t,
            &mut out,
            false,
        );
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b, b_t }, needs))
    }

    /// Batched product over the leading axis: `[g,m,k]·[g,k,n]` (or
    /// `[g,m,k]·[g,n,k]ᵀ` when `b_t`).
    pub fn batch_matmul(&mut self, a: Var, b: Var, b_t: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shape("batch_matmul", &sa, &sb));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if b_t { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != kb {
            return Err(Error::shape("batch_matmul", &sa, &sb));
        }
        let mut out = vec![0.0; g * m * n];
        {
            let (da, db) = (self.data(a), self.data(b));
            for i in 0..g {
                gemm(
                    m,
                    k,
                    n,
                    &da[i * m * k..(i + 1) * m * k],
                    false,
                    &db[i * k * n..(i + 1) * k * n],
                    b_t,
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(&[g, m, n], out)?,
            Op::BatchMatMul { a, b, b_t },
            needs,
        ))
    }

    // ----- elementwise ----------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| f(*x, *y))
            .collect();
        Tensor::new(self.shape(a), data).expect("shape checked")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.data(a).iter().map(|x| f(*x)).collect();
        Tensor::new(self.shape(a), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip(a, b, |x, y| x + y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip(a, b, |x, y| x - y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip(a, b, |x, y| x * y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Mul(a, b), needs))
    }

    fn check_row(&self, op: &'static str, x: Var, row: Var) -> Result<usize> {
        let c = self.value(x).cols();
        if self.value(row).len() != c {
            return Err(Error::shape(op, self.shape(x), self.shape(row)));
        }
        Ok(c)
    }

    /// Adds a vector to every row (last axis) of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let c = self.check_row("add_row", x, row)?;
        let mut t = self.value(x).clone().with_requires_grad(false);
        let r = self.data(row).to_vec();
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v += r[i % c];
        }
        let needs = self.needs(x) || self.needs(row);
        Ok(self.push(t, Op::AddRow { x, row }, needs))
    }

    /// Multiplies every row (last axis) of `x` elementwise by a vector.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let c = self.check_row("mul_row", x, row)?;
        let mut t = self.value(x).clone().with_requires_grad(false);
        let r = self.data(row).to_vec();
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v *= r[i % c];
        }
        let needs = self.needs(x) || self.needs(row);
        Ok(self.push(t, Op::MulRow { x, row }, needs))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.map(x, |v| v * factor);
        let needs = self.needs(x);
        self.push(t, Op::Scale { x, factor }, needs)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.data(x).iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s: f64 = self.data(x).iter().sum::<f64>() / n;
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Mean(x), needs)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&slope) {
            return Err(Error::InvalidArgument(format!(
                "leaky_relu slope {slope} outside [0, 1)"
            )));
        }
        let t = self.map(x, |v| if v >= 0.0 { v } else { slope * v });
        let needs = self.needs(x);
        Ok(self.push(t, Op::LeakyRelu { x, slope }, needs))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.map(x, sigmoid);
        let needs = self.needs(x);
        self.push(t, Op::Sigmoid(x), needs)
    }

    /// Inverted dropout. Identity (the same `Var`) when not training or when
    /// `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64, training: bool, rng: &mut Stream) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
            .collect();
        let data = self.data(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::new(self.shape(x), data)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Dropout { x, mask }, needs))
    }

    // ----- normalization --------------------------------------------------

    /// Softmax over the last axis, stabilized by max subtraction.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone().with_requires_grad(false);
        let c = t.cols();
        for row in t.data_mut().chunks_mut(c.max(1)) {
            softmax_in_place(row);
        }
        let needs = self.needs(x);
        self.push(t, Op::Softmax(x), needs)
    }

    /// Layer normalization over the last axis followed by a per-feature affine
    /// map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let c = self.check_row("layer_norm", x, gain)?;
        self.check_row("layer_norm", x, bias)?;
        if eps <= 0.0 {
            return Err(Error::InvalidArgument("layer_norm eps must be > 0".into()));
        }
        let rows = self.value(x).rows();
        let mut xhat = self.data(x).to_vec();
        let mut inv_std = vec![0.0; rows];
        for (r, row) in xhat.chunks_mut(c).enumerate() {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
        }
        let (g, b) = (self.data(gain), self.data(bias));
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, v)| v * g[i % c] + b[i % c])
            .collect();
        let t = Tensor::new(self.shape(x), out)?;
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    /// Batch normalization over rows of a `[n, f]` input. With `stats` the
    /// given running statistics are used as constants; otherwise batch
    /// statistics are computed (and differentiated through). Returns the
    /// output and the `(mean, biased variance)` that were used.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
        stats: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let f = self.check_row("batch_norm", x, gain)?;
        self.check_row("batch_norm", x, bias)?;
        let n = self.value(x).rows();
        let xd = self.data(x);
        let (mean, var, batch_stats) = match stats {
            Some((m, v)) => (m.to_vec(), v.to_vec(), false),
            None => {
                let mut mean = vec![0.0; f];
                let mut var = vec![0.0; f];
                for r in 0..n {
                    for j in 0..f {
                        mean[j] += xd[r * f + j];
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n.max(1) as f64);
                for r in 0..n {
                    for j in 0..f {
                        let d = xd[r * f + j] - mean[j];
                        var[j] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= n.max(1) as f64);
                (mean, var, true)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; n * f];
        for r in 0..n {
            for j in 0..f {
                xhat[r * f + j] = (xd[r * f + j] - mean[j]) * inv_std[j];
            }
        }
        let (g, b) = (self.data(gain), self.data(bias));
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, v)| v * g[i % f] + b[i % f])
            .collect();
        let t = Tensor::new(self.shape(x), out)?;
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        let v = self.push(
            t,
            Op::BatchNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
                batch_stats,
            },
            needs,
        );
        Ok((v, mean, var))
    }

    /// Scales each row (last axis) to unit L2 norm.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone().with_requires_grad(false);
        let c = t.cols().max(1);
        let mut norms = Vec::with_capacity(t.rows());
        for row in t.data_mut().chunks_mut(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let needs = self.needs(x);
        self.push(t, Op::L2Normalize { x, norms }, needs)
    }

    // ----- sequence pooling ----------------------------------------------

    /// Per-dimension max over unmasked positions of `x[batch, seq, d]` (or
    /// `x[seq, d]`). Gradient goes to the first maximizing position.
    pub fn global_max_pool(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (b, s, d) = pool_dims(self.shape(x), mask.len())?;
        let xd = self.data(x);
        let mut out = vec![0.0; b * d];
        let mut argmax = vec![0usize; b * d];
        for bi in 0..b {
            let mut any = false;
            for si in 0..s {
                if !mask[bi * s + si] {
                    continue;
                }
                for di in 0..d {
                    let idx = (bi * s + si) * d + di;
                    if !any || xd[idx] > out[bi * d + di] {
                        out[bi * d + di] = xd[idx];
                        argmax[bi * d + di] = idx;
                    }
                }
                any = true;
            }
            if !any {
                return Err(Error::EmptySequence { row: bi });
            }
        }
        let shape = pooled_shape(self.shape(x), d);
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MaxPool { x, argmax }, needs))
    }

    /// Mean over unmasked positions; rows with no unmasked position pool to
    /// zeros.
    pub fn global_avg_pool(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (b, s, d) = pool_dims(self.shape(x), mask.len())?;
        let mut weights = vec![0.0; b * s];
        for bi in 0..b {
            let count = mask[bi * s..(bi + 1) * s].iter().filter(|m| **m).count();
            if count > 0 {
                let w = 1.0 / count as f64;
                for si in 0..s {
                    if mask[bi * s + si] {
                        weights[bi * s + si] = w;
                    }
                }
            }
        }
        let xd = self.data(x);
        let mut out = vec![0.0; b * d];
        for bi in 0..b {
            for si in 0..s {
                let w = weights[bi * s + si];
                if w == 0.0 {
                    continue;
                }
                let base = (bi * s + si) * d;
                for di in 0..d {
                    out[bi * d + di] += w * xd[base + di];
                }
            }
        }
        let shape = pooled_shape(self.shape(x), d);
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::AvgPool { x, weights, seq: s },
            needs,
        ))
    }

    // ----- indexing and layout -------------------------------------------

    /// Row gather from a `[rows, d]` table; output shape is `lead ++ [d]`
    /// where `product(lead) == indices.len()`.
    pub fn gather(&mut self, table: Var, indices: &[usize], lead: &[usize]) -> Result<Var> {
        let ts = self.shape(table);
        if ts.len() != 2 || lead.iter().product::<usize>() != indices.len() {
            return Err(Error::shape("gather", ts, lead));
        }
        let (rows, d) = (ts[0], ts[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::IndexOutOfRange {
                table: format!("node {}", table.0),
                index: bad,
                rows,
            });
        }
        let td = self.data(table);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let mut shape = lead.to_vec();
        shape.push(d);
        let needs = self.needs(table);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            needs,
        ))
    }

    /// Concatenation along the last axis. All parts must share the leading
    /// row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        if parts.len() == 1 {
            return Ok(first);
        }
        let rows = self.value(first).rows();
        let lead: Vec<usize> = {
            let s = self.shape(first);
            s[..s.len().saturating_sub(1)].to_vec()
        };
        let mut total = 0;
        for p in parts {
            if self.value(*p).rows() != rows || self.shape(*p).len() != lead.len() + 1 {
                return Err(Error::shape("concat", self.shape(first), self.shape(*p)));
            }
            total += self.value(*p).cols();
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        let needs = parts.iter().any(|p| self.needs(*p));
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
            },
            needs,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self
            .value(x)
            .clone()
            .with_requires_grad(false)
            .reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Reshape(x), needs))
    }

    /// `[batch, seq, heads·head_dim]` → `[batch·heads, seq, head_dim]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || heads == 0 || !s[2].is_multiple_of(heads) {
            return Err(Error::shape("split_heads", &s, &[heads]));
        }
        let (batch, seq, head_dim) = (s[0], s[1], s[2] / heads);
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for b in 0..batch {
            for t in 0..seq {
                for h in 0..heads {
                    let src = (b * seq + t) * heads * head_dim + h * head_dim;
                    let dst = ((b * heads + h) * seq + t) * head_dim;
                    out[dst..dst + head_dim].copy_from_slice(&xd[src..src + head_dim]);
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(&[batch * heads, seq, head_dim], out)?,
            Op::SplitHeads {
                x,
                batch,
                seq,
                heads,
                head_dim,
            },
            needs,
        ))
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || heads == 0 || !s[0].is_multiple_of(heads) {
            return Err(Error::shape("merge_heads", &s, &[heads]));
        }
        let (batch, seq, head_dim) = (s[0] / heads, s[1], s[2]);
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for b in 0..batch {
            for t in 0..seq {
                for h in 0..heads {
                    let dst = (b * seq + t) * heads * head_dim + h * head_dim;
                    let src = ((b * heads + h) * seq + t) * head_dim;
                    out[dst..dst + head_dim].copy_from_slice(&xd[src..src + head_dim]);
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(&[batch, seq, heads * head_dim], out)?,
            Op::MergeHeads {
                x,
                batch,
                seq,
                heads,
                head_dim,
            },
            needs,
        ))
    }

    // ----- losses -----------------------------------------------------------

    /// Mean binary cross-entropy of probabilities `p` against 0/1 targets.
    ///
    /// Probabilities are clamped to `[1e-7, 1 - 1e-7]` for the value; the
    /// gradient uses the clamped probability in place of `p`, so that
    /// chaining through a sigmoid yields `(p - y) / n` on the logit.
    pub fn bce(&mut self, p: Var, targets: &[f64]) -> Result<Var> {
        if self.value(p).len() != targets.len() {
            return Err(Error::shape("bce", self.shape(p), &[targets.len()]));
        }
        let n = targets.len().max(1) as f64;
        let loss = self
            .data(p)
            .iter()
            .zip(targets)
            .map(|(p, y)| {
                let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln())
            })
            .sum::<f64>()
            / n;
        let needs = self.needs(p);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                p,
                targets: targets.to_vec(),
            },
            needs,
        ))
    }

    /// Mean softmax cross-entropy of `logits[n, c]` with one target column per
    /// row. Columns where `allowed` is false are excluded from the softmax.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        allowed: Option<&[bool]>,
    ) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::shape("softmax_cross_entropy", &s, &[targets.len()]));
        }
        let (n, c) = (s[0], s[1]);
        if let Some(a) = allowed {
            if a.len() != n * c {
                return Err(Error::shape("softmax_cross_entropy", &s, &[a.len()]));
            }
        }
        let ld = self.data(logits);
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for i in 0..n {
            let t = targets[i];
            let ok = |j: usize| allowed.is_none_or(|a| a[i * c + j]);
            if t >= c || !ok(t) {
                return Err(Error::InvalidArgument(format!(
                    "target column {t} of row {i} is not an allowed class"
                )));
            }
            let row = &ld[i * c..(i + 1) * c];
            let max = (0..c)
                .filter(|&j| ok(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                if ok(j) {
                    let e = (row[j] - max).exp();
                    probs[i * c + j] = e;
                    z += e;
                }
            }
            for j in 0..c {
                probs[i * c + j] /= z;
            }
            loss -= (row[t] - max) - z.ln();
        }
        loss /= n.max(1) as f64;
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                probs,
                targets: targets.to_vec(),
            },
            needs,
        ))
    }

    // ----- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Gradients are retrievable with
    /// [`Graph::grad`] and [`Graph::param_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, b_t } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k) = (sa[0], sa[1]);
                let n = if *b_t { sb[0] } else { sb[1] };
                if self.needs(*a) {
                    let da = acc(grads, *a, m * k);
                    // dA = dC · op(B)ᵀ
                    gemm(m, n, k, g, false, self.data(*b), !*b_t, da, true);
                }
                if self.needs(*b) {
                    let db = acc(grads, *b, k * n);
                    if *b_t {
                        gemm(n, m, k, g, true, self.data(*a), false, db, true);
                    } else {
                        gemm(k, m, n, self.data(*a), true, g, false, db, true);
                    }
                }
            }
            Op::BatchMatMul { a, b, b_t } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (groups, m, k) = (sa[0], sa[1], sa[2]);
                let n = if *b_t { sb[1] } else { sb[2] };
                let (ad, bd) = (self.data(*a), self.data(*b));
                if self.needs(*a) {
                    let da = acc(grads, *a, groups * m * k);
                    for q in 0..groups {
                        gemm(
                            m,
                            n,
                            k,
                            &g[q * m * n..(q + 1) * m * n],
                            false,
                            &bd[q * k * n..(q + 1) * k * n],
                            !*b_t,
                            &mut da[q * m * k..(q + 1) * m * k],
                            true,
                        );
                    }
                }
                if self.needs(*b) {
                    let db = acc(grads, *b, groups * k * n);
                    for q in 0..groups {
                        let gq = &g[q * m * n..(q + 1) * m * n];
                        let aq = &ad[q * m * k..(q + 1) * m * k];
                        let dq = &mut db[q * k * n..(q + 1) * k * n];
                        if *b_t {
                            gemm(n, m, k, gq, true, aq, false, dq, true);
                        } else {
                            gemm(k, m, n, aq, true, gq, false, dq, true);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, 1.0)] {
                    if self.needs(v) {
                        axpy(acc(grads, v, g.len()), sign, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, -1.0)] {
                    if self.needs(v) {
                        axpy(acc(grads, v, g.len()), sign, g);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let other = self.data(*b);
                    let da = acc(grads, *a, g.len());
                    for j in 0..g.len() {
                        da[j] += g[j] * other[j];
                    }
                }
                if self.needs(*b) {
                    let other = self.data(*a);
                    let db = acc(grads, *b, g.len());
                    for j in 0..g.len() {
                        db[j] += g[j] * other[j];
                    }
                }
            }
            Op::AddRow { x, row } => {
                if self.needs(*x) {
                    axpy(acc(grads, *x, g.len()), 1.0, g);
                }
                if self.needs(*row) {
                    let c = self.value(*row).len();
                    let dr = acc(grads, *row, c);
                    for (j, gv) in g.iter().enumerate() {
                        dr[j % c] += gv;
                    }
                }
            }
            Op::MulRow { x, row } => {
                let c = self.value(*row).len();
                if self.needs(*x) {
                    let r = self.data(*row);
                    let dx = acc(grads, *x, g.len());
                    for (j, gv) in g.iter().enumerate() {
                        dx[j] += gv * r[j % c];
                    }
                }
                if self.needs(*row) {
                    let xd = self.data(*x);
                    let dr = acc(grads, *row, c);
                    for (j, gv) in g.iter().enumerate() {
                        dr[j % c] += gv * xd[j];
                    }
                }
            }
            Op::Scale { x, factor } => {
                if self.needs(*x) {
                    axpy(acc(grads, *x, g.len()), *factor, g);
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                acc(grads, *x, n).iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let s = g[0] / n.max(1) as f64;
                acc(grads, *x, n).iter_mut().for_each(|d| *d += s);
            }
            Op::Softmax(x) => {
                let c = node.value.cols().max(1);
                let dx = acc(grads, *x, g.len());
                for ((y, gr), d) in out.chunks(c).zip(g.chunks(c)).zip(dx.chunks_mut(c)) {
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        d[j] += y[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = self.value(*gain).len();
                if self.needs(*x) {
                    let gn = self.data(*gain);
                    let dx = acc(grads, *x, g.len());
                    let mut dxhat = vec![0.0; c];
                    for r in 0..inv_std.len() {
                        let base = r * c;
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            dxhat[j] = g[base + j] * gn[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * xhat[base + j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            dx[base + j] += inv_std[r] * (dxhat[j] - m1 - xhat[base + j] * m2);
                        }
                    }
                }
                if self.needs(*gain) {
                    let dg = acc(grads, *gain, c);
                    for (j, gv) in g.iter().enumerate() {
                        dg[j % c] += gv * xhat[j];
                    }
                }
                if self.needs(*bias) {
                    let db = acc(grads, *bias, c);
                    for (j, gv) in g.iter().enumerate() {
                        db[j % c] += gv;
                    }
                }
            }
            Op::BatchNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let f = inv_std.len();
                let n = g.len() / f.max(1);
                if self.needs(*x) {
                    let gn = self.data(*gain);
                    let dx = acc(grads, *x, g.len());
                    if *batch_stats {
                        for j in 0..f {
                            let mut m1 = 0.0;
                            let mut m2 = 0.0;
                            for r in 0..n {
                                let dh = g[r * f + j] * gn[j];
                                m1 += dh;
                                m2 += dh * xhat[r * f + j];
                            }
                            m1 /= n as f64;
                            m2 /= n as f64;
                            for r in 0..n {
                                let dh = g[r * f + j] * gn[j];
                                dx[r * f + j] += inv_std[j] * (dh - m1 - xhat[r * f + j] * m2);
                            }
                        }
                    } else {
                        for (idx, gv) in g.iter().enumerate() {
                            let j = idx % f;
                            dx[idx] += gv * gn[j] * inv_std[j];
                        }
                    }
                }
                if self.needs(*gain) {
                    let dg = acc(grads, *gain, f);
                    for (idx, gv) in g.iter().enumerate() {
                        dg[idx % f] += gv * xhat[idx];
                    }
                }
                if self.needs(*bias) {
                    let db = acc(grads, *bias, f);
                    for (idx, gv) in g.iter().enumerate() {
                        db[idx % f] += gv;
                    }
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xd = self.data(*x);
                let dx = acc(grads, *x, g.len());
                for j in 0..g.len() {
                    dx[j] += if xd[j] >= 0.0 { g[j] } else { slope * g[j] };
                }
            }
            Op::Sigmoid(x) => {
                let dx = acc(grads, *x, g.len());
                for j in 0..g.len() {
                    dx[j] += g[j] * out[j] * (1.0 - out[j]);
                }
            }
            Op::Dropout { x, mask } => {
                let dx = acc(grads, *x, g.len());
                for j in 0..g.len() {
                    dx[j] += g[j] * mask[j];
                }
            }
            Op::MaxPool { x, argmax } => {
                let n = self.value(*x).len();
                let dx = acc(grads, *x, n);
                for (j, src) in argmax.iter().enumerate() {
                    dx[*src] += g[j];
                }
            }
            Op::AvgPool { x, weights, seq } => {
                let n = self.value(*x).len();
                let d = n / weights.len().max(1);
                let dx = acc(grads, *x, n);
                for (pos, w) in weights.iter().enumerate() {
                    if *w == 0.0 {
                        continue;
                    }
                    let b = pos / seq;
                    for di in 0..d {
                        dx[pos * d + di] += w * g[b * d + di];
                    }
                }
            }
            Op::Gather { table, indices } => {
                let ts = self.shape(*table);
                let d = ts[1];
                let dt = acc(grads, *table, ts[0] * d);
                for (r, &idx) in indices.iter().enumerate() {
                    for j in 0..d {
                        dt[idx * d + j] += g[r * d + j];
                    }
                }
            }
            Op::Concat { parts } => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if self.needs(*p) {
                        let dp = acc(grads, *p, rows * w);
                        for r in 0..rows {
                            for j in 0..w {
                                dp[r * w + j] += g[r * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::SplitHeads {
                x,
                batch,
                seq,
                heads,
                head_dim,
            } => {
                let dx = acc(grads, *x, g.len());
                for b in 0..*batch {
                    for t in 0..*seq {
                        for h in 0..*heads {
                            let src = (b * seq + t) * heads * head_dim + h * head_dim;
                            let dst = ((b * heads + h) * seq + t) * head_dim;
                            for e in 0..*head_dim {
                                dx[src + e] += g[dst + e];
                            }
                        }
                    }
                }
            }
            Op::MergeHeads {
                x,
                batch,
                seq,
                heads,
                head_dim,
            } => {
                let dx = acc(grads, *x, g.len());
                for b in 0..*batch {
                    for t in 0..*seq {
                        for h in 0..*heads {
                            let dst = (b * seq + t) * heads * head_dim + h * head_dim;
                            let src = ((b * heads + h) * seq + t) * head_dim;
                            for e in 0..*head_dim {
                                dx[src + e] += g[dst + e];
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                axpy(acc(grads, *x, g.len()), 1.0, g);
            }
            Op::L2Normalize { x, norms } => {
                let c = node.value.cols().max(1);
                let dx = acc(grads, *x, g.len());
                for (r, n) in norms.iter().enumerate() {
                    let y = &out[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[r * c + j] += (gr[j] - y[j] * dot) / n;
                    }
                }
            }
            Op::Bce { p, targets } => {
                let pd = self.data(*p);
                let n = targets.len().max(1) as f64;
                let dp = acc(grads, *p, targets.len());
                for j in 0..targets.len() {
                    let pc = pd[j].clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                    dp[j] += g[0] * (pc - targets[j]) / (pc * (1.0 - pc)) / n;
                }
            }
            Op::SoftmaxXent {
                logits,
                probs,
                targets,
            } => {
                let n = targets.len();
                let c = probs.len() / n.max(1);
                let dl = acc(grads, *logits, probs.len());
                let s = g[0] / n.max(1) as f64;
                for i in 0..n {
                    for j in 0..c {
                        let onehot = if j == targets[i] { 1.0 } else { 0.0 };
                        dl[i * c + j] += s * (probs[i * c + j] - onehot);
                    }
                }
            }
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let i2 = g.constant(Tensor::identity(2));
        let m = g.constant(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let out = g.matmul(i2, m).unwrap();
        assert_eq!(g.data(out), &[1.0, 2.0, 3.0, 4.0]);

        let sel = g.constant(t2(&[&[1.0, 0.0]]));
        let col = g.constant(t2(&[&[2.0], &[5.0]]));
        let out = g.matmul(sel, col).unwrap();
        assert_eq!(g.data(out), &[2.0]);

        let b = g.constant(t2(&[&[5.0, 6.0], &[7.0, 8.0]]));
        let out = g.matmul(m, b).unwrap();
        assert_eq!(g.data(out), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[2], vec![0.0, 0.0]).unwrap());
        let y = g.softmax(x);
        assert_eq!(g.data(y), &[0.5, 0.5]);

        let x = g.constant(Tensor::new(&[2], vec![1000.0, 0.0]).unwrap());
        let y = g.softmax(x);
        assert!(g.value(y).all_finite());
        assert!((g.data(y)[0] - 1.0).abs() < 1e-12 && g.data(y)[1] < 1e-300);

        let x = g.constant(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = g.softmax(x);
        close(g.data(y), &[0.09003, 0.24473, 0.66524], 5e-6);
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let ones = g.constant(Tensor::filled(&[3], 1.0));
        let zeros = g.constant(Tensor::zeros(&[3]));
        let x = g.constant(Tensor::new(&[1, 3], vec![5.0, 5.0, 5.0]).unwrap());
        let y = g.layer_norm(x, ones, zeros, 1e-5).unwrap();
        assert_eq!(g.data(y), &[0.0, 0.0, 0.0]);

        let one2 = g.constant(Tensor::filled(&[2], 1.0));
        let zero2 = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(Tensor::new(&[1, 2], vec![1.0, -1.0]).unwrap());
        let y = g.layer_norm(x, one2, zero2, 1e-5).unwrap();
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        close(g.data(y), &[expect, -expect], 1e-15);

        let gain0 = g.constant(Tensor::zeros(&[3]));
        let bias = g.constant(Tensor::new(&[3], vec![0.1, 0.2, 0.3]).unwrap());
        let x = g.constant(Tensor::new(&[2, 3], vec![1.0, 7.0, -2.0, 0.5, 0.1, 9.0]).unwrap());
        let y = g.layer_norm(x, gain0, bias, 1e-5).unwrap();
        assert_eq!(g.data(y), &[0.1, 0.2, 0.3, 0.1, 0.2, 0.3]);
    }

    #[test]
    fn leaky_relu_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[3], vec![2.0, -2.0, 0.0]).unwrap());
        let y = g.leaky_relu(x, 0.2).unwrap();
        close(g.data(y), &[2.0, -0.4, 0.0], 1e-15);
        let r = g.leaky_relu(x, 0.0).unwrap();
        assert_eq!(g.data(r), &[2.0, 0.0, 0.0]);
        assert!(g.leaky_relu(x, 1.0).is_err());
    }

    #[test]
    fn dropout_identity_cases() {
        let mut g = Graph::new();
        let mut rng = Stream::new(0);
        let x = g.constant(Tensor::filled(&[4], 3.0));
        assert_eq!(g.dropout(x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(g.dropout(x, 0.7, false, &mut rng).unwrap(), x);
        assert!(g.dropout(x, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_preserves_mean_in_expectation() {
        let mut g = Graph::new();
        let mut rng = Stream::new(11);
        let x = g.constant(Tensor::filled(&[100_000], 2.0));
        let y = g.dropout(x, 0.5, true, &mut rng).unwrap();
        let mean = g.data(y).iter().sum::<f64>() / 100_000.0;
        assert!((mean - 2.0).abs() / 2.0 < 0.01, "mean {mean}");
    }

    #[test]
    fn pooling_examples() {
        let mut g = Graph::new();
        let x = g.constant(t2(&[&[1.0, 5.0], &[3.0, 2.0]]));
        let y = g.global_max_pool(x, &[true, true]).unwrap();
        assert_eq!(g.data(y), &[3.0, 5.0]);
        let y = g.global_max_pool(x, &[false, true]).unwrap();
        assert_eq!(g.data(y), &[3.0, 2.0]);
        assert!(matches!(
            g.global_max_pool(x, &[false, false]),
            Err(Error::EmptySequence { .. })
        ));

        let masked = g.constant(t2(&[&[9.0, 9.0], &[1.0, 1.0]]));
        let y = g.global_max_pool(masked, &[false, true]).unwrap();
        assert_eq!(g.data(y), &[1.0, 1.0]);

        let x = g.constant(t2(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let y = g.global_avg_pool(x, &[true, true]).unwrap();
        assert_eq!(g.data(y), &[2.0, 3.0]);
        let y = g.global_avg_pool(x, &[false, false]).unwrap();
        assert_eq!(g.data(y), &[0.0, 0.0]);
        let empty = g.constant(Tensor::zeros(&[0, 2]));
        let y = g.global_avg_pool(empty, &[]).unwrap();
        assert_eq!(g.data(y), &[0.0, 0.0]);
    }

    #[test]
    fn max_pool_ties_route_to_first_index() {
        let mut g = Graph::new();
        let x = g.variable(t2(&[&[4.0], &[4.0], &[1.0]]));
        let y = g.global_max_pool(x, &[true, true, true]).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::new(&[2, 3], vec![1.0; 6]).unwrap());
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);

        let mut g = Graph::new();
        let w = g.variable(Tensor::scalar(3.0));
        let v = g.constant(Tensor::scalar(2.0));
        let wv = g.mul(w, v).unwrap();
        let sq = g.mul(wv, wv).unwrap();
        g.backward(sq).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[24.0]);

        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(5.0));
        let a = g.scale(x, 2.0);
        let b = g.scale(x, 3.0);
        let c = g.add(a, b).unwrap();
        g.backward(c).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[5.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn heads_round_trip() {
        let mut rng = Stream::new(2);
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn(&[2, 3, 6], 1.0, &mut rng));
        let s = g.split_heads(x, 3).unwrap();
        assert_eq!(g.shape(s), &[6, 3, 2]);
        let m = g.merge_heads(s, 3).unwrap();
        assert_eq!(g.data(m), g.data(x));
    }

    #[test]
    fn bce_examples() {
        let mut g = Graph::new();
        let p = g.constant(Tensor::new(&[1], vec![0.5]).unwrap());
        let l = g.bce(p, &[1.0]).unwrap();
        assert!((g.data(l)[0] - std::f64::consts::LN_2).abs() < 1e-6);
        let p = g.constant(Tensor::new(&[1], vec![0.25]).unwrap());
        let l = g.bce(p, &[1.0]).unwrap();
        assert!((g.data(l)[0] - 1.386294).abs() < 1e-6);
        let p = g.constant(Tensor::new(&[1], vec![0.999_999_9]).unwrap());
        let l = g.bce(p, &[1.0]).unwrap();
        assert!(g.data(l)[0].is_finite() && g.data(l)[0] < 1e-6);
        let p = g.constant(Tensor::new(&[1], vec![1.0]).unwrap());
        let l = g.bce(p, &[0.0]).unwrap();
        assert!(g.data(l)[0].is_finite());
    }

    #[test]
    fn softmax_cross_entropy_respects_allowed_columns() {
        let mut g = Graph::new();
        let logits = g.constant(t2(&[&[1.0, -1.0, 50.0], &[-1.0, 1.0, 50.0]]));
        let allowed = [true, true, false, true, true, false];
        let l = g
            .softmax_cross_entropy(logits, &[0, 1], Some(&allowed))
            .unwrap();
        let expect = -(1.0f64.exp() / (1.0f64.exp() + (-1.0f64).exp())).ln();
        assert!((g.data(l)[0] - expect).abs() < 1e-12);
    }
}
