// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reverse-mode differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so the tape is a topological
//! order of the computation by construction and [`Graph::backward`] visits
//! each node once, from the loss back to the leaves.

use crate::error::{NumError, Result};
use crate::kernels;
use crate::tensor::Tensor;

const LAYER_NORM_EPS: f32 = 1e-5;

/// Handle to a node on a [`Graph`]. Only meaningful for the graph that
/// produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    MatMulNt { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow { x: Var, row: Var },
    Mul(Var, Var),
    Scale(Var, f32),
    Relu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f32>, rstd: Vec<f32> },
    Softmax(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f32> },
    L1(Var),
    SqL2(Var),
    L2(Var),
    Sum(Var),
    MeanAxis { x: Var, outer: usize, n: usize, inner: usize },
    Concat { parts: Vec<Var>, outer: usize },
    Narrow { x: Var, outer: usize, chunk: usize, offset: usize, len: usize },
    Gather { table: Var, ids: Vec<usize> },
    Rope { x: Var, base: f32 },
    ColNormalize { w: Var, eps: f32, norms: Vec<f32> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording tape of differentiable operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every node that required one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros shaped like `like` when the loss does not
    /// depend on it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> NumError {
    NumError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn bad_shape(op: &'static str, t: &Tensor, reason: &'static str) -> NumError {
    NumError::BadShape {
        op,
        shape: t.shape().to_vec(),
        reason,
    }
}

fn rope_angle(pos: usize, pair: usize, width: usize, base: f32) -> (f32, f32) {
    let freq = base.powf(-2.0 * pair as f32 / width as f32);
    let theta = pos as f32 * freq;
    (theta.cos(), theta.sin())
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(NumError::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Trainable leaf: gradients are reported for it.
    pub fn param(&mut self, t: Tensor) -> Result<Var> {
        self.push("param", t, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push("constant", t, Op::Leaf, false)
    }

    /// Matrix product. Either operand may be rank 1 (treated as a row vector
    /// on the left, a column vector on the right); that axis is dropped from
    /// the result.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, ka) = match ta.shape() {
            [k] => (1, *k),
            [m, k] => (*m, *k),
            _ => return Err(bad_shape("matmul", ta, "expected rank 1 or 2")),
        };
        let (kb, n) = match tb.shape() {
            [k] => (*k, 1),
            [k, n] => (*k, *n),
            _ => return Err(bad_shape("matmul", tb, "expected rank 1 or 2")),
        };
        if ka != kb {
            return Err(mismatch("matmul", ta, tb));
        }
        let mut shape = Vec::with_capacity(2);
        if ta.rank() == 2 {
            shape.push(m);
        }
        if tb.rank() == 2 {
            shape.push(n);
        }
        let data = kernels::matmul(ta.data(), tb.data(), m, ka, n);
        let value = if shape.is_empty() {
            Tensor::scalar(data[0])
        } else {
            Tensor::from_parts(shape, data)
        };
        let rg = self.requires(a) || self.requires(b);
        self.push("matmul", value, Op::MatMul { a, b, m, k: ka, n }, rg)
    }

    /// `a · bᵀ` for rank-2 `a [m×k]` and `b [n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (Some((m, k)), Some((n, kb))) = (ta.dims2(), tb.dims2()) else {
            return Err(mismatch("matmul_nt", ta, tb));
        };
        if k != kb {
            return Err(mismatch("matmul_nt", ta, tb));
        }
        let data = kernels::matmul_nt(ta.data(), tb.data(), m, k, n);
        let rg = self.requires(a) || self.requires(b);
        self.push(
            "matmul_nt",
            Tensor::from_parts(vec![m, n], data),
            Op::MatMulNt { a, b, m, k, n },
            rg,
        )
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2().ok_or_else(|| bad_shape("transpose", t, "expected rank 2"))?;
        let data = kernels::transpose(t.data(), r, c);
        let rg = self.requires(x);
        self.push("transpose", Tensor::from_parts(vec![c, r], data), Op::Transpose(x), rg)
    }

    fn zip_same(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f32, f32) -> f32, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.requires(a) || self.requires(b);
        self.push(name, value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`n` row to every row of an `[m×n]` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        let n = *tx.shape().last().unwrap_or(&1);
        if tr.shape() != [n] || tx.rank() == 0 {
            return Err(mismatch("add_row", tx, tr));
        }
        let mut data = tx.data().to_vec();
        for chunk in data.chunks_exact_mut(n) {
            for (d, r) in chunk.iter_mut().zip(tr.data()) {
                *d += r;
            }
        }
        let value = Tensor::from_parts(tx.shape().to_vec(), data);
        let rg = self.requires(x) || self.requires(row);
        self.push("add_row", value, Op::AddRow { x, row }, rg)
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Result<Var> {
        let value = self.value(x).map(|v| v * s);
        let rg = self.requires(x);
        self.push("scale", value, Op::Scale(x, s), rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.requires(x);
        self.push("relu", value, Op::Relu(x), rg)
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let n = *tx.shape().last().ok_or_else(|| bad_shape("layer_norm", tx, "scalar input"))?;
        if tg.shape() != [n] {
            return Err(mismatch("layer_norm", tx, tg));
        }
        if tb.shape() != [n] {
            return Err(mismatch("layer_norm", tx, tb));
        }
        let rows = tx.numel() / n;
        let mut xhat = vec![0.0f32; tx.numel()];
        let mut rstd = vec![0.0f32; rows];
        let mut out = vec![0.0f32; tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * n..(r + 1) * n];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS as f64).sqrt();
            rstd[r] = rs as f32;
            for j in 0..n {
                let h = ((row[j] as f64 - mean) * rs) as f32;
                xhat[r * n + j] = h;
                out[r * n + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let value = Tensor::from_parts(tx.shape().to_vec(), out);
        let rg = self.requires(x) || self.requires(gain) || self.requires(bias);
        self.push("layer_norm", value, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = *t.shape().last().ok_or_else(|| bad_shape("softmax", t, "scalar input"))?;
        let mut out = t.data().to_vec();
        for row in out.chunks_exact_mut(n) {
            softmax_in_place(row);
        }
        let value = Tensor::from_parts(t.shape().to_vec(), out);
        let rg = self.requires(x);
        self.push("softmax", value, Op::Softmax(x), rg)
    }

    /// Row-wise softmax of a square score matrix where row `i` only sees
    /// columns `0..=i`. Masked entries are exactly zero.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = match t.dims2() {
            Some((r, c)) if r == c => r,
            _ => return Err(bad_shape("causal_softmax", t, "expected a square matrix")),
        };
        let mut out = vec![0.0f32; s * s];
        for i in 0..s {
            let row = &mut out[i * s..i * s + i + 1];
            row.copy_from_slice(&t.data()[i * s..i * s + i + 1]);
            softmax_in_place(row);
        }
        let value = Tensor::from_parts(vec![s, s], out);
        let rg = self.requires(x);
        // The backward rule of softmax is exact here: masked outputs are zero
        // and contribute nothing to the row sum.
        self.push("causal_softmax", value, Op::Softmax(x), rg)
    }

    /// Mean cross-entropy between rows of `logits [m×V]` and class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (m, v) = t.dims2().ok_or_else(|| bad_shape("cross_entropy", t, "expected rank 2"))?;
        if targets.len() != m {
            return Err(NumError::ShapeMismatch {
                op: "cross_entropy",
                lhs: t.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&c| c >= v) {
            return Err(NumError::IndexOutOfRange {
                op: "cross_entropy",
                index: bad,
                len: v,
            });
        }
        let mut probs = t.data().to_vec();
        let mut loss = 0.0f64;
        for (r, row) in probs.chunks_exact_mut(v).enumerate() {
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f32>().ln();
            loss += (lse - row[targets[r]]) as f64;
            for z in row.iter_mut() {
                *z = (*z - lse).exp();
            }
        }
        let value = Tensor::scalar((loss / m as f64) as f32);
        let rg = self.requires(logits);
        self.push(
            "cross_entropy",
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// `Σ|x|`
    pub fn l1(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().map(|v| v.abs()).sum();
        let rg = self.requires(x);
        self.push("l1", Tensor::scalar(s), Op::L1(x), rg)
    }

    /// `Σx²`
    pub fn sq_l2(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sq_norm();
        let rg = self.requires(x);
        self.push("sq_l2", Tensor::scalar(s), Op::SqL2(x), rg)
    }

    /// `√Σx²`, with subgradient zero at the origin.
    pub fn l2(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sq_norm().sqrt();
        let rg = self.requires(x);
        self.push("l2", Tensor::scalar(s), Op::L2(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let rg = self.requires(x);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f32)
    }

    /// Mean over one axis; that axis is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(bad_shape("mean_axis", t, "axis out of range"));
        }
        let shape = t.shape();
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0f32; outer * inner];
        for o in 0..outer {
            for a in 0..n {
                let src = &t.data()[(o * n + a) * inner..(o * n + a + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        for v in &mut out {
            *v /= n as f32;
        }
        let mut new_shape = shape.to_vec();
        new_shape.remove(axis);
        let value = if new_shape.is_empty() {
            Tensor::scalar(out[0])
        } else {
            Tensor::from_parts(new_shape, out)
        };
        let rg = self.requires(x);
        self.push("mean_axis", value, Op::MeanAxis { x, outer, n, inner }, rg)
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .map(|&p| self.value(p))
            .ok_or(NumError::BadShape {
                op: "concat",
                shape: vec![],
                reason: "no inputs",
            })?;
        if axis >= first.rank() {
            return Err(bad_shape("concat", first, "axis out of range"));
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let mut total_axis = 0;
        for &p in parts {
            let t = self.value(p);
            let same_rank = t.rank() == first.rank();
            if !same_rank
                || t.shape()[..axis] != first.shape()[..axis]
                || t.shape()[axis + 1..] != first.shape()[axis + 1..]
            {
                return Err(mismatch("concat", first, t));
            }
            total_axis += t.shape()[axis];
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total_axis;
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.numel() / outer;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        self.push(
            "concat",
            Tensor::from_parts(shape, data),
            Op::Concat {
                parts: parts.to_vec(),
                outer,
            },
            rg,
        )
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(bad_shape("narrow", t, "axis out of range"));
        }
        let dim = t.shape()[axis];
        if len == 0 || start + len > dim {
            return Err(NumError::IndexOutOfRange {
                op: "narrow",
                index: start + len,
                len: dim,
            });
        }
        let outer: usize = t.shape()[..axis].iter().product();
        let inner: usize = t.shape()[axis + 1..].iter().product();
        let chunk = dim * inner;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * chunk + start * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let rg = self.requires(x);
        self.push(
            "narrow",
            Tensor::from_parts(shape, data),
            Op::Narrow {
                x,
                outer,
                chunk,
                offset: start * inner,
                len: len * inner,
            },
            rg,
        )
    }

    /// Row lookup: `out[i] = table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (v, d) = t.dims2().ok_or_else(|| bad_shape("gather_rows", t, "expected rank 2"))?;
        if ids.is_empty() {
            return Err(bad_shape("gather_rows", t, "no ids"));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(NumError::IndexOutOfRange {
                    op: "gather_rows",
                    index: id,
                    len: v,
                });
            }
            data.extend_from_slice(t.row(id));
        }
        let rg = self.requires(table);
        self.push(
            "gather_rows",
            Tensor::from_parts(vec![ids.len(), d], data),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    /// Rotary position encoding of `x [S×d]` (d even), row `p` rotated by
    /// position `p`.
    pub fn rope(&mut self, x: Var, base: f32) -> Result<Var> {
        let t = self.value(x);
        let (s, d) = match t.dims2() {
            Some((s, d)) if d % 2 == 0 => (s, d),
            _ => return Err(bad_shape("rope", t, "expected [S×d] with even d")),
        };
        let mut out = t.data().to_vec();
        for p in 0..s {
            for i in 0..d / 2 {
                let (c, sn) = rope_angle(p, i, d, base);
                let (x0, x1) = (out[p * d + 2 * i], out[p * d + 2 * i + 1]);
                out[p * d + 2 * i] = x0 * c - x1 * sn;
                out[p * d + 2 * i + 1] = x0 * sn + x1 * c;
            }
        }
        let rg = self.requires(x);
        self.push("rope", Tensor::from_parts(vec![s, d], out), Op::Rope { x, base }, rg)
    }

    /// Divides every column of a rank-2 matrix by `max(‖column‖₂, eps)`.
    pub fn col_normalize(&mut self, w: Var, eps: f32) -> Result<Var> {
        let t = self.value(w);
        let (r, c) = t.dims2().ok_or_else(|| bad_shape("col_normalize", t, "expected rank 2"))?;
        let norms = column_norms(t.data(), r, c);
        let mut out = t.data().to_vec();
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] /= norms[j].max(eps);
            }
        }
        let rg = self.requires(w);
        self.push(
            "col_normalize",
            Tensor::from_parts(vec![r, c], out),
            Op::ColNormalize { w, eps, norms },
            rg,
        )
    }

    /// Gradients of the scalar `loss` with respect to every upstream node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(NumError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(lt.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.requires(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if self.requires(a) {
                    let da = kernels::matmul_nt(gd, self.value(b).data(), m, n, k);
                    self.accumulate(grads, a, Tensor::from_parts(self.value(a).shape().to_vec(), da));
                }
                if self.requires(b) {
                    let db = kernels::matmul_tn(self.value(a).data(), gd, m, k, n);
                    self.accumulate(grads, b, Tensor::from_parts(self.value(b).shape().to_vec(), db));
                }
            }
            &Op::MatMulNt { a, b, m, k, n } => {
                if self.requires(a) {
                    let da = kernels::matmul(gd, self.value(b).data(), m, n, k);
                    self.accumulate(grads, a, Tensor::from_parts(vec![m, k], da));
                }
                if self.requires(b) {
                    let db = kernels::matmul_tn(gd, self.value(a).data(), m, n, k);
                    self.accumulate(grads, b, Tensor::from_parts(vec![n, k], db));
                }
            }
            &Op::Transpose(x) => {
                let (r, c) = self.value(x).dims2().expect("rank 2");
                let dx = kernels::transpose(gd, c, r);
                self.accumulate(grads, x, Tensor::from_parts(vec![r, c], dx));
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.map(|v| -v));
            }
            &Op::AddRow { x, row } => {
                self.accumulate(grads, x, g.clone());
                if self.requires(row) {
                    let n = self.value(row).numel();
                    let mut dr = vec![0.0f32; n];
                    for chunk in gd.chunks_exact(n) {
                        for (d, v) in dr.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, row, Tensor::from_parts(vec![n], dr));
                }
            }
            &Op::Mul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                if self.requires(a) {
                    let da = gd.iter().zip(tb.data()).map(|(g, y)| g * y).collect();
                    self.accumulate(grads, a, Tensor::from_parts(ta.shape().to_vec(), da));
                }
                if self.requires(b) {
                    let db = gd.iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                    self.accumulate(grads, b, Tensor::from_parts(tb.shape().to_vec(), db));
                }
            }
            &Op::Scale(x, s) => self.accumulate(grads, x, g.map(|v| v * s)),
            &Op::Relu(x) => {
                let tx = self.value(x);
                let dx = gd
                    .iter()
                    .zip(tx.data())
                    .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                self.accumulate(grads, x, Tensor::from_parts(tx.shape().to_vec(), dx));
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let tg = self.value(*gain);
                let n = tg.numel();
                let rows = gd.len() / n;
                if self.requires(*x) {
                    let mut dx = vec![0.0f32; gd.len()];
                    for r in 0..rows {
                        let (gr, hr) = (&gd[r * n..(r + 1) * n], &xhat[r * n..(r + 1) * n]);
                        let mut mean_dh = 0.0f32;
                        let mut mean_dh_h = 0.0f32;
                        for j in 0..n {
                            let dh = gr[j] * tg.data()[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh /= n as f32;
                        mean_dh_h /= n as f32;
                        for j in 0..n {
                            let dh = gr[j] * tg.data()[j];
                            dx[r * n + j] = rstd[r] * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), dx));
                }
                if self.requires(*gain) || self.requires(*bias) {
                    let mut dg = vec![0.0f32; n];
                    let mut db = vec![0.0f32; n];
                    for r in 0..rows {
                        for j in 0..n {
                            dg[j] += gd[r * n + j] * xhat[r * n + j];
                            db[j] += gd[r * n + j];
                        }
                    }
                    self.accumulate(grads, *gain, Tensor::from_parts(vec![n], dg));
                    self.accumulate(grads, *bias, Tensor::from_parts(vec![n], db));
                }
            }
            &Op::Softmax(x) => {
                let y = node.value.data();
                let n = *node.value.shape().last().expect("softmax rank");
                let mut dx = vec![0.0f32; y.len()];
                for ((dxr, yr), gr) in dx.chunks_exact_mut(n).zip(y.chunks_exact(n)).zip(gd.chunks_exact(n)) {
                    let s: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dxr[j] = yr[j] * (gr[j] - s);
                    }
                }
                self.accumulate(grads, x, Tensor::from_parts(node.value.shape().to_vec(), dx));
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let m = targets.len();
                let v = probs.len() / m;
                let scale = gd[0] / m as f32;
                let mut dx: Vec<f32> = probs.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    dx[r * v + t] -= scale;
                }
                self.accumulate(grads, *logits, Tensor::from_parts(vec![m, v], dx));
            }
            &Op::L1(x) => {
                let s = gd[0];
                let dx = self.value(x).map(|v| {
                    if v > 0.0 {
                        s
                    } else if v < 0.0 {
                        -s
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, x, dx);
            }
            &Op::SqL2(x) => {
                let s = 2.0 * gd[0];
                self.accumulate(grads, x, self.value(x).map(|v| v * s));
            }
            &Op::L2(x) => {
                let norm = node.value.data()[0];
                let dx = if norm > 0.0 {
                    let s = gd[0] / norm;
                    self.value(x).map(|v| v * s)
                } else {
                    Tensor::zeros(self.value(x).shape())
                };
                self.accumulate(grads, x, dx);
            }
            &Op::Sum(x) => {
                self.accumulate(grads, x, Tensor::filled(self.value(x).shape(), gd[0]));
            }
            &Op::MeanAxis { x, outer, n, inner } => {
                let mut dx = vec![0.0f32; outer * n * inner];
                let inv = 1.0 / n as f32;
                for o in 0..outer {
                    let src = &gd[o * inner..(o + 1) * inner];
                    for a in 0..n {
                        let dst = &mut dx[(o * n + a) * inner..(o * n + a + 1) * inner];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d = s * inv;
                        }
                    }
                }
                self.accumulate(grads, x, Tensor::from_parts(self.value(x).shape().to_vec(), dx));
            }
            Op::Concat { parts, outer } => {
                let total = gd.len() / outer;
                let mut offset = 0;
                for &p in parts {
                    let tp = self.value(p);
                    let chunk = tp.numel() / outer;
                    if self.requires(p) {
                        let mut dp = Vec::with_capacity(tp.numel());
                        for o in 0..*outer {
                            dp.extend_from_slice(&gd[o * total + offset..o * total + offset + chunk]);
                        }
                        self.accumulate(grads, p, Tensor::from_parts(tp.shape().to_vec(), dp));
                    }
                    offset += chunk;
                }
            }
            &Op::Narrow { x, outer, chunk, offset, len } => {
                let mut dx = vec![0.0f32; outer * chunk];
                for o in 0..outer {
                    dx[o * chunk + offset..o * chunk + offset + len].copy_from_slice(&gd[o * len..(o + 1) * len]);
                }
                self.accumulate(grads, x, Tensor::from_parts(self.value(x).shape().to_vec(), dx));
            }
            Op::Gather { table, ids } => {
                let tt = self.value(*table);
                let d = tt.shape()[1];
                let mut dt = vec![0.0f32; tt.numel()];
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += gd[i * d + j];
                    }
                }
                self.accumulate(grads, *table, Tensor::from_parts(tt.shape().to_vec(), dt));
            }
            &Op::Rope { x, base } => {
                let (s, d) = node.value.dims2().expect("rank 2");
                let mut dx = gd.to_vec();
                for p in 0..s {
                    for i in 0..d / 2 {
                        let (c, sn) = rope_angle(p, i, d, base);
                        let (g0, g1) = (dx[p * d + 2 * i], dx[p * d + 2 * i + 1]);
                        dx[p * d + 2 * i] = g0 * c + g1 * sn;
                        dx[p * d + 2 * i + 1] = -g0 * sn + g1 * c;
                    }
                }
                self.accumulate(grads, x, Tensor::from_parts(vec![s, d], dx));
            }
            Op::ColNormalize { w, eps, norms } => {
                let (r, c) = node.value.dims2().expect("rank 2");
                let u = node.value.data();
                let mut dw = vec![0.0f32; r * c];
                for j in 0..c {
                    if norms[j] > *eps {
                        // d(w/‖w‖) = (g − u·(u·g)) / ‖w‖
                        let mut ug = 0.0f32;
                        for i in 0..r {
                            ug += u[i * c + j] * gd[i * c + j];
                        }
                        for i in 0..r {
                            dw[i * c + j] = (gd[i * c + j] - u[i * c + j] * ug) / norms[j];
                        }
                    } else {
                        for i in 0..r {
                            dw[i * c + j] = gd[i * c + j] / eps;
                        }
                    }
                }
                self.accumulate(grads, *w, Tensor::from_parts(vec![r, c], dw));
            }
        }
    }
}

/// Numerically stable softmax of one row, accumulated in f64.
pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    for (v, e) in row.iter_mut().zip(exps) {
        *v = (e / sum) as f32;
    }
}

pub(crate) fn column_norms(data: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut sq = vec![0.0f32; cols];
    for i in 0..rows {
        for (s, v) in sq.iter_mut().zip(&data[i * cols..(i + 1) * cols]) {
            *s += v * v;
        }
    }
    sq.into_iter().map(f32::sqrt).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_t(v: &[f32]) -> Tensor {
        Tensor::vector(v.to_vec()).unwrap()
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut g = Graph::new();
        let x = g.constant(vec_t(&[-1.0, 2.0])).unwrap();
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn l1_of_zero_vector_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(vec_t(&[0.0, 0.0, 0.0])).unwrap();
        let y = g.l1(x).unwrap();
        assert_eq!(g.value(y).item(), Some(0.0));
    }

    #[test]
    fn matmul_matrix_vector() {
        let mut g = Graph::new();
        let a = g
            .constant(Tensor::matrix(3, 2, vec![1.0, 0.0, -1.0, 0.0, 0.0, 2.0]).unwrap())
            .unwrap();
        let x = g.constant(vec_t(&[1.0, 0.0])).unwrap();
        let y = g.matmul(a, x).unwrap();
        assert_eq!(g.value(y).shape(), &[3]);
        assert_eq!(g.value(y).data(), &[1.0, -1.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            NumError::ShapeMismatch {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.param(vec_t(&[1.0, 2.0])).unwrap();
        let l = g.sq_l2(x).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn relu_gradient_is_mask() {
        let mut g = Graph::new();
        let x = g.param(vec_t(&[-1.0, 2.0])).unwrap();
        let y = g.relu(x).unwrap();
        let l = g.sum(y).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.param(vec_t(&[0.0])).unwrap();
        let y = g.relu(x).unwrap();
        let l = g.sum(y).unwrap();
        assert_eq!(g.backward(l).unwrap().get(x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(vec_t(&[1.0, 2.0])).unwrap();
        assert_eq!(
            g.backward(x).unwrap_err(),
            NumError::NonScalarLoss(vec![2])
        );
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.param(vec_t(&[1.0, 2.0])).unwrap();
        let c = g.constant(vec_t(&[3.0, 4.0])).unwrap();
        let y = g.mul(x, c).unwrap();
        let l = g.sum(y).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 4.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn reused_node_accumulates() {
        // l = sum(x ⊙ x) reached through two edges of the same node.
        let mut g = Graph::new();
        let x = g.param(vec_t(&[3.0])).unwrap();
        let y = g.mul(x, x).unwrap();
        let l = g.sum(y).unwrap();
        assert_eq!(g.backward(l).unwrap().get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(2, 2, vec![0.0, 5.0, 1.0, 1.0]).unwrap()).unwrap();
        let y = g.causal_softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn col_normalize_three_four() {
        let mut g = Graph::new();
        let w = g.constant(Tensor::matrix(2, 2, vec![3.0, 0.0, 4.0, 0.0]).unwrap()).unwrap();
        let n = g.col_normalize(w, 1e-8).unwrap();
        let d = g.value(n).data();
        assert!((d[0] - 0.6).abs() < 1e-7 && (d[2] - 0.8).abs() < 1e-7);
        assert_eq!((d[1], d[3]), (0.0, 0.0));
    }

    #[test]
    fn non_finite_results_are_rejected() {
        let mut g = Graph::new();
        let x = g.constant(vec_t(&[f32::MAX])).unwrap();
        let err = g.scale(x, 10.0).unwrap_err();
        assert_eq!(err, NumError::NonFinite { op: "scale" });
    }
}
