//! Wengert-list reverse-mode differentiation over [`Tensor`] values.
//!
//! Nodes are appended in execution order, so node indices are already a
//! topological order and the backward sweep is a single reverse pass. A node
//! only records its operation when some operand requires a gradient; all
//! other results are stored as constants.

use std::collections::HashMap;

use super::param::{ParamId, Parameter};
use crate::error::{Error, Result};
use crate::tensor::kernels::{self, HeadLayout, KeepProbs, KeyMask};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Silu(Var),
    Softmax(Var),
    RmsNorm {
        x: Var,
        w: Var,
        inv_rms: Vec<T>,
    },
    Rope {
        x: Var,
        positions: Vec<usize>,
        d_head: usize,
        base: f64,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: HeadLayout,
        mask: KeyMask,
        probs: Vec<T>,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        scale: T,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Single-threaded record of differentiable operations.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: Vec<(ParamId, Var)>,
}

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A constant: no gradient flows into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::of`].
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a parameter. Frozen parameters become constants.
    pub fn param(&mut self, p: &Parameter<T>) -> Var {
        let v = self.push(p.value().clone(), Op::Leaf, p.trainable());
        if p.trainable() {
            self.params.push((p.id(), v));
        }
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = crate::tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(dim_err("add", x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let value = Tensor::checked(x.shape().to_vec(), data, "add")?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Adds a bias vector to every row (trailing-dimension broadcast only).
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(bias));
        let cols = x.cols();
        if b.numel() != cols {
            return Err(dim_err("add_bias", x.shape(), b.shape()));
        }
        let mut data = x.data().to_vec();
        for row in data.chunks_exact_mut(cols) {
            for (r, &bb) in row.iter_mut().zip(b.data()) {
                *r += bb;
            }
        }
        let value = Tensor::checked(x.shape().to_vec(), data, "add_bias")?;
        let rg = self.rg(&[a, bias]);
        Ok(self.push(value, Op::AddBias(a, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(dim_err("mul", x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let value = Tensor::checked(x.shape().to_vec(), data, "mul")?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let s = T::of(s);
        let value = self.value(a).map(|v| v * s)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Scale(a, s), rg))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::checked(vec![1], vec![self.value(a).sum()], "sum")?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Sum(a), rg))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let value = crate::tensor::silu(self.value(a))?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Silu(a), rg))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let value = crate::tensor::softmax_rows(self.value(a))?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Softmax(a), rg))
    }

    pub fn rms_norm(&mut self, x: Var, w: Var, eps: f64) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let cols = xv.cols();
        if wv.numel() != cols {
            return Err(dim_err("rms_norm", xv.shape(), wv.shape()));
        }
        let mut out = vec![T::zero(); xv.numel()];
        let mut inv_rms = Vec::with_capacity(xv.rows());
        for (xr, or) in xv.data().chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
            inv_rms.push(kernels::rms_norm_row(xr, wv.data(), T::of(eps), or));
        }
        let value = Tensor::checked(xv.shape().to_vec(), out, "rms_norm")?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(value, Op::RmsNorm { x, w, inv_rms }, rg))
    }

    pub fn rope(&mut self, x: Var, positions: &[usize], d_head: usize, base: f64) -> Result<Var> {
        let value = crate::tensor::rope_rows(self.value(x), positions, d_head, base)?;
        let rg = self.rg(&[x]);
        let op = Op::Rope {
            x,
            positions: positions.to_vec(),
            d_head,
            base,
        };
        Ok(self.push(value, op, rg))
    }

    /// Multi-head attention: `q` is `[n_q, d]`, `k`/`v` are `[n_k, d]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: HeadLayout, mask: KeyMask) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = layout.d_model();
        if qv.cols() != d || kv.cols() != d || vv.shape() != kv.shape() {
            return Err(dim_err("attention", qv.shape(), kv.shape()));
        }
        let (n_q, n_k) = (qv.rows(), kv.rows());
        if n_k == 0 {
            return Err(Error::contract("attention over zero keys"));
        }
        let rg = self.rg(&[q, k, v]);
        let keep = if rg { KeepProbs::All } else { KeepProbs::None };
        let (out, probs) = kernels::attention(qv.data(), n_q, kv.data(), vv.data(), n_k, layout, mask, keep);
        let value = Tensor::checked(vec![n_q, d], out, "attention")?;
        let op = Op::Attention {
            q,
            k,
            v,
            layout,
            mask,
            probs,
        };
        Ok(self.push(value, op, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_rows of zero parts"))?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(dim_err("concat_rows", self.value(*first).shape(), t.shape()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let value = Tensor::from_parts(vec![rows, cols], data);
        let rg = self.rg(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let cols = t.cols();
        if start + len > t.rows() {
            return Err(dim_err("slice_rows", t.shape(), &[start, len]));
        }
        let value = Tensor::from_parts(vec![len, cols], t.data()[start * cols..(start + len) * cols].to_vec());
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SliceRows { x, start }, rg))
    }

    /// Row lookup into a `[vocab, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (vocab, d) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::contract(format!("token id {id} outside vocabulary of {vocab}")));
            }
            data.extend_from_slice(t.row(id));
        }
        let value = Tensor::from_parts(vec![ids.len(), d], data);
        let rg = self.rg(&[table]);
        let op = Op::Embedding {
            table,
            ids: ids.to_vec(),
        };
        Ok(self.push(value, op, rg))
    }

    /// `scale · Σ_i −log softmax(logits_i)[target_i]` over rows with a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>], scale: f64) -> Result<Var> {
        let l = self.value(logits);
        let (n, vocab) = (l.rows(), l.cols());
        if targets.len() != n {
            return Err(dim_err("cross_entropy", l.shape(), &[targets.len()]));
        }
        let mut probs = l.data().to_vec();
        let mut total = 0.0f64;
        for (row, t) in probs.chunks_exact_mut(vocab).zip(targets) {
            let Some(t) = *t else { continue };
            if t >= vocab {
                return Err(Error::contract(format!("target {t} outside vocabulary of {vocab}")));
            }
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max.as_f64() + row.iter().map(|&v| (v - max).as_f64().exp()).sum::<f64>().ln();
            total += lse - row[t].as_f64();
            kernels::softmax_in_place(row);
        }
        let value = Tensor::checked(vec![1], vec![T::of(total * scale)], "cross_entropy")?;
        let rg = self.rg(&[logits]);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            scale: T::of(scale),
            probs,
        };
        Ok(self.push(value, op, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let mut by_param = HashMap::new();
        for &(id, v) in &self.params {
            if let Some(g) = &grads[v.0] {
                let shape = self.value(v).shape().to_vec();
                by_param
                    .entry(id)
                    .and_modify(|acc: &mut Tensor<T>| {
                        for (a, &b) in acc.data_mut().iter_mut().zip(g) {
                            *a += b;
                        }
                    })
                    .or_insert_with(|| Tensor::from_parts(shape, g.clone()));
            }
        }
        let nodes = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|g| Tensor::from_parts(self.nodes[i].value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients { by_param, nodes })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let mut send = |v: Var, contrib: Vec<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => {
                    for (a, c) in acc.iter_mut().zip(contrib) {
                        *a += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.requires_grad(*a) {
                    send(*a, kernels::matmul_a_bt(g, bv.data(), m, n, k));
                }
                if self.requires_grad(*b) {
                    send(*b, kernels::matmul_at_b(av.data(), g, m, k, n));
                }
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::AddBias(a, b) => {
                send(*a, g.to_vec());
                let cols = self.value(*b).numel();
                let mut gb = vec![T::zero(); cols];
                for row in g.chunks_exact(cols) {
                    for (acc, &r) in gb.iter_mut().zip(row) {
                        *acc += r;
                    }
                }
                send(*b, gb);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                send(*a, g.iter().zip(bv).map(|(&gi, &y)| gi * y).collect());
                send(*b, g.iter().zip(av).map(|(&gi, &x)| gi * x).collect());
            }
            Op::Scale(a, s) => send(*a, g.iter().map(|&gi| gi * *s).collect()),
            Op::Sum(a) => send(*a, vec![g[0]; self.value(*a).numel()]),
            Op::Silu(a) => {
                let x = self.value(*a).data();
                send(*a, g.iter().zip(x).map(|(&gi, &xi)| gi * kernels::silu_grad(xi)).collect());
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let cols = node.value.cols();
                let mut gx = vec![T::zero(); y.len()];
                for ((yr, gr), out) in y.chunks_exact(cols).zip(g.chunks_exact(cols)).zip(gx.chunks_exact_mut(cols)) {
                    let inner = kernels::dot(yr, gr);
                    for ((o, &yi), &gi) in out.iter_mut().zip(yr).zip(gr) {
                        *o = yi * (gi - inner);
                    }
                }
                send(*a, gx);
            }
            Op::RmsNorm { x, w, inv_rms } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let cols = xv.cols();
                let n = T::of(cols as f64);
                let mut gx = vec![T::zero(); xv.numel()];
                let mut gw = vec![T::zero(); cols];
                for (r, ((xr, gr), out)) in xv
                    .data()
                    .chunks_exact(cols)
                    .zip(g.chunks_exact(cols))
                    .zip(gx.chunks_exact_mut(cols))
                    .enumerate()
                {
                    let inv = inv_rms[r];
                    // u = g ⊙ w ; dx = inv·u − inv³/n · (u·x) x
                    let mut ux = T::zero();
                    for j in 0..cols {
                        ux += gr[j] * wv.data()[j] * xr[j];
                        gw[j] += gr[j] * xr[j] * inv;
                    }
                    let coef = inv * inv * inv / n * ux;
                    for j in 0..cols {
                        out[j] = inv * gr[j] * wv.data()[j] - coef * xr[j];
                    }
                }
                send(*x, gx);
                send(*w, gw);
            }
            Op::Rope {
                x,
                positions,
                d_head,
                base,
            } => {
                let inv = kernels::rope_inv_freq(*d_head, *base);
                let cols = node.value.cols();
                let mut gx = g.to_vec();
                for (row, &pos) in gx.chunks_exact_mut(cols).zip(positions) {
                    kernels::rope_row(row, pos, *d_head, &inv, true);
                }
                send(*x, gx);
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                mask,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (dq, dk, dv) = kernels::attention_backward(
                    qv.data(),
                    qv.rows(),
                    kv.data(),
                    vv.data(),
                    kv.rows(),
                    *layout,
                    *mask,
                    probs,
                    g,
                );
                send(*q, dq);
                send(*k, dk);
                send(*v, dv);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    send(p, g[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let cols = xv.cols();
                let mut gx = vec![T::zero(); xv.numel()];
                gx[start * cols..start * cols + g.len()].copy_from_slice(g);
                send(*x, gx);
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let d = tv.cols();
                let mut gt = vec![T::zero(); tv.numel()];
                for (i, &id) in ids.iter().enumerate() {
                    kernels::axpy(T::one(), &g[i * d..(i + 1) * d], &mut gt[id * d..(id + 1) * d]);
                }
                send(*table, gt);
            }
            Op::CrossEntropy {
                logits,
                targets,
                scale,
                probs,
            } => {
                let vocab = self.value(*logits).cols();
                let s = g[0] * *scale;
                let mut gl = vec![T::zero(); probs.len()];
                for (i, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    let row = &mut gl[i * vocab..(i + 1) * vocab];
                    for (o, &p) in row.iter_mut().zip(&probs[i * vocab..(i + 1) * vocab]) {
                        *o = p * s;
                    }
                    row[t] -= s;
                }
                send(*logits, gl);
            }
        }
    }
}

/// Result of a backward sweep.
#[derive(Debug)]
pub struct Gradients<T> {
    by_param: HashMap<ParamId, Tensor<T>>,
    nodes: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. a node, if one reached it.
    pub fn of(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    pub fn of_param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.by_param.get(&id)
    }

    /// Accumulates into every trainable parameter's grad buffer. Frozen
    /// parameters are left untouched.
    pub fn accumulate_into<'a, I>(&self, params: I)
    where
        I: IntoIterator<Item = &'a mut Parameter<T>>,
    {
        for p in params {
            if let Some(g) = self.by_param.get(&p.id()) {
                p.accumulate_grad(g);
            }
        }
    }
}
