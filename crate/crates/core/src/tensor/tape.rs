use std::collections::HashMap;

use rand::Rng;

use super::kernels::{gemm, gemm_view, softmax_row, Gelu, View};
use super::{rows_cols, Element, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Value<T> {
    Owned(Vec<T>),
    Param(ParamId),
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    Relu(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seq_len: usize,
        heads: usize,
        probs: Vec<T>,
    },
    MaskMul(Var, Vec<T>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    GroupMax {
        x: Var,
        argmax: Vec<usize>,
    },
    WeightedGather {
        x: Var,
        index: Vec<usize>,
        weights: Vec<T>,
        k: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
}

struct Node<T> {
    value: Value<T>,
    shape: Vec<usize>,
    op: Op<T>,
    requires_grad: bool,
}

/// Define-by-run record of differentiable operations.
///
/// The tape borrows the parameter store for its whole lifetime, so
/// parameters cannot change between forward and backward.
pub struct Tape<'s, T: Element> {
    store: &'s ParamStore<T>,
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

impl<'s, T: Element> Tape<'s, T> {
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            bound: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A tape that never tracks gradients; for evaluation passes.
    pub fn inference(store: &'s ParamStore<T>) -> Self {
        Self {
            grad_enabled: false,
            ..Self::new(store)
        }
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        match &self.nodes[v.0].value {
            Value::Owned(d) => d,
            Value::Param(id) => self.store.get(*id).data(),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shape")
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        rows_cols(self.shape(v))
    }

    fn push(&mut self, data: Vec<T>, shape: Vec<usize>, op: Op<T>, parents: &[Var]) -> Var {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        let requires_grad = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Value::Owned(data),
            shape,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let t = self.store.get(id);
        self.nodes.push(Node {
            value: Value::Param(id),
            shape: t.shape().to_vec(),
            op: Op::Param(id),
            requires_grad: self.grad_enabled && t.requires_grad(),
        });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(id, v);
        v
    }

    /// Records an input tensor; gradients are tracked iff it requires them.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        let requires_grad = self.grad_enabled && t.requires_grad();
        let shape = t.shape().to_vec();
        self.nodes.push(Node {
            value: Value::Owned(t.into_data()),
            shape,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        Ok(self.input(Tensor::new(shape, data)?))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, false);
        Ok(self.push(out, vec![m, n], Op::MatMul(a, b), &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        Ok(self.push(out, self.shape(a).to_vec(), Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        Ok(self.push(out, self.shape(a).to_vec(), Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).iter().map(|&x| x * c).collect();
        self.push(out, self.shape(a).to_vec(), Op::Scale(a, c), &[a])
    }

    /// Adds a length-`cols` vector to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, cols) = self.dims(x);
        if self.value(bias).len() != cols {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias);
        let out = self
            .value(x)
            .chunks(cols.max(1))
            .flat_map(|row| row.iter().zip(b).map(|(&v, &c)| v + c))
            .collect();
        Ok(self.push(out, self.shape(x).to_vec(), Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(T::zero())).collect();
        self.push(out, self.shape(x).to_vec(), Op::Relu(x), &[x])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let k = Gelu::new();
        let out = self.value(x).iter().map(|&v| k.value(v)).collect();
        self.push(out, self.shape(x).to_vec(), Op::Gelu(x), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if self.value(gamma).len() != cols || self.value(beta).len() != cols {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        if eps <= 0.0 {
            return Err(Error::Argument(format!("layer_norm eps must be positive, got {eps}")));
        }
        let eps = T::from_f64_lossy(eps);
        let n = T::from_usize(cols).unwrap();
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![T::zero(); rows * cols];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * cols];
        for (r, row) in self.value(x).chunks(cols).enumerate() {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        };
        Ok(self.push(out, self.shape(x).to_vec(), op, &[x, gamma, beta]))
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let (_, cols) = self.dims(x);
        let mut out = self.value(x).to_vec();
        out.chunks_mut(cols.max(1)).for_each(softmax_row);
        self.push(out, self.shape(x).to_vec(), Op::Softmax(x), &[x])
    }

    /// Scaled dot-product attention over stacked sequences.
    ///
    /// `q`, `k`, `v` are `(batch·seq_len)×D`; each sequence attends only to
    /// itself and each head sees a contiguous `D/heads` column slice. The
    /// scale is `1/sqrt(D/heads)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq_len: usize, heads: usize) -> Result<Var> {
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        let (rows, d) = self.dims(q);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("width {d} is not divisible by {heads} heads")));
        }
        if seq_len == 0 || rows % seq_len != 0 {
            return Err(Error::shape("attention", self.shape(q), &[seq_len]));
        }
        let (t, dh, batch) = (seq_len, d / heads, rows / seq_len);
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let mut out = vec![T::zero(); rows * d];
        let mut probs = vec![T::zero(); batch * heads * t * t];
        let (qd, kd, vd) = (self.value(q), self.value(k), self.value(v));
        for s in 0..batch {
            for h in 0..heads {
                let off = s * t * d + h * dh;
                let head = View::sub(off, t, dh, d);
                let p = &mut probs[(s * heads + h) * t * t..][..t * t];
                gemm_view(qd, head, kd, head.t(), p, View::sub(0, t, t, t), scale, false);
                p.chunks_mut(t).for_each(softmax_row);
                gemm_view(p, View::sub(0, t, t, t), vd, head, &mut out, head, T::one(), false);
            }
        }
        let op = Op::Attention {
            q,
            k,
            v,
            seq_len,
            heads,
            probs,
        };
        Ok(self.push(out, self.shape(q).to_vec(), op, &[q, k, v]))
    }

    /// Inverted dropout. Identity when `rng` is `None` (evaluation) or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: Option<&mut R>) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Argument(format!("dropout rate must be in [0, 1), got {p}")));
        }
        let Some(rng) = rng else { return Ok(x) };
        if p == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        self.mask_mul(x, mask)
    }

    /// Elementwise product with a constant.
    pub fn mask_mul(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(Error::shape("mask_mul", self.shape(x), &[mask.len()]));
        }
        let out = self.value(x).iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        Ok(self.push(out, self.shape(x).to_vec(), Op::MaskMul(x, mask), &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Argument("concat_cols of nothing".into()));
        };
        let rows = self.dims(first).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims(p);
            if r != rows {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        Ok(self.push(out, vec![rows, total], Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Argument("concat_rows of nothing".into()));
        };
        let cols = self.dims(first).1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != cols {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        Ok(self.push(out, vec![rows, cols], Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        let mut out = Vec::with_capacity(index.len() * cols);
        for &i in index {
            if i >= rows {
                return Err(Error::Index {
                    what: "gather_rows",
                    index: i,
                    bound: rows,
                });
            }
            out.extend_from_slice(&self.value(x)[i * cols..(i + 1) * cols]);
        }
        Ok(self.push(out, vec![index.len(), cols], Op::GatherRows(x, index.to_vec()), &[x]))
    }

    /// Column-wise max over consecutive blocks of `group` rows.
    pub fn group_max(&mut self, x: Var, group: usize) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if group == 0 || rows % group != 0 {
            return Err(Error::shape("group_max", self.shape(x), &[group]));
        }
        let groups = rows / group;
        let data = self.value(x);
        let mut out = vec![T::zero(); groups * cols];
        let mut argmax = vec![0usize; groups * cols];
        for g in 0..groups {
            let base = g * group;
            out[g * cols..(g + 1) * cols].copy_from_slice(&data[base * cols..(base + 1) * cols]);
            argmax[g * cols..(g + 1) * cols].iter_mut().for_each(|a| *a = base);
            for r in base + 1..base + group {
                let row = &data[r * cols..(r + 1) * cols];
                for c in 0..cols {
                    if row[c] > out[g * cols + c] {
                        out[g * cols + c] = row[c];
                        argmax[g * cols + c] = r;
                    }
                }
            }
        }
        let op = Op::GroupMax { x, argmax };
        Ok(self.push(out, vec![groups, cols], op, &[x]))
    }

    /// Max over all rows: `[R×D] -> [1×D]`.
    pub fn max_pool(&mut self, x: Var) -> Result<Var> {
        let rows = self.dims(x).0;
        self.group_max(x, rows)
    }

    /// `out[q] = Σ_j weights[q·k + j] · x[index[q·k + j]]`.
    pub fn weighted_gather(&mut self, x: Var, index: &[usize], weights: &[T], k: usize) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if k == 0 || index.len() != weights.len() || index.len() % k != 0 {
            return Err(Error::shape("weighted_gather", &[index.len()], &[weights.len(), k]));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::Index {
                what: "weighted_gather",
                index: bad,
                bound: rows,
            });
        }
        let queries = index.len() / k;
        let data = self.value(x);
        let mut out = vec![T::zero(); queries * cols];
        for q in 0..queries {
            let dst = &mut out[q * cols..(q + 1) * cols];
            for j in q * k..(q + 1) * k {
                let (src, w) = (&data[index[j] * cols..(index[j] + 1) * cols], weights[j]);
                dst.iter_mut().zip(src).for_each(|(d, &s)| *d += w * s);
            }
        }
        let op = Op::WeightedGather {
            x,
            index: index.to_vec(),
            weights: weights.to_vec(),
            k,
        };
        Ok(self.push(out, vec![queries, cols], op, &[x]))
    }

    /// Mean softmax cross-entropy of `B×C` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (rows, classes) = self.dims(logits);
        if labels.len() != rows {
            return Err(Error::shape("cross_entropy", self.shape(logits), &[labels.len()]));
        }
        if rows == 0 {
            return Err(Error::Argument("cross_entropy over an empty batch".into()));
        }
        let mut probs = self.value(logits).to_vec();
        let mut total = T::zero();
        for (row, &label) in probs.chunks_mut(classes).zip(labels) {
            if label >= classes {
                return Err(Error::Index {
                    what: "class label",
                    index: label,
                    bound: classes,
                });
            }
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            total += lse - row[label];
            softmax_row(row);
        }
        let loss = total / T::from_usize(rows).unwrap();
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(vec![loss], Vec::new(), op, &[logits]))
    }

    /// Scales each row to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let (_, cols) = self.dims(x);
        let tiny = T::from_f64_lossy(1e-12);
        let mut out = self.value(x).to_vec();
        let mut norms = Vec::new();
        for row in out.chunks_mut(cols.max(1)) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(tiny);
            row.iter_mut().for_each(|v| *v = *v / n);
            norms.push(n);
        }
        self.push(out, self.shape(x).to_vec(), Op::L2Normalize { x, norms }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        self.push(vec![s], Vec::new(), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::from_usize(self.value(x).len().max(1)).unwrap();
        let s = self.value(x).iter().copied().sum::<T>() / n;
        self.push(vec![s], Vec::new(), Op::Mean(x), &[x])
    }

    /// Column means: `[R×D] -> [1×D]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (rows, cols) = self.dims(x);
        let mut out = vec![T::zero(); cols];
        for row in self.value(x).chunks(cols.max(1)) {
            out.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
        }
        let n = T::from_usize(rows.max(1)).unwrap();
        out.iter_mut().for_each(|o| *o = *o / n);
        self.push(out, vec![1, cols], Op::MeanRows(x), &[x])
    }

    /// Reverse sweep from a scalar loss.
    ///
    /// Nodes are visited in strictly decreasing record order, which is a
    /// reverse topological order for a define-by-run tape. Only nodes that
    /// depend on a tracked leaf receive gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut out = Gradients {
            leaves: HashMap::new(),
            params: Vec::new(),
            bound: self.bound.clone(),
        };
        if !self.nodes[loss.0].requires_grad {
            return Ok(out);
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    out.leaves.insert(i, g);
                }
                Op::Param(id) => {
                    out.params.push((*id, g.clone()));
                    out.leaves.insert(i, g);
                }
                op => self.propagate(Var(i), op, &g, &mut grads),
            }
        }
        out.params.sort_by_key(|(id, _)| *id);
        Ok(out)
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn add_into(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: &[T]) {
        if let Some(buf) = self.slot(grads, v) {
            buf.iter_mut().zip(contrib).for_each(|(b, &c)| *b += c);
        }
    }

    fn propagate(&self, out: Var, op: &Op<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                if let Some(ga) = self.slot(grads, *a) {
                    gemm(m, n, k, g, false, self.value(*b), true, ga, true);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gemm(k, m, n, self.value(*a), true, g, false, gb, true);
                }
            }
            Op::Add(a, b) => {
                self.add_into(grads, *a, g);
                self.add_into(grads, *b, g);
            }
            Op::Mul(a, b) => {
                let ga: Vec<T> = g.iter().zip(self.value(*b)).map(|(&g, &y)| g * y).collect();
                let gb: Vec<T> = g.iter().zip(self.value(*a)).map(|(&g, &x)| g * x).collect();
                self.add_into(grads, *a, &ga);
                self.add_into(grads, *b, &gb);
            }
            Op::Scale(a, c) => {
                let ga: Vec<T> = g.iter().map(|&v| v * *c).collect();
                self.add_into(grads, *a, &ga);
            }
            Op::AddBias(x, bias) => {
                self.add_into(grads, *x, g);
                if let Some(gb) = self.slot(grads, *bias) {
                    let cols = gb.len();
                    for row in g.chunks(cols.max(1)) {
                        gb.iter_mut().zip(row).for_each(|(b, &v)| *b += v);
                    }
                }
            }
            Op::Relu(x) => {
                let gx: Vec<T> = g
                    .iter()
                    .zip(self.value(*x))
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                self.add_into(grads, *x, &gx);
            }
            Op::Gelu(x) => {
                let k = Gelu::new();
                let gx: Vec<T> = g.iter().zip(self.value(*x)).map(|(&g, &v)| g * k.grad(v)).collect();
                self.add_into(grads, *x, &gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let cols = self.value(*gamma).len();
                let gam = self.value(*gamma);
                if let Some(gg) = self.slot(grads, *gamma) {
                    for (grow, hrow) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for c in 0..cols {
                            gg[c] += grow[c] * hrow[c];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    for grow in g.chunks(cols) {
                        gb.iter_mut().zip(grow).for_each(|(b, &v)| *b += v);
                    }
                }
                if self.nodes[x.0].requires_grad {
                    let n = T::from_usize(cols).unwrap();
                    let mut gx = vec![T::zero(); g.len()];
                    for (r, (grow, hrow)) in g.chunks(cols).zip(xhat.chunks(cols)).enumerate() {
                        let dh: Vec<T> = grow.iter().zip(gam).map(|(&a, &b)| a * b).collect();
                        let mean_dh = dh.iter().copied().sum::<T>() / n;
                        let mean_dhh = dh.iter().zip(hrow).map(|(&a, &b)| a * b).sum::<T>() / n;
                        for c in 0..cols {
                            gx[r * cols + c] = rstd[r] * (dh[c] - mean_dh - hrow[c] * mean_dhh);
                        }
                    }
                    self.add_into(grads, *x, &gx);
                }
            }
            Op::Softmax(x) => {
                let cols = self.dims(*x).1.max(1);
                let y = self.value(out);
                let mut gx = vec![T::zero(); g.len()];
                for ((gx, gr), yr) in gx.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for c in 0..cols {
                        gx[c] = yr[c] * (gr[c] - dot);
                    }
                }
                self.add_into(grads, *x, &gx);
            }
            Op::Attention {
                q,
                k,
                v,
                seq_len,
                heads,
                probs,
            } => {
                let (rows, d) = self.dims(*q);
                let (t, heads) = (*seq_len, *heads);
                let dh = d / heads;
                let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
                let (qd, kd, vd) = (self.value(*q), self.value(*k), self.value(*v));
                let mut gq = vec![T::zero(); rows * d];
                let mut gk = vec![T::zero(); rows * d];
                let mut gv = vec![T::zero(); rows * d];
                let mut dp = vec![T::zero(); t * t];
                let square = View::sub(0, t, t, t);
                for s in 0..rows / t {
                    for h in 0..heads {
                        let head = View::sub(s * t * d + h * dh, t, dh, d);
                        let p = &probs[(s * heads + h) * t * t..][..t * t];
                        gemm_view(p, square.t(), g, head, &mut gv, head, T::one(), true);
                        gemm_view(g, head, vd, head.t(), &mut dp, square, T::one(), false);
                        for (dr, pr) in dp.chunks_mut(t).zip(p.chunks(t)) {
                            let dot: T = dr.iter().zip(pr).map(|(&a, &b)| a * b).sum();
                            dr.iter_mut().zip(pr).for_each(|(d, &p)| *d = p * (*d - dot));
                        }
                        gemm_view(&dp, square, kd, head, &mut gq, head, scale, true);
                        gemm_view(&dp, square.t(), qd, head, &mut gk, head, scale, true);
                    }
                }
                self.add_into(grads, *q, &gq);
                self.add_into(grads, *k, &gk);
                self.add_into(grads, *v, &gv);
            }
            Op::MaskMul(x, mask) => {
                let gx: Vec<T> = g.iter().zip(mask).map(|(&a, &m)| a * m).collect();
                self.add_into(grads, *x, &gx);
            }
            Op::ConcatCols(parts) => {
                let total = self.dims(out).1;
                let mut off = 0;
                for &p in parts {
                    let w = self.dims(p).1;
                    if let Some(gp) = self.slot(grads, p) {
                        for (r, grow) in g.chunks(total.max(1)).enumerate() {
                            gp[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(&grow[off..off + w])
                                .for_each(|(a, &b)| *a += b);
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.add_into(grads, p, &g[off..off + n]);
                    off += n;
                }
            }
            Op::GatherRows(x, index) => {
                let cols = self.dims(*x).1;
                if let Some(gx) = self.slot(grads, *x) {
                    for (grow, &i) in g.chunks(cols.max(1)).zip(index) {
                        gx[i * cols..(i + 1) * cols]
                            .iter_mut()
                            .zip(grow)
                            .for_each(|(a, &b)| *a += b);
                    }
                }
            }
            Op::GroupMax { x, argmax, .. } => {
                let cols = self.dims(*x).1;
                if let Some(gx) = self.slot(grads, *x) {
                    for (j, (&gv, &r)) in g.iter().zip(argmax).enumerate() {
                        gx[r * cols + j % cols] += gv;
                    }
                }
            }
            Op::WeightedGather { x, index, weights, k } => {
                let cols = self.dims(*x).1;
                if let Some(gx) = self.slot(grads, *x) {
                    for (q, grow) in g.chunks(cols.max(1)).enumerate() {
                        for j in q * k..(q + 1) * k {
                            let w = weights[j];
                            gx[index[j] * cols..(index[j] + 1) * cols]
                                .iter_mut()
                                .zip(grow)
                                .for_each(|(a, &b)| *a += w * b);
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let classes = self.dims(*logits).1;
                let coef = g[0] / T::from_usize(labels.len()).unwrap();
                let mut gl: Vec<T> = probs.iter().map(|&p| p * coef).collect();
                for (r, &l) in labels.iter().enumerate() {
                    gl[r * classes + l] -= coef;
                }
                self.add_into(grads, *logits, &gl);
            }
            Op::L2Normalize { x, norms } => {
                let cols = self.dims(*x).1.max(1);
                let y = self.value(out);
                let mut gx = vec![T::zero(); g.len()];
                for (r, ((gx, gr), yr)) in gx.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)).enumerate() {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for c in 0..cols {
                        gx[c] = (gr[c] - yr[c] * dot) / norms[r];
                    }
                }
                self.add_into(grads, *x, &gx);
            }
            Op::Sum(x) => {
                let gx = vec![g[0]; self.value(*x).len()];
                self.add_into(grads, *x, &gx);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let gx = vec![g[0] / T::from_usize(n.max(1)).unwrap(); n];
                self.add_into(grads, *x, &gx);
            }
            Op::MeanRows(x) => {
                let (rows, cols) = self.dims(*x);
                let inv = T::one() / T::from_usize(rows.max(1)).unwrap();
                if let Some(gx) = self.slot(grads, *x) {
                    for row in gx.chunks_mut(cols.max(1)) {
                        row.iter_mut().zip(g).for_each(|(a, &b)| *a += b * inv);
                    }
                }
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`] for tracked leaves and parameters.
pub struct Gradients<T> {
    leaves: HashMap<usize, Vec<T>>,
    params: Vec<(ParamId, Vec<T>)>,
    bound: HashMap<ParamId, Var>,
}

impl<T: Element> Gradients<T> {
    /// Gradient for a leaf or parameter node, if it received one.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.leaves.get(&v.0).map(Vec::as_slice)
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.bound.get(&id).and_then(|v| self.wrt(*v))
    }

    /// Parameter gradients in id order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.params.iter().map(|(id, g)| (*id, g.as_slice()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn store() -> ParamStore<f64> {
        ParamStore::new()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let s = store();
        let mut t = Tape::new(&s);
        let eye = t.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = t.constant(vec![2, 2], vec![3.0, -1.0, 0.5, 7.0]).unwrap();
        let p = t.matmul(eye, m).unwrap();
        assert_eq!(t.value(p), &[3.0, -1.0, 0.5, 7.0]);

        let a = t.constant(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let b = t.constant(vec![2, 1], vec![3.0, 4.0]).unwrap();
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let s = store();
        let mut t = Tape::new(&s);
        let a = t.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = t.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] vs [2, 3]"), "{err}");
    }

    #[test]
    fn layer_norm_cases() {
        let s = store();
        let mut t = Tape::new(&s);
        let ones = t.constant(vec![3], vec![1.0; 3]).unwrap();
        let zeros = t.constant(vec![3], vec![0.0; 3]).unwrap();
        let flat = t.constant(vec![1, 3], vec![5.0; 3]).unwrap();
        let y = t.layer_norm(flat, ones, zeros, 1e-5).unwrap();
        assert_eq!(t.value(y), &[0.0, 0.0, 0.0]);

        let x = t.constant(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = t.layer_norm(x, ones, zeros, 1e-5).unwrap();
        let expect = [-1.2247, 0.0, 1.2247];
        for (a, b) in t.value(y).iter().zip(expect) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-3);
        }

        let b = t.constant(vec![3], vec![0.5, -2.0, 9.0]).unwrap();
        let y = t.layer_norm(x, zeros, b, 1e-5).unwrap();
        assert_eq!(t.value(y), &[0.5, -2.0, 9.0]);

        let bad = t.constant(vec![2], vec![1.0; 2]).unwrap();
        assert!(matches!(t.layer_norm(x, bad, bad, 1e-5), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_cases() {
        let s = store();
        let mut t = Tape::new(&s);
        let x = t.constant(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let y = t.softmax(x);
        assert_eq!(t.value(y), &[0.5, 0.5]);
        let x = t.constant(vec![1, 2], vec![1000.0, 0.0]).unwrap();
        let y = t.softmax(x);
        assert_eq!(t.value(y), &[1.0, 0.0]);
    }

    #[test]
    fn reductions_and_pooling() {
        let s = store();
        let mut t = Tape::new(&s);
        let x = t.constant(vec![2, 2], vec![1.0, 4.0, 3.0, 2.0]).unwrap();
        let m = t.max_pool(x).unwrap();
        assert_eq!(t.value(m), &[3.0, 4.0]);
        let mr = t.mean_rows(x);
        assert_eq!(t.value(mr), &[2.0, 3.0]);
        let s = t.sum(x);
        assert_eq!(t.value(s), &[10.0]);
        let mu = t.mean(x);
        assert_eq!(t.value(mu), &[2.5]);
    }

    #[test]
    fn cross_entropy_confident_and_bad_label() {
        let s = store();
        let mut t = Tape::new(&s);
        let x = t.constant(vec![1, 2], vec![10.0, -10.0]).unwrap();
        let l = t.cross_entropy(x, &[0]).unwrap();
        assert!(t.value(l)[0] < 1e-8);
        assert!(matches!(t.cross_entropy(x, &[2]), Err(Error::Index { .. })));
    }

    #[test]
    fn dropout_zero_and_eval_are_identity() {
        let s = store();
        let mut t = Tape::new(&s);
        let x = t.constant(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut rng = rand::rngs::mock::StepRng::new(0, 1);
        assert_eq!(t.dropout(x, 0.0, Some(&mut rng)).unwrap(), x);
        assert_eq!(t.dropout::<rand::rngs::mock::StepRng>(x, 0.5, None).unwrap(), x);
        assert!(t.dropout(x, 1.0, Some(&mut rng)).is_err());
    }

    #[test]
    fn grad_of_weighted_sum_is_input() {
        let mut s = store();
        let w = s
            .insert("w", Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap().with_requires_grad(true))
            .unwrap();
        let mut t = Tape::new(&s);
        let wv = t.param(w);
        let x = t.constant(vec![3], vec![4.0, 5.0, 6.0]).unwrap();
        let p = t.mul(wv, x).unwrap();
        let loss = t.sum(p);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.param(w).unwrap(), &[4.0, 5.0, 6.0]);
        assert!(g.wrt(x).is_none());
    }

    #[test]
    fn frozen_param_gets_no_gradient() {
        let mut s = store();
        let frozen = s.insert("f", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        let live = s
            .insert("l", Tensor::new(vec![2], vec![3.0, 4.0]).unwrap().with_requires_grad(true))
            .unwrap();
        let mut t = Tape::new(&s);
        let (f, l) = (t.param(frozen), t.param(live));
        let p = t.mul(f, l).unwrap();
        let loss = t.sum(p);
        let g = t.backward(loss).unwrap();
        assert!(g.param(frozen).is_none());
        assert_eq!(g.param(live).unwrap(), &[1.0, 2.0]);
        drop(t);
        s.zero_grad();
        s.accumulate(&g).unwrap();
        assert!(s.get(frozen).grad().is_none());
    }

    #[test]
    fn backward_contract_errors() {
        let s = store();
        let t = Tape::new(&s);
        let mut t2 = Tape::new(&s);
        let x = t2.constant(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(t2.backward(x), Err(Error::Contract(_))));
        drop(t);
    }

    #[test]
    fn attention_single_token_identity() {
        let s = store();
        let mut t = Tape::new(&s);
        let x = t.constant(vec![1, 4], vec![0.3, -1.0, 2.0, 0.5]).unwrap();
        let y = t.attention(x, x, x, 1, 2).unwrap();
        assert_eq!(t.value(y), t.value(x));
        assert!(matches!(t.attention(x, x, x, 1, 3), Err(Error::Config(_))));
    }
}
