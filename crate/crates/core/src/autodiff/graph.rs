use std::collections::BTreeMap;
use std::sync::Arc;

use super::kernels;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Scale,
    Gather,
    LayerNorm,
    Gelu,
    MaskAdd,
    Softmax,
    CrossEntropy,
    Sum,
    Mul,
    Transpose,
    Slice,
    Concat,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Scale(Var, T),
    Gather { table: Var, ids: Vec<usize> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu(Var),
    MaskAdd(Var),
    Softmax(Var),
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<T>, count: usize },
    Sum(Var),
    Mul(Var, Var),
    Transpose(Var),
    Slice { x: Var, axis: usize, start: usize, end: usize },
    Concat { parts: Vec<Var>, axis: usize },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Scale(..) => OpKind::Scale,
            Op::Gather { .. } => OpKind::Gather,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Gelu(..) => OpKind::Gelu,
            Op::MaskAdd(..) => OpKind::MaskAdd,
            Op::Softmax(..) => OpKind::Softmax,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Sum(..) => OpKind::Sum,
            Op::Mul(..) => OpKind::Mul,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Slice { .. } => OpKind::Slice,
            Op::Concat { .. } => OpKind::Concat,
        }
    }
}

struct Node<T> {
    op: Op<T>,
    value: Arc<Tensor<T>>,
    /// Leaf flag set by the caller.
    requires_grad: bool,
    /// True when some requires-grad leaf is upstream of this node.
    needs_grad: bool,
}

/// Records tensor operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so index order is a topological
/// order of the recorded DAG. Frozen tensors enter as constants and never
/// receive a gradient buffer.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to the requires-grad leaves.
#[derive(Clone)]
pub struct Gradients<T> {
    grads: BTreeMap<Var, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor<T>)> {
        self.grads.iter().map(|(v, t)| (*v, t))
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

fn matrix_dims(op: &str, t: &Tensor<impl Real>) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Shape(format!("{op}: expected a matrix, got shape {s:?}"))),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value: Arc::new(value), requires_grad: false, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Frozen input; shared without copying.
    pub fn constant(&mut self, value: Arc<Tensor<T>>) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value, requires_grad: false, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Trainable input.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { op: Op::Leaf, value: Arc::new(value), requires_grad: true, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = matrix_dims("matmul", ta)?;
        let (k2, n) = matrix_dims("matmul", tb)?;
        if k != k2 {
            return Err(shape_err("matmul", ta.shape(), tb.shape()));
        }
        let out = Tensor::new(vec![m, n], kernels::matmul(ta.data(), tb.data(), m, k, n))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::MatMul(a, b), out, ng))
    }

    /// Elementwise sum. `b` may also be a vector broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data: Vec<T> = if ta.shape() == tb.shape() {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect()
        } else if tb.rank() == 1 && ta.rank() >= 1 && ta.cols() == tb.len() {
            let c = tb.len();
            ta.data().iter().enumerate().map(|(i, &x)| x + tb.data()[i % c]).collect()
        } else {
            return Err(shape_err("add", ta.shape(), tb.shape()));
        };
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::Add(a, b), out, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let neg = self.scale(b, -1.0);
        self.add(a, neg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::lit(s);
        let out = self.value(a).map(|v| v * s);
        let ng = self.ng(a);
        self.push(Op::Scale(a, s), out, ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Op::Mul(a, b), out, ng))
    }

    /// Rows of a `(n × d)` table selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (n, d) = matrix_dims("gather", t)?;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= n {
                return Err(Error::Shape(format!("gather: id {id} out of range for table of {n} rows")));
            }
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        let ng = self.ng(table);
        Ok(self.push(Op::Gather { table, ids: ids.to_vec() }, out, ng))
    }

    /// Row-wise layer normalization followed by the affine `γ·x̂ + β`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let tx = self.value(x);
        let (rows, d) = matrix_dims("layer_norm", tx)?;
        let (tg, tb) = (self.value(gamma), self.value(beta));
        if tg.shape() != [d] || tb.shape() != [d] {
            return Err(shape_err("layer_norm", tx.shape(), tg.shape()));
        }
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = Vec::with_capacity(rows);
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let xh = &mut xhat[r * d..(r + 1) * d];
            rstd.push(kernels::normalize_row(tx.row(r), xh));
            for j in 0..d {
                out[r * d + j] = xh[j] * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::new(vec![rows, d], out)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(Op::LayerNorm { x, gamma, beta, xhat, rstd }, out, ng))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::gelu);
        let ng = self.ng(x);
        self.push(Op::Gelu(x), out, ng)
    }

    /// Adds a constant mask (0 or −∞ entries); gradient flows to `x` only.
    pub fn mask_add(&mut self, x: Var, mask: Var) -> Result<Var> {
        let (tx, tm) = (self.value(x), self.value(mask));
        if tx.shape() != tm.shape() {
            return Err(shape_err("mask_add", tx.shape(), tm.shape()));
        }
        let data = tx.data().iter().zip(tm.data()).map(|(&a, &m)| a + m).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.ng(x);
        Ok(self.push(Op::MaskAdd(x), out, ng))
    }

    /// Constant `(n × n)` mask that hides keys after each query.
    pub fn causal_mask(&mut self, n: usize) -> Var {
        let mut data = vec![T::zero(); n * n];
        for i in 0..n {
            for j in i + 1..n {
                data[i * n + j] = T::neg_infinity();
            }
        }
        self.constant(Arc::new(Tensor::new(vec![n, n], data).expect("square mask")))
    }

    /// Softmax over the trailing dimension.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let rows = out.len() / out.cols().max(1);
        for r in 0..rows {
            kernels::softmax_row(out.row_mut(r));
        }
        let ng = self.ng(x);
        self.push(Op::Softmax(x), out, ng)
    }

    /// Mean of `logsumexp(row) − row[target]` over rows that carry a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let t = self.value(logits);
        let (rows, v) = matrix_dims("cross_entropy", t)?;
        if targets.len() != rows {
            return Err(Error::Shape(format!("cross_entropy: {} targets for {rows} logit rows", targets.len())));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::invalid("cross_entropy: no target positions"));
        }
        let mut probs = vec![T::zero(); rows * v];
        let mut total = T::zero();
        for (r, target) in targets.iter().enumerate() {
            let Some(tgt) = *target else { continue };
            if tgt >= v {
                return Err(Error::Shape(format!("cross_entropy: target {tgt} outside vocabulary of {v}")));
            }
            let row = t.row(r);
            total = total + kernels::log_sum_exp(row) - row[tgt];
            let p = &mut probs[r * v..(r + 1) * v];
            p.copy_from_slice(row);
            kernels::softmax_row(p);
        }
        let out = Tensor::scalar(total / T::lit(count as f64));
        let ng = self.ng(logits);
        Ok(self.push(Op::CrossEntropy { logits, targets: targets.to_vec(), probs, count }, out, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let ng = self.ng(x);
        self.push(Op::Sum(x), Tensor::scalar(s), ng)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = matrix_dims("transpose", t)?;
        let out = Tensor::new(vec![c, r], kernels::transpose(t.data(), r, c))?;
        let ng = self.ng(x);
        Ok(self.push(Op::Transpose(x), out, ng))
    }

    /// Rows (`axis = 0`) or columns (`axis = 1`) `start..end` of a matrix.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = matrix_dims("slice", t)?;
        let limit = if axis == 0 { r } else { c };
        if axis > 1 || start > end || end > limit {
            return Err(Error::Shape(format!("slice: range {start}..{end} on axis {axis} of shape {:?}", t.shape())));
        }
        let out = if axis == 0 {
            Tensor::new(vec![end - start, c], t.data()[start * c..end * c].to_vec())?
        } else {
            let w = end - start;
            let mut data = Vec::with_capacity(r * w);
            for i in 0..r {
                data.extend_from_slice(&t.row(i)[start..end]);
            }
            Tensor::new(vec![r, w], data)?
        };
        let ng = self.ng(x);
        Ok(self.push(Op::Slice { x, axis, start, end }, out, ng))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Shape("concat: no inputs".into()))?;
        let (r0, c0) = matrix_dims("concat", self.value(*first))?;
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = matrix_dims("concat", self.value(p))?;
            let ok = match axis {
                0 => c == c0,
                1 => r == r0,
                _ => false,
            };
            if !ok {
                return Err(shape_err("concat", self.value(*first).shape(), self.value(p).shape()));
            }
            dims.push((r, c));
        }
        let out = if axis == 0 {
            let rows = dims.iter().map(|d| d.0).sum();
            let mut data = Vec::with_capacity(rows * c0);
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
            Tensor::new(vec![rows, c0], data)?
        } else {
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(r0 * cols);
            for i in 0..r0 {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row(i));
                }
            }
            Tensor::new(vec![r0, cols], data)?
        };
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Op::Concat { parts: parts.to_vec(), axis }, out, ng))
    }

    /// Reverse pass from a scalar. Only requires-grad leaves appear in the
    /// result; a loss with no path to any of them yields an empty table.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::Shape(format!("backward: loss must be scalar, got shape {:?}", root.value.shape())));
        }
        let mut out = BTreeMap::new();
        if !root.needs_grad {
            return Ok(Gradients { grads: out });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(root.value.shape().to_vec(), vec![T::one()])?);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(i, g, &mut grads, &mut out)?;
        }
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if node.requires_grad {
                out.entry(Var(i)).or_insert_with(|| Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients { grads: out })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.accumulate(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(
        &self,
        i: usize,
        g: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        out: &mut BTreeMap<Var, Tensor<T>>,
    ) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {
                if node.requires_grad {
                    out.insert(Var(i), g);
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.rows(), ta.cols());
                let n = tb.cols();
                if self.ng(*a) {
                    let da = kernels::matmul_a_bt(g.data(), tb.data(), m, n, k);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], da)?);
                }
                if self.ng(*b) {
                    let db = kernels::matmul_at_b(ta.data(), g.data(), m, k, n);
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], db)?);
                }
            }
            Op::Add(a, b) => {
                let tb = self.value(*b);
                if self.ng(*b) {
                    if tb.shape() == g.shape() {
                        self.accumulate(grads, *b, g.clone());
                    } else {
                        let c = tb.len();
                        let mut db = vec![T::zero(); c];
                        for (idx, &v) in g.data().iter().enumerate() {
                            db[idx % c] = db[idx % c] + v;
                        }
                        self.accumulate(grads, *b, Tensor::new(vec![c], db)?);
                    }
                }
                self.accumulate(grads, *a, g);
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|v| v * s));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let d = g.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d)?);
                }
                if self.ng(*b) {
                    let d = g.data().iter().zip(ta.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::new(g.shape().to_vec(), d)?);
                }
            }
            Op::Gather { table, ids } => {
                let mut dt = Tensor::zeros(self.value(*table).shape().to_vec());
                for (r, &id) in ids.iter().enumerate() {
                    let src = g.row(r);
                    for (d, &s) in dt.row_mut(id).iter_mut().zip(src) {
                        *d = *d + s;
                    }
                }
                self.accumulate(grads, *table, dt);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (rows, d) = (g.rows(), g.cols());
                let tg = self.value(*gamma);
                if self.ng(*gamma) || self.ng(*beta) {
                    let mut dg = vec![T::zero(); d];
                    let mut db = vec![T::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            let gv = g.data()[r * d + j];
                            dg[j] = dg[j] + gv * xhat[r * d + j];
                            db[j] = db[j] + gv;
                        }
                    }
                    self.accumulate(grads, *gamma, Tensor::new(vec![d], dg)?);
                    self.accumulate(grads, *beta, Tensor::new(vec![d], db)?);
                }
                if self.ng(*x) {
                    let nf = T::lit(d as f64);
                    let mut dx = vec![T::zero(); rows * d];
                    let mut dxhat = vec![T::zero(); d];
                    for r in 0..rows {
                        let mut sum_dxhat = T::zero();
                        let mut sum_dxhat_xhat = T::zero();
                        for j in 0..d {
                            let v = g.data()[r * d + j] * tg.data()[j];
                            dxhat[j] = v;
                            sum_dxhat = sum_dxhat + v;
                            sum_dxhat_xhat = sum_dxhat_xhat + v * xhat[r * d + j];
                        }
                        let scale = rstd[r] / nf;
                        for j in 0..d {
                            dx[r * d + j] = scale * (nf * dxhat[j] - sum_dxhat - xhat[r * d + j] * sum_dxhat_xhat);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(vec![rows, d], dx)?);
                }
            }
            Op::Gelu(x) => {
                let tx = self.value(*x);
                let d = g.data().iter().zip(tx.data()).map(|(&gv, &xv)| gv * kernels::gelu_grad(xv)).collect();
                self.accumulate(grads, *x, Tensor::new(g.shape().to_vec(), d)?);
            }
            Op::MaskAdd(x) => {
                self.accumulate(grads, *x, g);
            }
            Op::Softmax(x) => {
                let p = &node.value;
                let c = p.cols().max(1);
                let mut dx = vec![T::zero(); p.len()];
                for r in 0..p.len() / c {
                    let pr = p.row(r);
                    let gr = g.row(r);
                    let dotp = kernels::dot(pr, gr);
                    for j in 0..c {
                        dx[r * c + j] = pr[j] * (gr[j] - dotp);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(p.shape().to_vec(), dx)?);
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                let tl = self.value(*logits);
                let v = tl.cols();
                let scale = g.data()[0] / T::lit(*count as f64);
                let mut dl = vec![T::zero(); tl.len()];
                for (r, target) in targets.iter().enumerate() {
                    let Some(tgt) = *target else { continue };
                    for j in 0..v {
                        dl[r * v + j] = probs[r * v + j] * scale;
                    }
                    dl[r * v + tgt] = dl[r * v + tgt] - scale;
                }
                self.accumulate(grads, *logits, Tensor::new(tl.shape().to_vec(), dl)?);
            }
            Op::Sum(x) => {
                let tx = self.value(*x);
                let gv = g.data()[0];
                self.accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), vec![gv; tx.len()])?);
            }
            Op::Transpose(x) => {
                let (r, c) = (g.rows(), g.cols());
                self.accumulate(grads, *x, Tensor::new(vec![c, r], kernels::transpose(g.data(), r, c))?);
            }
            Op::Slice { x, axis, start, end } => {
                let tx = self.value(*x);
                let mut dx = Tensor::zeros(tx.shape().to_vec());
                if *axis == 0 {
                    let c = tx.cols();
                    dx.data_mut()[start * c..end * c].copy_from_slice(g.data());
                } else {
                    for r in 0..tx.rows() {
                        dx.row_mut(r)[*start..*end].copy_from_slice(g.row(r));
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Concat { parts, axis } => {
                if *axis == 0 {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        if self.ng(p) {
                            let piece = g.data()[offset..offset + n].to_vec();
                            self.accumulate(grads, p, Tensor::new(self.value(p).shape().to_vec(), piece)?);
                        }
                        offset += n;
                    }
                } else {
                    let mut col = 0;
                    for &p in parts {
                        let tp = self.value(p);
                        let w = tp.cols();
                        if self.ng(p) {
                            let mut data = Vec::with_capacity(tp.len());
                            for r in 0..tp.rows() {
                                data.extend_from_slice(&g.row(r)[col..col + w]);
                            }
                            self.accumulate(grads, p, Tensor::new(tp.shape().to_vec(), data)?);
                        }
                        col += w;
                    }
                }
            }
        }
        Ok(())
    }
}
