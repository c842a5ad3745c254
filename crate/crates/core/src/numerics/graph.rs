//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every operation applied to its nodes in creation
//! order, so node ids are already a topological order and the backward pass
//! is a single reverse sweep. Leaves are copied into the graph; parameters
//! are leaves created with `requires_grad` set.

use crate::error::{Error, Result};
use crate::numerics::tensor::{matmul_at_into, matmul_bt_into, matmul_into, Float, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScaleBy { x: Var, s: Var, idx: usize },
    Silu(Var),
    Embedding { table: Var, ids: Vec<usize> },
    RmsNorm { x: Var, w: Var, inv_rms: Vec<T> },
    Softmax(Var),
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, count: usize },
    Rope { x: Var, head_dim: usize, cos: Vec<T>, sin: Vec<T> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Sum(Var),
    AddN(Vec<Var>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Rows `i` of a causal softmax may see columns `j <= i + offset`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mask {
    None,
    Causal { offset: usize },
}

pub struct Graph<T: Float = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<T: Float>(a: &Tensor<T>, b: &Tensor<T>, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn dims2<T: Float>(t: &Tensor<T>, op: &str) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::shape(format!(
            "{op}: expected a matrix, got shape {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies `t` into the graph; gradients are tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        let requires_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t.clone().with_requires_grad(false),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t.with_requires_grad(false),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t.clone().with_requires_grad(false),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a), "matmul")?;
        let (k2, n) = dims2(self.value(b), "matmul")?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul: inner dimensions of {:?} and {:?} disagree",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.value(a), "matmul_bt")?;
        let (n, k2) = dims2(self.value(b), "matmul_bt")?;
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul_bt: {:?} and transposed {:?} disagree",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_bt_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMulBt(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x + *y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x * *y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| *a * c).collect())
            .expect("same shape");
        self.push(t, Op::Scale(x, c), &[x])
    }

    /// `x * s[idx]` where `s` is a learnable vector.
    pub fn scale_by(&mut self, x: Var, s: Var, idx: usize) -> Result<Var> {
        let sv = self.value(s);
        if idx >= sv.numel() {
            return Err(Error::shape(format!(
                "scale_by: index {idx} out of range for {:?}",
                sv.shape()
            )));
        }
        let c = sv.data()[idx];
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|a| *a * c).collect())?;
        Ok(self.push(t, Op::ScaleBy { x, s, idx }, &[x, s]))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a * sigmoid(a)).collect();
        let t = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Silu(x), &[x])
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, dim) = dims2(self.value(table), "embedding")?;
        if ids.is_empty() {
            return Err(Error::shape("embedding: empty id list"));
        }
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(Error::shape(format!(
                    "embedding: id {id} outside vocabulary of {vocab}"
                )));
            }
            data.extend_from_slice(self.value(table).row(id));
        }
        let t = Tensor::new(vec![ids.len(), dim], data)?;
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Per row: `x / sqrt(mean(x²) + eps) ⊙ w`.
    pub fn rmsnorm(&mut self, x: Var, w: Var, eps: T) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let c = xv.cols();
        if wv.shape() != [c] {
            return Err(Error::shape(format!(
                "rmsnorm: weight {:?} does not match rows of width {c}",
                wv.shape()
            )));
        }
        let (out, inv) = rmsnorm_forward(xv.data(), wv.data(), c, eps);
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(t, Op::RmsNorm { x, w, inv_rms: inv }, &[x, w]))
    }

    /// Softmax over the trailing axis of a matrix. Masked entries are exactly 0.
    pub fn softmax(&mut self, x: Var, mask: Mask) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = match mask {
            Mask::None => (xv.rows(), xv.cols()),
            Mask::Causal { .. } => dims2(xv, "softmax")?,
        };
        let mut out = vec![T::zero(); rows * cols];
        for i in 0..rows {
            let visible = match mask {
                Mask::None => cols,
                Mask::Causal { offset } => (i + offset + 1).min(cols),
            };
            softmax_slice(
                &xv.data()[i * cols..i * cols + visible],
                &mut out[i * cols..i * cols + visible],
            );
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Softmax(x), &[x]))
    }

    /// Mean negative log-likelihood over rows whose target is `Some`.
    /// With every row ignored the loss is exactly 0.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, vocab) = dims2(lv, "cross_entropy")?;
        if targets.len() != rows {
            return Err(Error::shape(format!(
                "cross_entropy: {} targets for {rows} rows",
                targets.len()
            )));
        }
        let mut total = T::zero();
        let mut count = 0usize;
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                if t >= vocab {
                    return Err(Error::shape(format!(
                        "cross_entropy: target {t} outside vocabulary of {vocab}"
                    )));
                }
                let row = lv.row(i);
                total = total + (log_sum_exp(row) - row[t]);
                count += 1;
            }
        }
        let loss = if count == 0 {
            T::zero()
        } else {
            total / T::from_usize(count).expect("count")
        };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                count,
            },
            &[logits],
        ))
    }

    /// Rotary position encoding on interleaved pairs within each head.
    /// `positions[i]` is the (possibly negative) position of row `i`.
    pub fn rope(&mut self, x: Var, head_dim: usize, positions: &[f64], base: f64) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = dims2(xv, "rope")?;
        if head_dim == 0 || head_dim % 2 != 0 || cols % head_dim != 0 {
            return Err(Error::shape(format!(
                "rope: head_dim {head_dim} incompatible with width {cols}"
            )));
        }
        if positions.len() != rows {
            return Err(Error::shape(format!(
                "rope: {} positions for {rows} rows",
                positions.len()
            )));
        }
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(rows * half);
        let mut sin = Vec::with_capacity(rows * half);
        for &p in positions {
            for k in 0..half {
                let freq = base.powf(-2.0 * k as f64 / head_dim as f64);
                let theta = p * freq;
                cos.push(T::from_f64_lossy(theta.cos()));
                sin.push(T::from_f64_lossy(theta.sin()));
            }
        }
        let out = rope_apply(xv.data(), rows, cols, head_dim, &cos, &sin, false);
        let t = Tensor::new(vec![rows, cols], out)?;
        Ok(self.push(
            t,
            Op::Rope {
                x,
                head_dim,
                cos,
                sin,
            },
            &[x],
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = dims2(self.value(x), "slice_cols")?;
        if len == 0 || start + len > cols {
            return Err(Error::shape(format!(
                "slice_cols: [{start}, {}) outside width {cols}",
                start + len
            )));
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(rows * len);
        for i in 0..rows {
            data.extend_from_slice(&xv.row(i)[start..start + len]);
        }
        let t = Tensor::new(vec![rows, len], data)?;
        Ok(self.push(t, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_cols: nothing to concatenate"))?;
        let (rows, _) = dims2(self.value(first), "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = dims2(self.value(p), "concat_cols")?;
            if r != rows {
                return Err(Error::shape(format!(
                    "concat_cols: row counts {rows} and {r} differ"
                )));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let t = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_rows: nothing to concatenate"))?;
        let (_, cols) = dims2(self.value(first), "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = dims2(self.value(p), "concat_rows")?;
            if c != cols {
                return Err(Error::shape(format!(
                    "concat_rows: widths {cols} and {c} differ"
                )));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn add_n(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("add_n: nothing to add"))?;
        let mut acc = self.value(first).clone();
        for &p in &parts[1..] {
            same_shape(&acc, self.value(p), "add_n")?;
            for (a, b) in acc.data_mut().iter_mut().zip(self.value(p).data()) {
                *a = *a + *b;
            }
        }
        Ok(self.push(acc, Op::AddN(parts.to_vec()), parts))
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// requires them. Leaves with `requires_grad` that the loss does not
    /// reach receive zero gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar seed, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }

        let out = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                if !node.requires_grad {
                    return None;
                }
                let shape = node.value.shape().to_vec();
                let data = g.unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                Some(Tensor::new(shape, data).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let acc = |grads: &mut [Option<Vec<T>>], v: Var| -> Option<usize> {
            if !self.nodes[v.0].requires_grad {
                return None;
            }
            if grads[v.0].is_none() {
                grads[v.0] = Some(vec![T::zero(); self.nodes[v.0].value.numel()]);
            }
            Some(v.0)
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if let Some(ia) = acc(grads, *a) {
                    matmul_bt_into(g, bv.data(), grads[ia].as_mut().unwrap(), m, n, k);
                }
                if let Some(ib) = acc(grads, *b) {
                    matmul_at_into(av.data(), g, grads[ib].as_mut().unwrap(), m, k, n);
                }
            }
            Op::MatMulBt(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[0];
                if let Some(ia) = acc(grads, *a) {
                    matmul_into(g, bv.data(), grads[ia].as_mut().unwrap(), m, n, k);
                }
                if let Some(ib) = acc(grads, *b) {
                    matmul_at_into(g, av.data(), grads[ib].as_mut().unwrap(), m, n, k);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(i) = acc(grads, v) {
                        add_assign(grads[i].as_mut().unwrap(), g);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(i) = acc(grads, *a) {
                    for ((o, gi), y) in grads[i].as_mut().unwrap().iter_mut().zip(g).zip(bv) {
                        *o = *o + *gi * *y;
                    }
                }
                if let Some(i) = acc(grads, *b) {
                    for ((o, gi), x) in grads[i].as_mut().unwrap().iter_mut().zip(g).zip(av) {
                        *o = *o + *gi * *x;
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(i) = acc(grads, *x) {
                    for (o, gi) in grads[i].as_mut().unwrap().iter_mut().zip(g) {
                        *o = *o + *gi * *c;
                    }
                }
            }
            Op::ScaleBy { x, s, idx } => {
                let c = self.value(*s).data()[*idx];
                if let Some(i) = acc(grads, *x) {
                    for (o, gi) in grads[i].as_mut().unwrap().iter_mut().zip(g) {
                        *o = *o + *gi * c;
                    }
                }
                if let Some(i) = acc(grads, *s) {
                    let dot: T = g
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(a, b)| *a * *b)
                        .sum();
                    let gs = grads[i].as_mut().unwrap();
                    gs[*idx] = gs[*idx] + dot;
                }
            }
            Op::Silu(x) => {
                if let Some(i) = acc(grads, *x) {
                    let xv = self.value(*x).data();
                    for ((o, gi), &a) in grads[i].as_mut().unwrap().iter_mut().zip(g).zip(xv) {
                        let s = sigmoid(a);
                        *o = *o + *gi * s * (T::one() + a * (T::one() - s));
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if let Some(i) = acc(grads, *table) {
                    let dim = self.value(*table).cols();
                    let gt = grads[i].as_mut().unwrap();
                    for (r, &id) in ids.iter().enumerate() {
                        add_assign(&mut gt[id * dim..(id + 1) * dim], &g[r * dim..(r + 1) * dim]);
                    }
                }
            }
            Op::RmsNorm { x, w, inv_rms } => {
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let c = wv.len();
                let cf = T::from_usize(c).expect("width");
                if let Some(i) = acc(grads, *w) {
                    let gw = grads[i].as_mut().unwrap();
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        for j in 0..c {
                            gw[j] = gw[j] + g[r * c + j] * xv[r * c + j] * inv;
                        }
                    }
                }
                if let Some(i) = acc(grads, *x) {
                    let gx = grads[i].as_mut().unwrap();
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let row = r * c..(r + 1) * c;
                        let dot: T = g[row.clone()]
                            .iter()
                            .zip(wv)
                            .zip(&xv[row.clone()])
                            .map(|((gy, wj), xj)| *gy * *wj * *xj * inv)
                            .sum();
                        let mean = dot / cf;
                        for j in 0..c {
                            let xhat = xv[r * c + j] * inv;
                            gx[r * c + j] = gx[r * c + j] + inv * (g[r * c + j] * wv[j] - xhat * mean);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                if let Some(i) = acc(grads, *x) {
                    let y = node.value.data();
                    let cols = node.value.cols();
                    let gx = grads[i].as_mut().unwrap();
                    for r in 0..node.value.rows() {
                        let row = r * cols..(r + 1) * cols;
                        let dot: T = g[row.clone()]
                            .iter()
                            .zip(&y[row.clone()])
                            .map(|(a, b)| *a * *b)
                            .sum();
                        for j in row {
                            gx[j] = gx[j] + y[j] * (g[j] - dot);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                if let Some(i) = acc(grads, *logits) {
                    let lv = self.value(*logits);
                    let vocab = lv.cols();
                    let scale = g[0] / T::from_usize(*count).expect("count");
                    let gl = grads[i].as_mut().unwrap();
                    let mut probs = vec![T::zero(); vocab];
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        softmax_slice(lv.row(r), &mut probs);
                        probs[t] = probs[t] - T::one();
                        for (o, p) in gl[r * vocab..(r + 1) * vocab].iter_mut().zip(&probs) {
                            *o = *o + *p * scale;
                        }
                    }
                }
            }
            Op::Rope {
                x,
                head_dim,
                cos,
                sin,
            } => {
                if let Some(i) = acc(grads, *x) {
                    let (rows, cols) = (node.value.shape()[0], node.value.shape()[1]);
                    let back = rope_apply(g, rows, cols, *head_dim, cos, sin, true);
                    add_assign(grads[i].as_mut().unwrap(), &back);
                }
            }
            Op::SliceCols { x, start } => {
                if let Some(i) = acc(grads, *x) {
                    let cols = self.value(*x).cols();
                    let len = node.value.cols();
                    let gx = grads[i].as_mut().unwrap();
                    for r in 0..node.value.rows() {
                        add_assign(
                            &mut gx[r * cols + start..r * cols + start + len],
                            &g[r * len..(r + 1) * len],
                        );
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if let Some(i) = acc(grads, p) {
                        let gp = grads[i].as_mut().unwrap();
                        for r in 0..node.value.rows() {
                            add_assign(
                                &mut gp[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if let Some(i) = acc(grads, p) {
                        add_assign(grads[i].as_mut().unwrap(), &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::Sum(x) => {
                if let Some(i) = acc(grads, *x) {
                    for o in grads[i].as_mut().unwrap().iter_mut() {
                        *o = *o + g[0];
                    }
                }
            }
            Op::AddN(parts) => {
                for &p in parts {
                    if let Some(i) = acc(grads, p) {
                        add_assign(grads[i].as_mut().unwrap(), g);
                    }
                }
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    /// `None` when `v` does not require gradients.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn add_assign<T: Float>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

pub(crate) fn sigmoid<T: Float>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

pub(crate) fn log_sum_exp<T: Float>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + s.ln()
}

pub(crate) fn softmax_slice<T: Float>(x: &[T], out: &mut [T]) {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        total = total + *o;
    }
    for o in out.iter_mut() {
        *o = *o / total;
    }
}

pub(crate) fn rmsnorm_forward<T: Float>(x: &[T], w: &[T], c: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let cf = T::from_usize(c).expect("width");
    let mut out = Vec::with_capacity(x.len());
    let mut inv = Vec::with_capacity(x.len() / c);
    for row in x.chunks(c) {
        let ms: T = row.iter().map(|v| *v * *v).sum::<T>() / cf;
        let r = T::one() / (ms + eps).sqrt();
        inv.push(r);
        out.extend(row.iter().zip(w).map(|(v, wj)| *v * r * *wj));
    }
    (out, inv)
}

fn rope_apply<T: Float>(
    x: &[T],
    rows: usize,
    cols: usize,
    head_dim: usize,
    cos: &[T],
    sin: &[T],
    inverse: bool,
) -> Vec<T> {
    let half = head_dim / 2;
    let mut out = vec![T::zero(); x.len()];
    for r in 0..rows {
        for h in 0..cols / head_dim {
            for k in 0..half {
                let (c, mut s) = (cos[r * half + k], sin[r * half + k]);
                if inverse {
                    s = -s;
                }
                let i0 = r * cols + h * head_dim + 2 * k;
                let (a, b) = (x[i0], x[i0 + 1]);
                out[i0] = a * c - b * s;
                out[i0 + 1] = a * s + b * c;
            }
        }
    }
    out
}
