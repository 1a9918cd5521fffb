use std::mem;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::attention::{self, AttentionLayout, AttentionRecord};
use super::gemm::{gemm, View, ViewMut};
use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

/// Dropout request: drop probability and the generator that draws the mask.
pub struct Dropout<'r> {
    pub p: f64,
    pub rng: &'r mut ChaCha8Rng,
}

struct Node<T> {
    shape: Vec<usize>,
    value: Arc<Vec<T>>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    AddBias { x: Var, bias: Var },
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Gelu(Var),
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, mean: Vec<T>, rstd: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<T>, probs: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    Dropout { x: Var, mask: Vec<T> },
    ConcatRows(Var, Var),
    Attention(Box<AttentionRecord<T>>),
}

/// Ordered record of primitive operations.
///
/// Nodes are appended in evaluation order, so the tape is already a
/// topological order and [`Tape::backward`] is a single reverse sweep.
/// Leaf gradients accumulate across `backward` calls; intermediate gradients
/// are recomputed from scratch on each call.
pub struct Tape<T: Float = f32> {
    nodes: Vec<Node<T>>,
    record: bool,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_COEF: f64 = 0.044715;

fn gelu_scale() -> f64 {
    (2.0 / std::f64::consts::PI).sqrt()
}

impl<T: Float> Tape<T> {
    /// A tape that records gradients.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
        }
    }

    /// A tape for evaluation only: nothing requires grad and no backward
    /// state is retained.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a tensor as a leaf. The value buffer is shared, not copied.
    pub fn leaf(&mut self, tensor: &Tensor<T>) -> Var {
        let requires_grad = self.record && tensor.requires_grad();
        self.nodes.push(Node {
            shape: tensor.shape().to_vec(),
            value: tensor.shared(),
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a non-differentiable value.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "constant",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        self.nodes.push(Node {
            shape,
            value: Arc::new(data),
            op: Op::Leaf,
            requires_grad: false,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    /// Copies a node's value (and gradient, if any) out as a tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let node = &self.nodes[v.0];
        let mut t = Tensor::new(node.shape.clone(), (*node.value).clone()).expect("node shape");
        if let Some(g) = &node.grad {
            t.set_requires_grad(true);
            t.accumulate_grad(g).expect("grad shape");
        }
        t
    }

    /// Moves leaf gradients into `tensor`, keyed by the var it was recorded as.
    pub fn write_grad(&self, v: Var, tensor: &mut Tensor<T>) -> Result<()> {
        if let Some(g) = &self.nodes[v.0].grad {
            tensor.accumulate_grad(g)?;
        }
        Ok(())
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = self.record && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value: Arc::new(value),
            op: if requires_grad { op } else { Op::Leaf },
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Shape {
                op,
                lhs: other.to_vec(),
                rhs: vec![],
            }),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    /// `[m×k] · [k×n] → [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            T::one(),
            View::dense(self.value(a), m, k),
            View::dense(self.value(b), k, n),
            T::zero(),
            ViewMut::dense(&mut out, m, n),
        );
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, trans_b: false }, &[a, b]))
    }

    /// `[m×k] · [n×k]ᵀ → [m×n]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul_t")?;
        let (n, k2) = self.matrix_dims(b, "matmul_t")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul_t",
                lhs: vec![m, k],
                rhs: vec![n, k2],
            });
        }
        let mut out = vec![T::zero(); m * n];
        gemm(
            T::one(),
            View::dense(self.value(a), m, k),
            View::dense(self.value(b), n, k).t(),
            T::zero(),
            ViewMut::dense(&mut out, m, n),
        );
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, trans_b: true }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x + *y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), &[a, b]))
    }

    /// Adds a `[d]` vector to every row of `x[..×d]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if self.shape(bias) != [d] {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias);
        let out = self
            .value(x)
            .chunks(d.max(1))
            .flat_map(|row| row.iter().zip(b).map(|(x, b)| *x + *b))
            .collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddBias { x, bias }, &[x, bias]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x * *y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).iter().map(|v| *v * c).collect();
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, c), &[x])
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        self.push(Vec::new(), vec![s], Op::Sum(x), &[x])
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let c = T::lit(gelu_scale());
        let a = T::lit(GELU_COEF);
        let half = T::lit(0.5);
        let out = self
            .value(x)
            .iter()
            .map(|&v| half * v * (T::one() + (c * (v + a * v * v * v)).tanh()))
            .collect();
        self.push(self.shape(x).to_vec(), out, Op::Gelu(x), &[x])
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Index {
                what: "softmax axis",
                index: axis,
                bound: shape.len(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x);
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let idx = |j: usize| base + j * inner;
                let max = (0..len).map(|j| src[idx(j)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for j in 0..len {
                    let e = (src[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[idx(j)] /= total;
                }
            }
        }
        Ok(self.push(shape, out, Op::Softmax { x, outer, len, inner }, &[x]))
    }

    /// Row-wise layer normalization over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let eps = T::lit(eps);
        let inv_d = T::one() / T::lit(d as f64);
        let (xs, g, b) = (self.value(x), self.value(gain), self.value(bias));
        let rows = xs.len() / d.max(1);
        let mut out = vec![T::zero(); xs.len()];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rstd = T::one() / (var + eps).sqrt();
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            mean: means,
            rstd: rstds,
        };
        Ok(self.push(self.shape(x).to_vec(), out, op, &[x, gain, bias]))
    }

    /// `Σ_i w_i · (−log softmax(logits_i)[target_i])` as a scalar.
    ///
    /// Rows with zero weight are skipped entirely, so they contribute nothing
    /// to the value or the gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[T]) -> Result<Var> {
        let (n, vocab) = self.matrix_dims(logits, "cross_entropy")?;
        if targets.len() != n || weights.len() != n {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: vec![n, vocab],
                rhs: vec![targets.len(), weights.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::Index {
                what: "cross_entropy target",
                index: bad,
                bound: vocab,
            });
        }
        let z = self.value(logits);
        let keep = self.record;
        let mut probs = if keep { vec![T::zero(); n * vocab] } else { Vec::new() };
        let mut total = T::zero();
        for i in 0..n {
            let w = weights[i];
            if w == T::zero() {
                continue;
            }
            let row = &z[i * vocab..(i + 1) * vocab];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum_exp: T = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + sum_exp.ln();
            total += w * (lse - row[targets[i]]);
            if keep {
                for (p, &v) in probs[i * vocab..(i + 1) * vocab].iter_mut().zip(row) {
                    *p = (v - lse).exp();
                }
            }
        }
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            weights: weights.to_vec(),
            probs,
        };
        Ok(self.push(Vec::new(), vec![total], op, &[logits]))
    }

    /// Gathers rows of `table[V×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.matrix_dims(table, "embedding")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Index {
                what: "embedding id",
                index: bad,
                bound: vocab,
            });
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        Ok(self.push(vec![ids.len(), d], out, Op::Embedding { table, ids: ids.to_vec() }, &[table]))
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout(&mut self, x: Var, dropout: Option<Dropout<'_>>) -> Var {
        let Some(Dropout { p, rng }) = dropout else {
            return x;
        };
        if p <= 0.0 {
            return x;
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let out = self.value(x).iter().zip(&mask).map(|(v, m)| *v * *m).collect();
        self.push(self.shape(x).to_vec(), out, Op::Dropout { x, mask }, &[x])
    }

    /// Stacks `a[m×d]` on top of `b[n×d]`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, d) = self.matrix_dims(a, "concat_rows")?;
        let (n, d2) = self.matrix_dims(b, "concat_rows")?;
        if d != d2 {
            return Err(Error::Shape {
                op: "concat_rows",
                lhs: vec![m, d],
                rhs: vec![n, d2],
            });
        }
        let mut out = Vec::with_capacity((m + n) * d);
        out.extend_from_slice(self.value(a));
        out.extend_from_slice(self.value(b));
        Ok(self.push(vec![m + n, d], out, Op::ConcatRows(a, b), &[a, b]))
    }

    /// Fused multi-head scaled dot-product attention.
    ///
    /// `q` is `[Nq×d]`, `k` and `v` are `[Nk×d]`. The layout partitions query
    /// rows into blocks, each attending to a contiguous range of key rows under
    /// its own mask. Scores are scaled by `1/sqrt(d/heads)`; masked positions
    /// get zero probability.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        layout: &Arc<AttentionLayout>,
        heads: usize,
        dropout: Option<Dropout<'_>>,
    ) -> Result<Var> {
        let (nq, d) = self.matrix_dims(q, "attention")?;
        let (nk, dk) = self.matrix_dims(k, "attention")?;
        if self.shape(v) != [nk, dk] || dk != d {
            return Err(Error::Shape {
                op: "attention",
                lhs: vec![nq, d],
                rhs: self.shape(v).to_vec(),
            });
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::contract(format!("d_model {d} is not divisible by {heads} heads")));
        }
        layout.check_extent(nq, nk)?;
        let forward = attention::forward(
            self.value(q),
            self.value(k),
            self.value(v),
            d,
            layout,
            heads,
            dropout,
            self.record,
        );
        let record = AttentionRecord {
            q,
            k,
            v,
            layout: Arc::clone(layout),
            heads,
            probs: forward.probs,
            drop_mask: forward.drop_mask,
        };
        Ok(self.push(vec![nq, d], forward.out, Op::Attention(Box::new(record)), &[q, k, v]))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Gradients are added into every `requires_grad` leaf reachable from the
    /// loss; calling this twice without clearing doubles leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        for node in &mut self.nodes[..=loss.0] {
            if !matches!(node.op, Op::Leaf) {
                node.grad = None;
            }
        }
        self.accumulate(loss, vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.propagate(i, &op, &grad);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(grad);
        }
        Ok(())
    }

    /// Clears every gradient on the tape.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn accumulate(&mut self, v: Var, delta: Vec<T>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => g.iter_mut().zip(&delta).for_each(|(g, d)| *g += *d),
            None => node.grad = Some(delta),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&mut self, idx: usize, op: &Op<T>, g: &[T]) {
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = g.len() / m.max(1);
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    let bv = if *trans_b {
                        View::dense(self.value(*b), n, k)
                    } else {
                        View::dense(self.value(*b), k, n).t()
                    };
                    gemm(T::one(), View::dense(g, m, n), bv, T::zero(), ViewMut::dense(&mut da, m, k));
                    self.accumulate(*a, da);
                }
                if self.wants(*b) {
                    let av = View::dense(self.value(*a), m, k);
                    let gv = View::dense(g, m, n);
                    let db = if *trans_b {
                        let mut db = vec![T::zero(); n * k];
                        gemm(T::one(), gv.t(), av, T::zero(), ViewMut::dense(&mut db, n, k));
                        db
                    } else {
                        let mut db = vec![T::zero(); k * n];
                        gemm(T::one(), av.t(), gv, T::zero(), ViewMut::dense(&mut db, k, n));
                        db
                    };
                    self.accumulate(*b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(*a, g.to_vec());
                self.accumulate(*b, g.to_vec());
            }
            Op::AddBias { x, bias } => {
                if self.wants(*bias) {
                    let d = self.shape(*bias)[0];
                    let mut db = vec![T::zero(); d];
                    for row in g.chunks(d.max(1)) {
                        db.iter_mut().zip(row).for_each(|(s, v)| *s += *v);
                    }
                    self.accumulate(*bias, db);
                }
                self.accumulate(*x, g.to_vec());
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let da = g.iter().zip(self.value(*b)).map(|(g, y)| *g * *y).collect();
                    self.accumulate(*a, da);
                }
                if self.wants(*b) {
                    let db = g.iter().zip(self.value(*a)).map(|(g, x)| *g * *x).collect();
                    self.accumulate(*b, db);
                }
            }
            Op::Scale(x, c) => {
                let dx = g.iter().map(|v| *v * *c).collect();
                self.accumulate(*x, dx);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.accumulate(*x, vec![g[0]; n]);
            }
            Op::Gelu(x) => {
                let c = T::lit(gelu_scale());
                let a = T::lit(GELU_COEF);
                let half = T::lit(0.5);
                let three_a = T::lit(3.0 * GELU_COEF);
                let dx = self
                    .value(*x)
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| {
                        let t = (c * (v + a * v * v * v)).tanh();
                        let dt = c * (T::one() + three_a * v * v);
                        gv * (half * (T::one() + t) + half * v * (T::one() - t * t) * dt)
                    })
                    .collect();
                self.accumulate(*x, dx);
            }
            Op::Softmax { x, outer, len, inner } => {
                let y = &self.nodes[idx].value;
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let base = o * len * inner + i;
                        let dot: T = (0..*len).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                        for j in 0..*len {
                            let p = base + j * inner;
                            dx[p] = y[p] * (g[p] - dot);
                        }
                    }
                }
                self.accumulate(*x, dx);
            }
            Op::LayerNorm { x, gain, bias, mean, rstd } => {
                let d = self.shape(*gain)[0];
                let xs = self.value(*x);
                let gn = self.value(*gain);
                let inv_d = T::one() / T::lit(d as f64);
                let mut dx = vec![T::zero(); xs.len()];
                let mut dg = vec![T::zero(); d];
                let mut db = vec![T::zero(); d];
                let mut xhat = vec![T::zero(); d];
                let mut dxhat = vec![T::zero(); d];
                for r in 0..mean.len() {
                    let row = &xs[r * d..(r + 1) * d];
                    let grow = &g[r * d..(r + 1) * d];
                    let mut mean_dxhat = T::zero();
                    let mut mean_dxhat_xhat = T::zero();
                    for j in 0..d {
                        xhat[j] = (row[j] - mean[r]) * rstd[r];
                        dxhat[j] = grow[j] * gn[j];
                        mean_dxhat += dxhat[j];
                        mean_dxhat_xhat += dxhat[j] * xhat[j];
                        dg[j] += grow[j] * xhat[j];
                        db[j] += grow[j];
                    }
                    mean_dxhat *= inv_d;
                    mean_dxhat_xhat *= inv_d;
                    for j in 0..d {
                        dx[r * d + j] = rstd[r] * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
                self.accumulate(*x, dx);
                self.accumulate(*gain, dg);
                self.accumulate(*bias, db);
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let vocab = self.shape(*logits)[1];
                let mut dz = vec![T::zero(); probs.len()];
                for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    if w == T::zero() {
                        continue;
                    }
                    let scale = g[0] * w;
                    let row = &mut dz[i * vocab..(i + 1) * vocab];
                    for (d, &p) in row.iter_mut().zip(&probs[i * vocab..(i + 1) * vocab]) {
                        *d = scale * p;
                    }
                    row[t] -= scale;
                }
                self.accumulate(*logits, dz);
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                let mut dt = vec![T::zero(); self.value(*table).len()];
                for (r, &i) in ids.iter().enumerate() {
                    dt[i * d..(i + 1) * d]
                        .iter_mut()
                        .zip(&g[r * d..(r + 1) * d])
                        .for_each(|(s, v)| *s += *v);
                }
                self.accumulate(*table, dt);
            }
            Op::Dropout { x, mask } => {
                let dx = g.iter().zip(mask).map(|(g, m)| *g * *m).collect();
                self.accumulate(*x, dx);
            }
            Op::ConcatRows(a, b) => {
                let split = self.value(*a).len();
                self.accumulate(*a, g[..split].to_vec());
                self.accumulate(*b, g[split..].to_vec());
            }
            Op::Attention(rec) => {
                let grads = attention::backward(
                    rec,
                    self.value(rec.q),
                    self.value(rec.k),
                    self.value(rec.v),
                    g,
                    [self.wants(rec.q), self.wants(rec.k), self.wants(rec.v)],
                );
                for (var, grad) in [rec.q, rec.k, rec.v].into_iter().zip(grads) {
                    if let Some(grad) = grad {
                        self.accumulate(var, grad);
                    }
                }
            }
        }
    }
}
