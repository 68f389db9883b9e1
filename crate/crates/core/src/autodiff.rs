//! A small tape-based reverse-mode autodiff engine.
//!
//! Only the handful of operations the GRU model needs are provided. Values
//! are row-major and at most two-dimensional; a row vector is `[1, n]` and a
//! scalar has an empty shape. The only broadcast is adding a `[n]` bias to
//! every row of an `[m, n]` matrix.
//!
//! A [`Graph`] borrows a slice of parameter tensors, records operations in
//! execution order and, on [`Graph::backward`], returns one gradient buffer
//! per parameter. Dropout masks are plain inputs, sampled by the caller.

use std::fmt::Debug;

use num_traits::Float;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: index {index} out of range for size {size}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("buffer of {len} values does not fit shape {shape:?}")]
    BadBuffer { shape: Vec<usize>, len: usize },
    #[error("dropout rate {0} outside [0, 1)")]
    BadRate(f64),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

pub type Result<T, E = AutodiffError> = std::result::Result<T, E>;

/// Scalar element type of tensors and graphs.
pub trait Element: Float + Default + Debug + Send + Sync + 'static {
    fn of(x: f64) -> Self;
}

impl Element for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
}

impl Element for f64 {
    fn of(x: f64) -> Self {
        x
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    values: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: Vec<usize>, values: Vec<T>) -> Result<Self> {
        if numel(&shape) != values.len() {
            return Err(AutodiffError::BadBuffer {
                shape,
                len: values.len(),
            });
        }
        Ok(Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Tensor {
            shape,
            values: vec![T::zero(); n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Vec::new(),
            values: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn row(values: Vec<T>) -> Self {
        Tensor {
            shape: vec![1, values.len()],
            values,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    /// Adds `delta` into the stored gradient, creating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[T]) {
        let n = self.values.len();
        let grad = self.grad.get_or_insert_with(|| vec![T::zero(); n]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g = *g + *d;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            values: self
                .values
                .iter()
                .map(|v| U::of(v.to_f64().expect("finite cast")))
                .collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }
}

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Concat(Vec<Var>),
    Embedding { table: Var, index: usize },
    Dropout { x: Var, scale: Vec<T> },
    SoftmaxCrossEntropy { logits: Var, target: usize, probs: Vec<T> },
    Sum(Var),
    Mean(Vec<Var>),
}

#[derive(Debug)]
enum Storage<T> {
    Owned(Vec<T>),
    Param(usize),
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    storage: Storage<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Per-parameter gradients produced by [`Graph::backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T = f32> {
    grads: Vec<Vec<T>>,
}

impl<T: Element> Gradients<T> {
    pub fn from_vecs(grads: Vec<Vec<T>>) -> Self {
        Gradients { grads }
    }

    /// Gradient for parameter `i`; empty when the parameter does not require grad.
    pub fn get(&self, i: usize) -> &[T] {
        &self.grads[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.grads[i]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &[T]> {
        self.grads.iter().map(Vec::as_slice)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Vec<T>> {
        self.grads.iter_mut()
    }

    /// Writes the gradients into the `grad` field of each tensor.
    pub fn apply_to(&self, tensors: &mut [Tensor<T>]) {
        for (t, g) in tensors.iter_mut().zip(&self.grads) {
            if t.requires_grad {
                t.accumulate_grad(g);
            }
        }
    }
}

pub struct Graph<'p, T: Element = f32> {
    params: &'p [Tensor<T>],
    nodes: Vec<Node<T>>,
}

impl<'p, T: Element> Graph<'p, T> {
    pub fn new(params: &'p [Tensor<T>]) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        match &self.nodes[v.0].storage {
            Storage::Owned(values) => values,
            Storage::Param(i) => &self.params[*i].values,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// The scalar held by a one-element value.
    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[0]
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), values.len());
        self.nodes.push(Node {
            shape,
            storage: Storage::Owned(values),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records parameter `index` without copying it.
    pub fn param(&mut self, index: usize) -> Var {
        let p = &self.params[index];
        self.nodes.push(Node {
            shape: p.shape.clone(),
            storage: Storage::Param(index),
            op: Op::Leaf,
            requires_grad: p.requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant input (never differentiated).
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor.shape, tensor.values, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        let (av, bv) = (self.value(a), self.value(b));
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                axpy(row, av[i * k + p], &bv[p * n..(p + 1) * n]);
            }
        }
        let rg = self.needs(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    /// Elementwise sum, or bias-add when `b` is `[n]` and `a` is `[m, n]`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let rg = self.needs(&[a, b]);
        if sa == sb {
            let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
            return Ok(self.push(sa, out, Op::Add(a, b), rg));
        }
        if sb.len() == 1 && sa.len() == 2 && sa[1] == sb[0] {
            let n = sb[0];
            let bias = self.value(b);
            let out = self
                .value(a)
                .iter()
                .enumerate()
                .map(|(i, x)| *x + bias[i % n])
                .collect();
            return Ok(self.push(sa, out, Op::AddBias(a, b), rg));
        }
        Err(mismatch("add", &sa, &sb))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.needs(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub(a, b), rg))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.needs(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| sigmoid(*v)).collect();
        let rg = self.needs(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.tanh()).collect();
        let rg = self.needs(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Tanh(x), rg)
    }

    /// Concatenates along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .map(|v| self.shape(*v).to_vec())
            .ok_or_else(|| mismatch("concat", &[], &[]))?;
        let lead = &first[..first.len().saturating_sub(1)];
        let rows = numel(lead);
        let mut width = 0;
        for v in parts {
            let s = self.shape(*v);
            if s.len() != first.len() || s.is_empty() || &s[..s.len() - 1] != lead {
                return Err(mismatch("concat", &first, s));
            }
            width += s[s.len() - 1];
        }
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for v in parts {
                let w = *self.shape(*v).last().expect("non-scalar");
                out.extend_from_slice(&self.value(*v)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(width);
        let rg = self.needs(parts);
        Ok(self.push(shape, out, Op::Concat(parts.to_vec()), rg))
    }

    /// Row `index` of a `[rows, dim]` table, as a `[1, dim]` value.
    pub fn embedding(&mut self, table: Var, index: usize) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(mismatch("embedding", s, &[index]));
        }
        let (rows, dim) = (s[0], s[1]);
        if index >= rows {
            return Err(AutodiffError::IndexOutOfRange {
                op: "embedding",
                index,
                size: rows,
            });
        }
        let out = self.value(table)[index * dim..(index + 1) * dim].to_vec();
        let rg = self.needs(&[table]);
        Ok(self.push(vec![1, dim], out, Op::Embedding { table, index }, rg))
    }

    /// Inverted dropout with an externally sampled 0/1 `mask`.
    pub fn dropout(&mut self, x: Var, mask: &[T], rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(AutodiffError::BadRate(rate));
        }
        if mask.len() != self.value(x).len() {
            return Err(mismatch("dropout", self.shape(x), &[mask.len()]));
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let scale: Vec<T> = mask.iter().map(|m| *m * keep).collect();
        let out = zip_map(self.value(x), &scale, |v, s| v * s);
        let rg = self.needs(&[x]);
        Ok(self.push(self.shape(x).to_vec(), out, Op::Dropout { x, scale }, rg))
    }

    /// `−log softmax(logits)[target]` over a single row of logits.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let values = self.value(logits);
        if target >= values.len() {
            return Err(AutodiffError::IndexOutOfRange {
                op: "softmax_cross_entropy",
                index: target,
                size: values.len(),
            });
        }
        let probs = softmax(values);
        let loss = log_sum_exp(values) - values[target];
        let rg = self.needs(&[logits]);
        Ok(self.push(
            Vec::new(),
            vec![loss],
            Op::SoftmaxCrossEntropy {
                logits,
                target,
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).iter().fold(T::zero(), |acc, v| acc + *v);
        let rg = self.needs(&[x]);
        self.push(Vec::new(), vec![total], Op::Sum(x), rg)
    }

    /// Mean of scalar values.
    pub fn mean(&mut self, scalars: &[Var]) -> Result<Var> {
        if scalars.is_empty() {
            return Err(mismatch("mean", &[], &[]));
        }
        let mut total = T::zero();
        for v in scalars {
            if self.value(*v).len() != 1 {
                return Err(mismatch("mean", self.shape(*v), &[]));
            }
            total = total + self.value(*v)[0];
        }
        let out = total / T::of(scalars.len() as f64);
        let rg = self.needs(scalars);
        Ok(self.push(Vec::new(), vec![out], Op::Mean(scalars.to_vec()), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    /// Propagates gradients from a scalar `loss` back to every parameter.
    /// Parameters that are not reached get zero gradients; parameters that do
    /// not require grad get an empty buffer.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(AutodiffError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut param_grads: Vec<Option<Vec<T>>> = (0..self.params.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    if let Storage::Param(i) = node.storage {
                        let n = self.params[i].values.len();
                        let acc = param_grads[i].get_or_insert_with(|| vec![T::zero(); n]);
                        add_into(acc, &g);
                    }
                }
                Op::MatMul(a, b) => {
                    let (sa, sb) = (self.shape(*a), self.shape(*b));
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if let Some(ga) = self.slot(&mut grads, *a) {
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                ga[i * k + p] = ga[i * k + p] + dot(grow, &bv[p * n..(p + 1) * n]);
                            }
                        }
                    }
                    if let Some(gb) = self.slot(&mut grads, *b) {
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                axpy(&mut gb[p * n..(p + 1) * n], av[i * k + p], grow);
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    if let Some(ga) = self.slot(&mut grads, *a) {
                        add_into(ga, &g);
                    }
                    if let Some(gb) = self.slot(&mut grads, *b) {
                        add_into(gb, &g);
                    }
                }
                Op::AddBias(a, b) => {
                    if let Some(ga) = self.slot(&mut grads, *a) {
                        add_into(ga, &g);
                    }
                    if let Some(gb) = self.slot(&mut grads, *b) {
                        let n = gb.len();
                        for row in g.chunks(n) {
                            add_into(gb, row);
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if let Some(ga) = self.slot(&mut grads, *a) {
                        add_into(ga, &g);
                    }
                    if let Some(gb) = self.slot(&mut grads, *b) {
                        for (d, v) in gb.iter_mut().zip(&g) {
                            *d = *d - *v;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if let Some(ga) = self.slot(&mut grads, *a) {
                        for ((d, v), y) in ga.iter_mut().zip(&g).zip(bv) {
                            *d = *d + *v * *y;
                        }
                    }
                    if let Some(gb) = self.slot(&mut grads, *b) {
                        for ((d, v), x) in gb.iter_mut().zip(&g).zip(av) {
                            *d = *d + *v * *x;
                        }
                    }
                }
                Op::Sigmoid(x) => {
                    let y = self.value(Var(id));
                    if let Some(gx) = self.slot(&mut grads, *x) {
                        for ((d, v), y) in gx.iter_mut().zip(&g).zip(y) {
                            *d = *d + *v * *y * (T::one() - *y);
                        }
                    }
                }
                Op::Tanh(x) => {
                    let y = self.value(Var(id));
                    if let Some(gx) = self.slot(&mut grads, *x) {
                        for ((d, v), y) in gx.iter_mut().zip(&g).zip(y) {
                            *d = *d + *v * (T::one() - *y * *y);
                        }
                    }
                }
                Op::Concat(parts) => {
                    let width = *node.shape.last().expect("non-scalar");
                    let rows = g.len() / width;
                    let mut offset = 0;
                    for part in parts {
                        let w = *self.shape(*part).last().expect("non-scalar");
                        if let Some(gp) = self.slot(&mut grads, *part) {
                            for r in 0..rows {
                                let src = &g[r * width + offset..r * width + offset + w];
                                add_into(&mut gp[r * w..(r + 1) * w], src);
                            }
                        }
                        offset += w;
                    }
                }
                Op::Embedding { table, index } => {
                    let dim = g.len();
                    if let Some(gt) = self.slot(&mut grads, *table) {
                        add_into(&mut gt[index * dim..(index + 1) * dim], &g);
                    }
                }
                Op::Dropout { x, scale } => {
                    if let Some(gx) = self.slot(&mut grads, *x) {
                        for ((d, v), s) in gx.iter_mut().zip(&g).zip(scale) {
                            *d = *d + *v * *s;
                        }
                    }
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    target,
                    probs,
                } => {
                    let upstream = g[0];
                    if let Some(gl) = self.slot(&mut grads, *logits) {
                        for (j, (d, p)) in gl.iter_mut().zip(probs).enumerate() {
                            let onehot = if j == *target { T::one() } else { T::zero() };
                            *d = *d + upstream * (*p - onehot);
                        }
                    }
                }
                Op::Sum(x) => {
                    if let Some(gx) = self.slot(&mut grads, *x) {
                        for d in gx.iter_mut() {
                            *d = *d + g[0];
                        }
                    }
                }
                Op::Mean(scalars) => {
                    let share = g[0] / T::of(scalars.len() as f64);
                    for v in scalars {
                        if let Some(gv) = self.slot(&mut grads, *v) {
                            gv[0] = gv[0] + share;
                        }
                    }
                }
            }
        }

        let grads = self
            .params
            .iter()
            .zip(param_grads)
            .map(|(p, g)| match (p.requires_grad, g) {
                (false, _) => Vec::new(),
                (true, Some(g)) => g,
                (true, None) => vec![T::zero(); p.values.len()],
            })
            .collect();
        Ok(Gradients { grads })
    }

    /// Gradient buffer for `v`, allocated on first use; `None` when `v` does
    /// not require grad.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let n = numel(&node.shape);
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn zip_map<T: Element>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

fn add_into<T: Element>(acc: &mut [T], src: &[T]) {
    for (a, s) in acc.iter_mut().zip(src) {
        *a = *a + *s;
    }
}

/// `y += alpha · x`
#[inline]
fn axpy<T: Element>(y: &mut [T], alpha: T, x: &[T]) {
    for (y, x) in y.iter_mut().zip(x) {
        *y = *y + alpha * *x;
    }
}

/// Dot product with eight independent accumulators so the loop vectorizes.
#[inline]
fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut total = acc.iter().fold(T::zero(), |s, v| s + *v);
    for i in chunks * 8..a.len() {
        total = total + a[i] * b[i];
    }
    total
}

pub fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn log_sum_exp<T: Element>(values: &[T]) -> T {
    let max = values.iter().fold(T::neg_infinity(), |m, v| m.max(*v));
    if max == T::neg_infinity() {
        return max;
    }
    let total = values.iter().fold(T::zero(), |s, v| s + (*v - max).exp());
    max + total.ln()
}

pub fn softmax<T: Element>(values: &[T]) -> Vec<T> {
    let lse = log_sum_exp(values);
    values.iter().map(|v| (*v - lse).exp()).collect()
}

/// A differentiable scalar function of some input tensors, written once and
/// evaluated at either precision.
pub trait DiffFn {
    fn eval<T: Element>(&self, graph: &mut Graph<'_, T>, inputs: &[Var]) -> Result<Var>;
}

/// Largest relative discrepancy found by [`grad_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, element index) of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

/// Denominator floor for the relative error, so entries whose true
/// gradient is essentially zero are judged on absolute error.
pub const GRAD_CHECK_FLOOR: f64 = 1e-3;

/// Compares 32-bit reverse-mode gradients with 64-bit central differences.
///
/// The relative error of one entry is `|a − n| / max(|a|, |n|, GRAD_CHECK_FLOOR)`.
/// Only inputs with `requires_grad` set are perturbed.
pub fn grad_check<F: DiffFn>(f: &F, inputs: &[Tensor<f32>], step: f64) -> Result<GradCheckReport> {
    let analytic = {
        let mut g = Graph::new(inputs);
        let vars: Vec<Var> = (0..inputs.len()).map(|i| g.param(i)).collect();
        let loss = f.eval(&mut g, &vars)?;
        g.backward(loss)?
    };

    let mut wide: Vec<Tensor<f64>> = inputs.iter().map(|t| t.cast()).collect();
    let eval64 = |tensors: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new(tensors);
        let vars: Vec<Var> = (0..tensors.len()).map(|i| g.param(i)).collect();
        let loss = f.eval(&mut g, &vars)?;
        Ok(g.scalar(loss))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for i in 0..wide.len() {
        if !wide[i].requires_grad {
            continue;
        }
        for j in 0..wide[i].values.len() {
            let orig = wide[i].values[j];
            wide[i].values[j] = orig + step;
            let plus = eval64(&wide)?;
            wide[i].values[j] = orig - step;
            let minus = eval64(&wide)?;
            wide[i].values[j] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.get(i)[j] as f64;
            let denom = a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((i, j));
            }
        }
    }
    Ok(report)
}
