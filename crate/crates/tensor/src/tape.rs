//! Reverse-mode gradient tape.
//!
//! Every operation appends a node holding its output value. Nodes are only
//! given a backward rule when at least one input requires a gradient, so a
//! tape fed with constants doubles as a plain inference engine.

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.044715;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Matmul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow {
        x: Var,
        row: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Gelu(Var),
    LeakyRelu(Var, T),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LogSoftmax(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Mse(Var, Var),
    Sum(Var),
    Mean(Var),
    Concat(Vec<Var>),
    Gather {
        x: Var,
        rows: Vec<usize>,
    },
    Reshape(Var),
    Pick {
        x: Var,
        flat: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttnLayout,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Geometry of a batched multi-head attention call: `batch` independent
/// sequences of `seq` tokens, each token `dim` wide and split into `heads`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnLayout {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub dim: usize,
}

impl AttnLayout {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

#[derive(Debug)]
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; it participates in backward iff `t.requires_grad`.
    pub fn leaf(&mut self, mut t: Tensor<T>) -> Var {
        t.grad = None;
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, mut t: Tensor<T>) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// Gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let track = inputs.iter().any(|&i| self.requires_grad(i));
        let mut value = value;
        value.requires_grad = track;
        let op = if track { op } else { Op::Leaf };
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(TensorError::Shape {
                op,
                left: s.to_vec(),
                right: vec![],
            }),
        }
    }

    /// `[m×k] · [k×n] → [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix("matmul", a)?;
        let (k2, n) = self.matrix("matmul", b)?;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.data(a),
            k as isize,
            1,
            self.data(b),
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, Op::Matmul { a, b, m, k, n }, &[a, b]))
    }

    /// `x·w + b` for `x: [m×k]`, `w: [k×n]`, `b: [n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (m, k) = self.matrix("linear", x)?;
        let (k2, n) = self.matrix("linear", w)?;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "linear",
                left: self.shape(x).to_vec(),
                right: self.shape(w).to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return Err(TensorError::Shape {
                    op: "linear bias",
                    left: self.shape(b).to_vec(),
                    right: vec![n],
                });
            }
            let bias = self.data(b);
            for row in out.chunks_mut(n) {
                row.copy_from_slice(bias);
            }
        }
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.data(x),
            k as isize,
            1,
            self.data(w),
            n as isize,
            1,
            T::one(),
            &mut out,
            n as isize,
            1,
        );
        let value = Tensor::new(&[m, n], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Linear { x, w, b, m, k, n }, &inputs))
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.same_shape(op, a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x).map(|e| e * c);
        self.push(v, Op::Scale(x, c), &[x])
    }

    /// Adds a row vector to every row of `x` (trailing dimension must match).
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let cols = *self.shape(x).last().unwrap();
        if self.shape(row) != [cols] {
            return Err(TensorError::Shape {
                op: "add_row",
                left: self.shape(x).to_vec(),
                right: self.shape(row).to_vec(),
            });
        }
        let r = self.data(row);
        let mut data = self.data(x).to_vec();
        for chunk in data.chunks_mut(cols) {
            for (a, &b) in chunk.iter_mut().zip(r) {
                *a = *a + b;
            }
        }
        let v = Tensor::new(self.shape(x), data)?;
        Ok(self.push(v, Op::AddRow { x, row }, &[x, row]))
    }

    /// Layer normalisation over the trailing dimension with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let cols = *self.shape(x).last().unwrap();
        for p in [gamma, beta] {
            if self.shape(p) != [cols] {
                return Err(TensorError::Shape {
                    op: "layer_norm",
                    left: self.shape(x).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let eps = T::from_f64(LN_EPS);
        let d = T::from_f64(cols as f64);
        let g = self.data(gamma);
        let bt = self.data(beta);
        let src = self.data(x);
        let rows = src.len() / cols;
        let mut xhat = vec![T::zero(); src.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<T>() / d;
            let var = row.iter().map(|&e| (e - mean) * (e - mean)).sum::<T>() / d;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + bt[c];
            }
        }
        let v = Tensor::new(self.shape(x), out)?;
        let track = [x, gamma, beta].iter().any(|&i| self.requires_grad(i));
        let op = if track {
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            }
        } else {
            Op::Leaf
        };
        Ok(self.push(v, op, &[x, gamma, beta]))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(gelu);
        self.push(v, Op::Gelu(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let v = self
            .value(x)
            .map(|e| if e >= T::zero() { e } else { slope * e });
        self.push(v, Op::LeakyRelu(x, slope), &[x])
    }

    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Axis {
                op: "softmax",
                axis,
                rank: shape.len(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data(x);
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mut max = T::neg_infinity();
                for j in 0..len {
                    max = max.max(src[at(j)]);
                }
                let mut total = T::zero();
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total = total + e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / total;
                }
            }
        }
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(v, Op::Softmax { x, outer, len, inner }, &[x]))
    }

    /// Log-softmax along the trailing axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let cols = *self.shape(x).last().unwrap();
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(cols) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|e| *e = *e - lse);
        }
        let v = Tensor::new(self.shape(x), out).unwrap();
        self.push(v, Op::LogSoftmax(x), &[x])
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (rows, classes) = self.matrix("cross_entropy", logits)?;
        if labels.len() != rows {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                left: self.shape(logits).to_vec(),
                right: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(TensorError::Index {
                op: "cross_entropy",
                index: bad,
                len: classes,
            });
        }
        let src = self.data(logits);
        let mut probs = vec![T::zero(); src.len()];
        let mut total = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            let row = &src[r * classes..(r + 1) * classes];
            let lse = log_sum_exp(row);
            total = total + (lse - row[label]);
            for c in 0..classes {
                probs[r * classes + c] = (row[c] - lse).exp();
            }
        }
        let loss = total / T::from_f64(rows as f64);
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    /// Mean squared elementwise difference.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("mse", pred, target)?;
        let n = T::from_f64(self.value(pred).numel() as f64);
        let total: T = self
            .data(pred)
            .iter()
            .zip(self.data(target))
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::Mse(pred, target),
            &[pred, target],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::from_f64(self.value(x).numel() as f64);
        let s = self.data(x).iter().copied().sum::<T>() / n;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Concatenation along axis 0; trailing dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of zero tensors".into()))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(TensorError::Shape {
                    op: "concat",
                    left: self.shape(first).to_vec(),
                    right: s.to_vec(),
                });
            }
            rows += s[0];
            data.extend_from_slice(self.data(p));
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let v = Tensor::new(&shape, data)?;
        Ok(self.push(v, Op::Concat(parts.to_vec()), parts))
    }

    /// Selects rows (entries along axis 0) by index; repeats are allowed.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let width: usize = shape[1..].iter().product();
        let src = self.data(x);
        let mut data = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            if r >= shape[0] {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: r,
                    len: shape[0],
                });
            }
            data.extend_from_slice(&src[r * width..(r + 1) * width]);
        }
        let mut out_shape = vec![rows.len()];
        out_shape.extend_from_slice(&shape[1..]);
        let v = Tensor::new(&out_shape, data)?;
        Ok(self.push(
            v,
            Op::Gather {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        ))
    }

    /// Contiguous rows `start..start + len`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_rows(x, &idx)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    /// Picks individual elements by flat index into a 1-D result.
    pub fn pick(&mut self, x: Var, flat: &[usize]) -> Result<Var> {
        let src = self.data(x);
        let mut data = Vec::with_capacity(flat.len());
        for &i in flat {
            if i >= src.len() {
                return Err(TensorError::Index {
                    op: "pick",
                    index: i,
                    len: src.len(),
                });
            }
            data.push(src[i]);
        }
        let v = Tensor::new(&[flat.len()], data)?;
        Ok(self.push(
            v,
            Op::Pick {
                x,
                flat: flat.to_vec(),
            },
            &[x],
        ))
    }

    /// Full (unmasked) scaled dot-product attention over `layout.batch`
    /// independent sequences. `q`, `k`, `v` are `[batch·seq, dim]`; heads
    /// take contiguous `dim / heads` column slices.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttnLayout) -> Result<Var> {
        let expected = [layout.batch * layout.seq, layout.dim];
        for t in [q, k, v] {
            if self.shape(t) != expected {
                return Err(TensorError::Shape {
                    op: "attention",
                    left: self.shape(t).to_vec(),
                    right: expected.to_vec(),
                });
            }
        }
        if layout.heads == 0 || layout.dim % layout.heads != 0 {
            return Err(TensorError::Invalid(format!(
                "{} heads do not divide width {}",
                layout.heads, layout.dim
            )));
        }
        let (out, probs) = attention_forward(self.data(q), self.data(k), self.data(v), layout);
        let value = Tensor::new(&expected, out)?;
        let track = [q, k, v].iter().any(|&i| self.requires_grad(i));
        let op = if track {
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            }
        } else {
            Op::Leaf
        };
        Ok(self.push(value, op, &[q, k, v]))
    }

    /// Propagates d(loss)/d(node) back to every leaf that requires a
    /// gradient. Leaf gradients accumulate across calls until the tape is
    /// dropped.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].value.requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                self.nodes[i].value.accumulate_grad(&g)?;
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let wants = |v: Var| nodes[v.0].value.requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !wants(v) {
                return;
            }
            let len = nodes[v.0].value.numel();
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
            f(slot);
        };
        let out = nodes[i].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::Matmul { a, b, m, k, n } => {
                acc(a, &mut |ga| {
                    T::gemm(m, n, k, T::one(), g, n as isize, 1, val(b), 1, n as isize, T::one(), ga, k as isize, 1)
                });
                acc(b, &mut |gb| {
                    T::gemm(k, m, n, T::one(), val(a), 1, k as isize, g, n as isize, 1, T::one(), gb, n as isize, 1)
                });
            }
            &Op::Linear { x, w, b, m, k, n } => {
                acc(x, &mut |gx| {
                    T::gemm(m, n, k, T::one(), g, n as isize, 1, val(w), 1, n as isize, T::one(), gx, k as isize, 1)
                });
                acc(w, &mut |gw| {
                    T::gemm(k, m, n, T::one(), val(x), 1, k as isize, g, n as isize, 1, T::one(), gw, n as isize, 1)
                });
                if let Some(b) = b {
                    acc(b, &mut |gb| {
                        for row in g.chunks(n) {
                            for (a, &e) in gb.iter_mut().zip(row) {
                                *a = *a + e;
                            }
                        }
                    });
                }
            }
            &Op::Add(a, b) => {
                acc(a, &mut |ga| add_into(ga, g));
                acc(b, &mut |gb| add_into(gb, g));
            }
            &Op::Sub(a, b) => {
                acc(a, &mut |ga| add_into(ga, g));
                acc(b, &mut |gb| {
                    for (d, &e) in gb.iter_mut().zip(g) {
                        *d = *d - e;
                    }
                });
            }
            &Op::Mul(a, b) => {
                acc(a, &mut |ga| {
                    for ((d, &e), &y) in ga.iter_mut().zip(g).zip(val(b)) {
                        *d = *d + e * y;
                    }
                });
                acc(b, &mut |gb| {
                    for ((d, &e), &y) in gb.iter_mut().zip(g).zip(val(a)) {
                        *d = *d + e * y;
                    }
                });
            }
            &Op::Scale(x, c) => acc(x, &mut |gx| {
                for (d, &e) in gx.iter_mut().zip(g) {
                    *d = *d + e * c;
                }
            }),
            &Op::AddRow { x, row } => {
                acc(x, &mut |gx| add_into(gx, g));
                acc(row, &mut |gr| {
                    for chunk in g.chunks(gr.len()) {
                        add_into(gr, chunk);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let cols = nodes[gamma.0].value.numel();
                let gam = val(*gamma);
                acc(*gamma, &mut |gg| {
                    for (grow, hrow) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for c in 0..cols {
                            gg[c] = gg[c] + grow[c] * hrow[c];
                        }
                    }
                });
                acc(*beta, &mut |gb| {
                    for grow in g.chunks(cols) {
                        add_into(gb, grow);
                    }
                });
                acc(*x, &mut |gx| {
                    let d = T::from_f64(cols as f64);
                    let mut dh = vec![T::zero(); cols];
                    for (r, &is) in inv_std.iter().enumerate() {
                        let grow = &g[r * cols..(r + 1) * cols];
                        let hrow = &xhat[r * cols..(r + 1) * cols];
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for c in 0..cols {
                            dh[c] = grow[c] * gam[c];
                            s1 = s1 + dh[c];
                            s2 = s2 + dh[c] * hrow[c];
                        }
                        for c in 0..cols {
                            let dx = is / d * (d * dh[c] - s1 - hrow[c] * s2);
                            gx[r * cols + c] = gx[r * cols + c] + dx;
                        }
                    }
                });
            }
            &Op::Gelu(x) => acc(x, &mut |gx| {
                for ((d, &e), &xv) in gx.iter_mut().zip(g).zip(val(x)) {
                    *d = *d + e * gelu_grad(xv);
                }
            }),
            &Op::LeakyRelu(x, slope) => acc(x, &mut |gx| {
                for ((d, &e), &xv) in gx.iter_mut().zip(g).zip(val(x)) {
                    *d = *d + if xv >= T::zero() { e } else { e * slope };
                }
            }),
            &Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => acc(x, &mut |gx| {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let dot: T = (0..len).map(|j| out[at(j)] * g[at(j)]).sum();
                        for j in 0..len {
                            let k = at(j);
                            gx[k] = gx[k] + out[k] * (g[k] - dot);
                        }
                    }
                }
            }),
            &Op::LogSoftmax(x) => {
                let cols = *nodes[i].value.shape().last().unwrap();
                acc(x, &mut |gx| {
                    for ((dx, grow), orow) in gx.chunks_mut(cols).zip(g.chunks(cols)).zip(out.chunks(cols)) {
                        let total: T = grow.iter().copied().sum();
                        for c in 0..cols {
                            dx[c] = dx[c] + grow[c] - orow[c].exp() * total;
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let rows = labels.len();
                let classes = probs.len() / rows;
                let scale = g[0] / T::from_f64(rows as f64);
                acc(*logits, &mut |gl| {
                    for (r, &label) in labels.iter().enumerate() {
                        for c in 0..classes {
                            let k = r * classes + c;
                            let target = if c == label { T::one() } else { T::zero() };
                            gl[k] = gl[k] + scale * (probs[k] - target);
                        }
                    }
                });
            }
            &Op::Mse(a, b) => {
                let n = T::from_f64(nodes[a.0].value.numel() as f64);
                let two = T::from_f64(2.0);
                let coef = g[0] * two / n;
                acc(a, &mut |ga| {
                    for ((d, &x), &y) in ga.iter_mut().zip(val(a)).zip(val(b)) {
                        *d = *d + coef * (x - y);
                    }
                });
                acc(b, &mut |gb| {
                    for ((d, &x), &y) in gb.iter_mut().zip(val(a)).zip(val(b)) {
                        *d = *d - coef * (x - y);
                    }
                });
            }
            &Op::Sum(x) => acc(x, &mut |gx| gx.iter_mut().for_each(|d| *d = *d + g[0])),
            &Op::Mean(x) => {
                let c = g[0] / T::from_f64(nodes[x.0].value.numel() as f64);
                acc(x, &mut |gx| gx.iter_mut().for_each(|d| *d = *d + c));
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].value.numel();
                    acc(p, &mut |gp| add_into(gp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::Gather { x, rows } => {
                let width = g.len() / rows.len().max(1);
                acc(*x, &mut |gx| {
                    for (k, &r) in rows.iter().enumerate() {
                        add_into(&mut gx[r * width..(r + 1) * width], &g[k * width..(k + 1) * width]);
                    }
                });
            }
            &Op::Reshape(x) => acc(x, &mut |gx| add_into(gx, g)),
            Op::Pick { x, flat } => acc(*x, &mut |gx| {
                for (k, &f) in flat.iter().enumerate() {
                    gx[f] = gx[f] + g[k];
                }
            }),
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            } => {
                let (dq, dk, dv) = attention_backward(val(*q), val(*k), val(*v), probs, g, *layout);
                acc(*q, &mut |gq| add_into(gq, &dq));
                acc(*k, &mut |gk| add_into(gk, &dk));
                acc(*v, &mut |gv| add_into(gv, &dv));
            }
        }
    }
}

fn add_into<T: Element>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn log_sum_exp<T: Element>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let total: T = row.iter().map(|&e| (e - max).exp()).sum();
    max + total.ln()
}

fn gelu<T: Element>(x: T) -> T {
    let half = T::from_f64(0.5);
    let k = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let c = T::from_f64(GELU_C);
    half * x * (T::one() + fast_tanh(k * (x + c * x * x * x)))
}

/// `tanh` through a single `exp`; libm's `tanhf` is several times slower.
fn fast_tanh<T: Element>(u: T) -> T {
    let two = T::from_f64(2.0);
    T::one() - two / ((two * u).exp() + T::one())
}

fn gelu_grad<T: Element>(x: T) -> T {
    let half = T::from_f64(0.5);
    let k = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let c = T::from_f64(GELU_C);
    let t = fast_tanh(k * (x + c * x * x * x));
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::from_f64(3.0) * c * x * x)
}

/// Forward attention returning the output and the `[batch, heads, seq, seq]`
/// weight tensor.
pub fn attention_forward<T: Element>(q: &[T], k: &[T], v: &[T], layout: AttnLayout) -> (Vec<T>, Vec<T>) {
    let AttnLayout {
        batch,
        seq,
        heads,
        dim,
    } = layout;
    let hd = layout.head_dim();
    let scale = T::one() / T::from_f64(hd as f64).sqrt();
    let mut out = vec![T::zero(); batch * seq * dim];
    let mut probs = vec![T::zero(); batch * heads * seq * seq];
    for b in 0..batch {
        for h in 0..heads {
            let col = h * hd;
            for s in 0..seq {
                let qrow = &q[(b * seq + s) * dim + col..][..hd];
                let p = &mut probs[((b * heads + h) * seq + s) * seq..][..seq];
                let mut max = T::neg_infinity();
                for t in 0..seq {
                    let krow = &k[(b * seq + t) * dim + col..][..hd];
                    let score = qrow.iter().zip(krow).map(|(&x, &y)| x * y).sum::<T>() * scale;
                    p[t] = score;
                    max = max.max(score);
                }
                let mut total = T::zero();
                for e in p.iter_mut() {
                    *e = (*e - max).exp();
                    total = total + *e;
                }
                let o = &mut out[(b * seq + s) * dim + col..][..hd];
                for t in 0..seq {
                    p[t] = p[t] / total;
                    let vrow = &v[(b * seq + t) * dim + col..][..hd];
                    for j in 0..hd {
                        o[j] = o[j] + p[t] * vrow[j];
                    }
                }
            }
        }
    }
    (out, probs)
}

#[allow(clippy::type_complexity)]
fn attention_backward<T: Element>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    g: &[T],
    layout: AttnLayout,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let AttnLayout {
        batch,
        seq,
        heads,
        dim,
    } = layout;
    let hd = layout.head_dim();
    let scale = T::one() / T::from_f64(hd as f64).sqrt();
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut dp = vec![T::zero(); seq];
    for b in 0..batch {
        for h in 0..heads {
            let col = h * hd;
            for s in 0..seq {
                let p = &probs[((b * heads + h) * seq + s) * seq..][..seq];
                let go = &g[(b * seq + s) * dim + col..][..hd];
                for t in 0..seq {
                    let vi = (b * seq + t) * dim + col;
                    dp[t] = go.iter().zip(&v[vi..vi + hd]).map(|(&x, &y)| x * y).sum();
                    for j in 0..hd {
                        dv[vi + j] = dv[vi + j] + p[t] * go[j];
                    }
                }
                let dot: T = p.iter().zip(&dp).map(|(&x, &y)| x * y).sum();
                let qi = (b * seq + s) * dim + col;
                for t in 0..seq {
                    let ds = p[t] * (dp[t] - dot) * scale;
                    let ki = (b * seq + t) * dim + col;
                    for j in 0..hd {
                        dq[qi + j] = dq[qi + j] + ds * k[ki + j];
                        dk[ki + j] = dk[ki + j] + ds * q[qi + j];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}
