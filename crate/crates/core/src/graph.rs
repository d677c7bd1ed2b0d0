//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Each operation appends a
//! node holding its output value, so node order is a topological order and the
//! backward sweep is a single reverse pass over the node list.

use std::collections::HashMap;

use crate::error::{bail, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::rng::{self, Rng};
use crate::scalar::Scalar;
use crate::tensor::{matmul_acc, matmul_dims, matmul_nt_acc, matmul_tn_acc, transpose_raw, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Elu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Abs(Var),
    Clamp(Var, T, T),
    Softmax { x: Var, outer: usize, axis_len: usize, inner: usize },
    PrefixSoftmax { x: Var, limits: Vec<usize> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Dropout { x: Var, mask: Vec<T> },
    Conv1d { x: Var, kernel: Var, pad: usize },
    MaxPool1d { x: Var, argmax: Vec<usize> },
    SumAll(Var),
    MeanAll(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    ScatterRows { base: Var, rows: Var, idx: Vec<usize> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of operations for one forward pass.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf input whose gradient is reported by [`Graph::backward`].
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Imports a trainable parameter. Repeated imports return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            bail!(Dimension, "{what}: shapes {:?} and {:?} differ", self.shape(a), self.shape(b));
        }
        Ok(())
    }

    fn matrix_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => bail!(Dimension, "{what} needs a matrix, got {s:?}"),
        }
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, what: &str, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let va = self.value(a);
        let data = va.data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = matmul_dims(self.shape(a), self.shape(b))?;
        let mut out = vec![T::zero(); m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose()?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Transpose(x), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    /// Adds a length-`n` vector to every row of an `[m × n]` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.matrix_dims(x, "add_row")?;
        if self.value(bias).numel() != n {
            bail!(Dimension, "add_row: bias of {:?} for {n} columns", self.shape(bias));
        }
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(n) {
            for (v, &bv) in row.iter_mut().zip(&b) {
                *v += bv;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(value, Op::AddRow(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), |v| v.exp())
    }

    /// `x` for `x ≥ 0`, `eˣ − 1` otherwise.
    pub fn elu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Elu(x), |v| if v >= T::zero() { v } else { v.exp_m1() })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), |v| v.tanh())
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), |v| v.abs())
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping applied.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.unary(x, Op::Clamp(x, lo, hi), |v| v.max(lo).min(hi))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            bail!(Dimension, "softmax axis {axis} out of range for {shape:?}");
        }
        let outer: usize = shape[..axis].iter().product();
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * axis_len + a) * inner + i;
                let m = (0..axis_len).map(|a| src[at(a)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for a in 0..axis_len {
                    let e = (src[at(a)] - m).exp();
                    out[at(a)] = e;
                    total += e;
                }
                for a in 0..axis_len {
                    out[at(a)] /= total;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, outer, axis_len, inner }, rg))
    }

    /// Row-wise softmax of a matrix where row `r` only sees columns
    /// `0..=limits[r]`; masked entries are exactly zero.
    pub fn prefix_softmax(&mut self, x: Var, limits: Vec<usize>) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "prefix_softmax")?;
        if limits.len() != r || limits.iter().any(|&l| l >= c) {
            bail!(Dimension, "prefix_softmax limits {limits:?} invalid for {r}x{c}");
        }
        let src = self.value(x);
        let mut out = vec![T::zero(); r * c];
        for (i, &lim) in limits.iter().enumerate() {
            let row = &src.row(i)[..=lim];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let dst = &mut out[i * c..i * c + lim + 1];
            let mut total = T::zero();
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = (v - m).exp();
                total += *d;
            }
            for d in dst.iter_mut() {
                *d /= total;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![r, c], out)?, Op::PrefixSoftmax { x, limits }, rg))
    }

    /// Normalizes over the last axis to zero mean / unit variance, then
    /// applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).cols();
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            bail!(Dimension, "layer_norm affine parameters must have {n} entries");
        }
        let eps = T::lit(LAYER_NORM_EPS);
        let nf = T::from_usize(n).expect("size fits scalar");
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let src = self.value(x);
        let rows = src.numel() / n;
        let mut xhat = Vec::with_capacity(src.numel());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(src.numel());
        for row in src.data().chunks(n) {
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let value = Tensor::new(src.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, xhat, inv_std }, rg))
    }

    /// Inverted dropout: survivors are scaled by `1/(1−p)` in training mode;
    /// identity otherwise.
    pub fn dropout(&mut self, x: Var, p: f64, training: bool, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            bail!(Parameter, "dropout probability {p} outside [0, 1)");
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let mask: Vec<T> =
            (0..self.value(x).numel()).map(|_| if rng::unit(rng) < p { T::zero() } else { keep }).collect();
        let src = self.value(x);
        let data = src.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Dropout { x, mask }, rg))
    }

    /// 1-D cross-correlation of `x [C_in × L]` with `kernel [C_out × C_in × w]`,
    /// zero padding `pad` on both ends.
    pub fn conv1d(&mut self, x: Var, kernel: Var, pad: usize) -> Result<Var> {
        let (c_in, len) = self.matrix_dims(x, "conv1d input")?;
        let (c_out, w) = match self.shape(kernel) {
            [o, i, w] if *i == c_in => (*o, *w),
            s => bail!(Dimension, "conv1d kernel {s:?} incompatible with {c_in} input channels"),
        };
        if w > len + 2 * pad {
            bail!(Dimension, "conv1d kernel width {w} exceeds padded length {}", len + 2 * pad);
        }
        let out_len = len + 2 * pad - w + 1;
        let xs = self.value(x).data();
        let ks = self.value(kernel).data();
        let mut out = vec![T::zero(); c_out * out_len];
        for o in 0..c_out {
            for c in 0..c_in {
                for k in 0..w {
                    let kv = ks[(o * c_in + c) * w + k];
                    for t in 0..out_len {
                        let src = t + k;
                        if src < pad || src - pad >= len {
                            continue;
                        }
                        out[o * out_len + t] += kv * xs[c * len + src - pad];
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(kernel);
        Ok(self.push(Tensor::new(vec![c_out, out_len], out)?, Op::Conv1d { x, kernel, pad }, rg))
    }

    /// Max pooling along the last axis of `[C × L]`; padded slots never win.
    pub fn max_pool1d(&mut self, x: Var, window: usize, stride: usize, pad: usize) -> Result<Var> {
        let (ch, len) = self.matrix_dims(x, "max_pool1d")?;
        if window == 0 || stride == 0 {
            bail!(Parameter, "max_pool1d window and stride must be at least 1");
        }
        if pad >= window {
            bail!(Parameter, "max_pool1d padding {pad} must be smaller than window {window}");
        }
        let out_len = pool_output_len(len, window, stride, pad)?;
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(ch * out_len);
        let mut argmax = Vec::with_capacity(ch * out_len);
        for c in 0..ch {
            for o in 0..out_len {
                let lo = (o * stride).saturating_sub(pad);
                let hi = (o * stride + window - pad).min(len);
                let mut best = lo;
                for t in lo..hi {
                    if xs[c * len + t] > xs[c * len + best] {
                        best = t;
                    }
                }
                out.push(xs[c * len + best]);
                argmax.push(c * len + best);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![ch, out_len], out)?, Op::MaxPool1d { x, argmax }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / T::from_usize(v.numel()).expect("size fits scalar");
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::MeanAll(x), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            bail!(Dimension, "concat_cols needs at least one part");
        };
        let (rows, _) = self.matrix_dims(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix_dims(p, "concat_cols")?;
            if r != rows {
                bail!(Dimension, "concat_cols row counts differ: {rows} vs {r}");
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(vec![rows, total], out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            bail!(Dimension, "concat_rows needs at least one part");
        };
        let (_, cols) = self.matrix_dims(first, "concat_rows")?;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.matrix_dims(p, "concat_rows")?;
            if c != cols {
                bail!(Dimension, "concat_rows column counts differ: {cols} vs {c}");
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(vec![rows, cols], out)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "slice_cols")?;
        if width == 0 || start + width > c {
            bail!(Dimension, "slice_cols {start}+{width} out of bounds for {c} columns");
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(r * width);
        for i in 0..r {
            out.extend_from_slice(&src.row(i)[start..start + width]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![r, width], out)?, Op::SliceCols { x, start }, rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let value = self.value(x).slice_rows(start, start + count)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SliceRows { x, start }, rg))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "gather_rows")?;
        if idx.is_empty() || idx.iter().any(|&i| i >= r) {
            bail!(Dimension, "gather_rows indices {idx:?} invalid for {r} rows");
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(src.row(i));
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![idx.len(), c], out)?, Op::GatherRows { x, idx: idx.to_vec() }, rg))
    }

    /// Copy of `base` with row `idx[k]` replaced by row `k` of `rows`.
    pub fn scatter_rows(&mut self, base: Var, rows: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.matrix_dims(base, "scatter_rows")?;
        let (k, c2) = self.matrix_dims(rows, "scatter_rows")?;
        if c != c2 || k != idx.len() || idx.iter().any(|&i| i >= r) {
            bail!(Dimension, "scatter_rows: {k}x{c2} rows at {idx:?} into {r}x{c}");
        }
        let mut value = self.value(base).clone();
        for (src, &dst) in idx.iter().enumerate() {
            let row = self.value(rows).row(src).to_vec();
            value.row_mut(dst).copy_from_slice(&row);
        }
        let rg = self.rg(base) || self.rg(rows);
        Ok(self.push(value, Op::ScatterRows { base, rows, idx: idx.to_vec() }, rg))
    }

    /// Propagates adjoints from a scalar `loss` back through the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            bail!(Contract, "backward needs a scalar loss, got shape {:?}", lv.shape());
        }
        if !lv.data()[0].is_finite() {
            return Err(Error::NonFinite(format!("loss is {}", lv.data()[0])));
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut adj);
            }
            adj[i] = Some(g);
        }
        let params = self
            .params
            .iter()
            .filter_map(|(&id, &v)| adj[v.0].clone().map(|g| (id, g)))
            .map(|(id, g)| {
                let shape = self.nodes[self.params[&id].0].value.shape().to_vec();
                (id, Tensor::new(shape, g).expect("adjoint matches value shape"))
            })
            .collect();
        Ok(Gradients { adj, shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(), params })
    }

    fn propagate(&self, i: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let acc = |adj: &mut [Option<Vec<T>>], v: Var, f: &dyn Fn(&mut [T])| {
            if !self.rg(v) {
                return;
            }
            let slot = adj[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.numel()]);
            f(slot);
        };
        let elementwise = |adj: &mut [Option<Vec<T>>], v: Var, d: &dyn Fn(usize) -> T| {
            acc(adj, v, &|s| {
                for (k, sk) in s.iter_mut().enumerate() {
                    *sk += g[k] * d(k);
                }
            })
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                acc(adj, *a, &|s| matmul_nt_acc(g, bv, s, m, n, k));
                acc(adj, *b, &|s| matmul_tn_acc(av, g, s, m, k, n));
            }
            Op::Transpose(x) => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let gt = transpose_raw(g, c, r);
                acc(adj, *x, &|s| add_into(s, &gt));
            }
            Op::Add(a, b) => {
                acc(adj, *a, &|s| add_into(s, g));
                acc(adj, *b, &|s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(adj, *a, &|s| add_into(s, g));
                acc(adj, *b, &|s| s.iter_mut().zip(g).for_each(|(x, &y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                elementwise(adj, *a, &|k| bv[k]);
                elementwise(adj, *b, &|k| av[k]);
            }
            Op::AddRow(x, bias) => {
                acc(adj, *x, &|s| add_into(s, g));
                let n = self.value(*bias).numel();
                acc(adj, *bias, &|s| {
                    for row in g.chunks(n) {
                        add_into(s, row);
                    }
                });
            }
            Op::Scale(x, c) => elementwise(adj, *x, &|_| *c),
            Op::AddScalar(x) => acc(adj, *x, &|s| add_into(s, g)),
            Op::Exp(x) => elementwise(adj, *x, &|k| out[k]),
            Op::Elu(x) => {
                let xv = self.value(*x).data();
                elementwise(adj, *x, &|k| if xv[k] >= T::zero() { T::one() } else { out[k] + T::one() })
            }
            Op::Tanh(x) => elementwise(adj, *x, &|k| T::one() - out[k] * out[k]),
            Op::Sigmoid(x) => elementwise(adj, *x, &|k| out[k] * (T::one() - out[k])),
            Op::Abs(x) => {
                let xv = self.value(*x).data();
                elementwise(adj, *x, &|k| xv[k].signum())
            }
            Op::Clamp(x, lo, hi) => {
                let xv = self.value(*x).data();
                elementwise(adj, *x, &|k| if xv[k] < *lo || xv[k] > *hi { T::zero() } else { T::one() })
            }
            Op::Softmax { x, outer, axis_len, inner } => {
                let (outer, axis_len, inner) = (*outer, *axis_len, *inner);
                acc(adj, *x, &|s| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |a: usize| (o * axis_len + a) * inner + i;
                            let dot: T = (0..axis_len).map(|a| g[at(a)] * out[at(a)]).sum();
                            for a in 0..axis_len {
                                s[at(a)] += out[at(a)] * (g[at(a)] - dot);
                            }
                        }
                    }
                });
            }
            Op::PrefixSoftmax { x, limits } => {
                let c = self.shape(*x)[1];
                acc(adj, *x, &|s| {
                    for (r, &lim) in limits.iter().enumerate() {
                        let base = r * c;
                        let dot: T = (0..=lim).map(|j| g[base + j] * out[base + j]).sum();
                        for j in 0..=lim {
                            s[base + j] += out[base + j] * (g[base + j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let gv = self.value(*gain).data();
                let n = gv.len();
                let nf = T::from_usize(n).expect("size fits scalar");
                acc(adj, *x, &|s| {
                    for (r, &is) in inv_std.iter().enumerate() {
                        let rs = r * n;
                        let mut sum_d = T::zero();
                        let mut sum_dx = T::zero();
                        for j in 0..n {
                            let d = g[rs + j] * gv[j];
                            sum_d += d;
                            sum_dx += d * xhat[rs + j];
                        }
                        for j in 0..n {
                            let d = g[rs + j] * gv[j];
                            s[rs + j] += is / nf * (nf * d - sum_d - xhat[rs + j] * sum_dx);
                        }
                    }
                });
                acc(adj, *gain, &|s| {
                    for (k, &gk) in g.iter().enumerate() {
                        s[k % n] += gk * xhat[k];
                    }
                });
                acc(adj, *bias, &|s| {
                    for (k, &gk) in g.iter().enumerate() {
                        s[k % n] += gk;
                    }
                });
            }
            Op::Dropout { x, mask } => elementwise(adj, *x, &|k| mask[k]),
            Op::Conv1d { x, kernel, pad } => {
                let (c_in, len) = (self.shape(*x)[0], self.shape(*x)[1]);
                let (c_out, w) = (self.shape(*kernel)[0], self.shape(*kernel)[2]);
                let out_len = out.len() / c_out;
                let xs = self.value(*x).data();
                let ks = self.value(*kernel).data();
                let pad = *pad;
                acc(adj, *x, &|s| {
                    for o in 0..c_out {
                        for c in 0..c_in {
                            for k in 0..w {
                                let kv = ks[(o * c_in + c) * w + k];
                                for t in 0..out_len {
                                    let src = t + k;
                                    if src < pad || src - pad >= len {
                                        continue;
                                    }
                                    s[c * len + src - pad] += kv * g[o * out_len + t];
                                }
                            }
                        }
                    }
                });
                acc(adj, *kernel, &|s| {
                    for o in 0..c_out {
                        for c in 0..c_in {
                            for k in 0..w {
                                let mut total = T::zero();
                                for t in 0..out_len {
                                    let src = t + k;
                                    if src < pad || src - pad >= len {
                                        continue;
                                    }
                                    total += xs[c * len + src - pad] * g[o * out_len + t];
                                }
                                s[(o * c_in + c) * w + k] += total;
                            }
                        }
                    }
                });
            }
            Op::MaxPool1d { x, argmax } => acc(adj, *x, &|s| {
                for (k, &src) in argmax.iter().enumerate() {
                    s[src] += g[k];
                }
            }),
            Op::SumAll(x) => acc(adj, *x, &|s| s.iter_mut().for_each(|v| *v += g[0])),
            Op::MeanAll(x) => {
                let n = T::from_usize(self.value(*x).numel()).expect("size fits scalar");
                acc(adj, *x, &|s| s.iter_mut().for_each(|v| *v += g[0] / n))
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    acc(adj, p, &|s| {
                        for (r, row) in s.chunks_mut(c).enumerate() {
                            add_into(row, &g[r * total + offset..r * total + offset + c]);
                        }
                    });
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    acc(adj, p, &|s| add_into(s, &g[offset..offset + n]));
                    offset += n;
                }
            }
            Op::SliceCols { x, start } => {
                let c = self.shape(*x)[1];
                let w = node.value.cols();
                acc(adj, *x, &|s| {
                    for (r, grow) in g.chunks(w).enumerate() {
                        add_into(&mut s[r * c + start..r * c + start + w], grow);
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let c = self.shape(*x)[1];
                acc(adj, *x, &|s| add_into(&mut s[start * c..start * c + g.len()], g));
            }
            Op::GatherRows { x, idx } => {
                let c = self.shape(*x)[1];
                acc(adj, *x, &|s| {
                    for (k, &i) in idx.iter().enumerate() {
                        add_into(&mut s[i * c..(i + 1) * c], &g[k * c..(k + 1) * c]);
                    }
                });
            }
            Op::ScatterRows { base, rows, idx } => {
                let c = self.shape(*base)[1];
                acc(adj, *base, &|s| {
                    add_into(s, g);
                    for &i in idx {
                        s[i * c..(i + 1) * c].iter_mut().zip(&g[i * c..(i + 1) * c]).for_each(|(x, &y)| *x -= y);
                    }
                });
                acc(adj, *rows, &|s| {
                    for (k, &i) in idx.iter().enumerate() {
                        add_into(&mut s[k * c..(k + 1) * c], &g[i * c..(i + 1) * c]);
                    }
                });
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Output length of a 1-D max pool; errors when the window exceeds the padded input.
pub fn pool_output_len(len: usize, window: usize, stride: usize, pad: usize) -> Result<usize> {
    if window > len + 2 * pad {
        bail!(Dimension, "pool window {window} exceeds padded length {}", len + 2 * pad);
    }
    Ok((len + 2 * pad - window) / stride + 1)
}

/// Adjoints produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    adj: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(ParamId, Tensor<T>)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`, if any flowed into it.
    pub fn wrt(&self, v: Var) -> Option<Tensor<T>> {
        self.adj[v.0].as_ref().map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("shape"))
    }

    pub fn params(&self) -> &[(ParamId, Tensor<T>)] {
        &self.params
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, t)| t)
    }

    pub fn into_param_grads(self) -> ParamGrads<T> {
        ParamGrads { grads: self.params }
    }
}

/// Per-parameter gradients, possibly accumulated over several graphs.
#[derive(Clone, Debug, Default)]
pub struct ParamGrads<T> {
    grads: Vec<(ParamId, Tensor<T>)>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn new() -> Self {
        Self { grads: Vec::new() }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.iter().find(|(p, _)| *p == id).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = &(ParamId, Tensor<T>)> {
        self.grads.iter()
    }

    /// Adds another set of gradients into this one.
    pub fn accumulate(&mut self, other: ParamGrads<T>) {
        for (id, g) in other.grads {
            match self.grads.iter_mut().find(|(p, _)| *p == id) {
                Some((_, mine)) => add_into(mine.data_mut(), g.data()),
                None => self.grads.push((id, g)),
            }
        }
    }

    pub fn scale(&mut self, c: T) {
        for (_, g) in &mut self.grads {
            g.data_mut().iter_mut().for_each(|v| *v *= c);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(|(_, g)| g.is_finite())
    }
}
