use std::borrow::Cow;
use std::ops::Range;

use super::{gemm, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, tb: bool },
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias { x: Var, bias: Var },
    Scale(Var, T),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu(Var),
    Softmax(Var),
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
    L1 { a: Var, b: Var },
    Mse { a: Var, b: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, rows: Range<usize>, cols: Range<usize> },
    GatherRows { x: Var, idx: Vec<usize> },
    Mean(Var),
    Sum(Var),
    MeanRows(Var),
    MaskRows { x: Var, emb: Var, mask: Vec<bool> },
    StraightThrough { z: Var },
    ScaleBy { x: Var, s: Var, index: usize },
}

struct Node<'a, T: Real> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// A recorded computation. Nodes are appended in execution order, so the
/// tape order is a topological order and backward walks it in reverse.
///
/// Leaves may borrow their values (model parameters) for the lifetime `'a`.
pub struct Graph<'a, T: Real> {
    nodes: Vec<Node<'a, T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Real> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<'a, T: Real> Graph<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn leaf(&mut self, value: Cow<'a, Tensor<T>>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Trainable leaf borrowing its value.
    pub fn param(&mut self, t: &'a Tensor<T>) -> Result<Var> {
        self.leaf(Cow::Borrowed(t), true)
    }

    /// Non-trainable leaf borrowing its value.
    pub fn constant_ref(&mut self, t: &'a Tensor<T>) -> Result<Var> {
        self.leaf(Cow::Borrowed(t), false)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.leaf(Cow::Owned(t), false)
    }

    /// Owned leaf; `requires_grad` marks it as a differentiation input.
    pub fn input(&mut self, t: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.leaf(Cow::Owned(t), requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass w.r.t. `v`, if `v` was reached.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value: Cow::Owned(value), op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.value(v).expect_2d(op)
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(false, false, m, k, n, self.value(a).data(), self.value(b).data(), T::zero(), &mut out);
        self.push("matmul", Tensor::matrix(m, n, out)?, Op::MatMul { a, b, tb: false }, &[a, b])
    }

    /// `[m,k] x [n,k]^T -> [m,n]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_t")?;
        let (n, k2) = self.dims2(b, "matmul_t")?;
        if k != k2 {
            return Err(Error::shape("matmul_t", format!("[{m},{k}] x [{n},{k2}]^T")));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(false, true, m, k, n, self.value(a).data(), self.value(b).data(), T::zero(), &mut out);
        self.push("matmul_t", Tensor::matrix(m, n, out)?, Op::MatMul { a, b, tb: true }, &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "transpose")?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push("transpose", Tensor::matrix(c, r, out)?, Op::Transpose(x), &[x])
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        self.push(name, t, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `[r,c] + [c]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "add_bias")?;
        if self.value(bias).len() != c {
            return Err(Error::shape("add_bias", format!("[{r},{c}] + {:?}", self.value(bias).shape())));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c) {
            for (o, &bb) in row.iter_mut().zip(b) {
                *o += bb;
            }
        }
        self.push("add_bias", Tensor::matrix(r, c, out)?, Op::AddBias { x, bias }, &[x, bias])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let s = T::lit(s);
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| a * s).collect())?;
        self.push("scale", t, Op::Scale(x, s), &[x])
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta` of length `c`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.dims2(x, "layer_norm")?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape("layer_norm", format!("affine params must have length {c}")));
        }
        let eps = T::lit(eps);
        let n = T::lit(c as f64);
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); r * c];
        let mut rstd = vec![T::zero(); r];
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        self.push(
            "layer_norm",
            Tensor::matrix(r, c, out)?,
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            &[x, gamma, beta],
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let (c, a) = (T::lit(GELU_C), T::lit(GELU_A));
        let half = T::lit(0.5);
        let v = self.value(x);
        let data = v
            .data()
            .iter()
            .map(|&z| half * z * (T::one() + (c * (z + a * z * z * z)).tanh()))
            .collect();
        let t = Tensor::new(v.shape().to_vec(), data)?;
        self.push("gelu", t, Op::Gelu(x), &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let c = v.cols();
        if c == 0 {
            return Err(Error::shape("softmax", "empty last axis"));
        }
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        self.push("softmax", t, Op::Softmax(x), &[x])
    }

    /// Rows of `table` (`[V,d]`) selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table, "embedding")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::shape("embedding", format!("id {bad} out of range for table [{v},{d}]")));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let t = Tensor::matrix(ids.len(), d, out)?;
        self.push("embedding", t, Op::Embedding { table, ids: ids.to_vec() }, &[table])
    }

    /// Mean negative log-likelihood of `targets` under row softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, v) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != n || n == 0 {
            return Err(Error::shape("cross_entropy", format!("{n} rows vs {} targets", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::shape("cross_entropy", format!("target {bad} >= vocab {v}")));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = 0.0f64;
        for (row, &t) in probs.chunks_mut(v).zip(targets) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
            total += (lse - row[t]).as_();
            softmax_in_place(row);
        }
        let loss = T::lit(total / n as f64);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            &[logits],
        )
    }

    /// Mean absolute error.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "l1_loss")?;
        let n = self.value(a).len().max(1);
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x - y).abs().as_())
            .sum();
        self.push("l1_loss", Tensor::scalar(T::lit(s / n as f64)), Op::L1 { a, b }, &[a, b])
    }

    /// Mean squared error.
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse_loss")?;
        let n = self.value(a).len().max(1);
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| {
                let d: f64 = (x - y).as_();
                d * d
            })
            .sum();
        self.push("mse_loss", Tensor::scalar(T::lit(s / n as f64)), Op::Mse { a, b }, &[a, b])
    }

    /// Concatenate 2-D tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(Error::shape("concat", format!("{} parts, axis {axis}", parts.len())));
        }
        let dims = parts.iter().map(|&p| self.dims2(p, "concat")).collect::<Result<Vec<_>>>()?;
        let t = if axis == 0 {
            let c = dims[0].1;
            if dims.iter().any(|d| d.1 != c) {
                return Err(Error::shape("concat", format!("column mismatch {dims:?}")));
            }
            let mut out = Vec::new();
            for &p in parts {
                out.extend_from_slice(self.value(p).data());
            }
            Tensor::matrix(dims.iter().map(|d| d.0).sum(), c, out)?
        } else {
            let r = dims[0].0;
            if dims.iter().any(|d| d.0 != r) {
                return Err(Error::shape("concat", format!("row mismatch {dims:?}")));
            }
            let c: usize = dims.iter().map(|d| d.1).sum();
            let mut out = Vec::with_capacity(r * c);
            for i in 0..r {
                for &p in parts {
                    out.extend_from_slice(self.value(p).row(i));
                }
            }
            Tensor::matrix(r, c, out)?
        };
        self.push("concat", t, Op::Concat { parts: parts.to_vec(), axis }, parts)
    }

    /// Sub-block `x[rows, cols]` of a 2-D tensor.
    pub fn slice(&mut self, x: Var, rows: Range<usize>, cols: Range<usize>) -> Result<Var> {
        let (r, c) = self.dims2(x, "slice")?;
        if rows.start > rows.end || rows.end > r || cols.start > cols.end || cols.end > c {
            return Err(Error::shape("slice", format!("[{r},{c}] [{rows:?}, {cols:?}]")));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * cols.len());
        for i in rows.clone() {
            out.extend_from_slice(&src.row(i)[cols.clone()]);
        }
        let t = Tensor::matrix(rows.len(), cols.len(), out)?;
        self.push("slice", t, Op::Slice { x, rows, cols }, &[x])
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(x, "gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {r}")));
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(src.row(i));
        }
        let t = Tensor::matrix(idx.len(), c, out)?;
        self.push("gather_rows", t, Op::GatherRows { x, idx: idx.to_vec() }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let s: f64 = v.data().iter().map(|z| z.as_()).sum();
        let m = T::lit(s / v.len() as f64);
        self.push("mean", Tensor::scalar(m), Op::Mean(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().map(|z| z.as_()).sum();
        self.push("sum", Tensor::scalar(T::lit(s)), Op::Sum(x), &[x])
    }

    /// Column means of a 2-D tensor, shape `[1,c]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "mean_rows")?;
        if r == 0 {
            return Err(Error::shape("mean_rows", "no rows"));
        }
        let mut out = vec![T::zero(); c];
        for row in self.value(x).data().chunks(c) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let inv = T::one() / T::lit(r as f64);
        out.iter_mut().for_each(|o| *o *= inv);
        self.push("mean_rows", Tensor::matrix(1, c, out)?, Op::MeanRows(x), &[x])
    }

    /// Replace rows flagged in `mask` by the vector `emb`.
    pub fn mask_rows(&mut self, x: Var, emb: Var, mask: &[bool]) -> Result<Var> {
        let (r, c) = self.dims2(x, "mask_rows")?;
        if mask.len() != r || self.value(emb).len() != c {
            return Err(Error::shape(
                "mask_rows",
                format!("[{r},{c}] with mask {} and embedding {:?}", mask.len(), self.value(emb).shape()),
            ));
        }
        let e = self.value(emb).data();
        let mut out = self.value(x).data().to_vec();
        for (row, &m) in out.chunks_mut(c).zip(mask) {
            if m {
                row.copy_from_slice(e);
            }
        }
        let t = Tensor::matrix(r, c, out)?;
        self.push("mask_rows", t, Op::MaskRows { x, emb, mask: mask.to_vec() }, &[x, emb])
    }

    /// Forward value of `q`, gradient passed unchanged to `z`.
    pub fn straight_through(&mut self, z: Var, q: Var) -> Result<Var> {
        self.same_shape(z, q, "straight_through")?;
        let t = self.value(q).clone();
        self.push("straight_through", t, Op::StraightThrough { z }, &[z])
    }

    /// `x * s[index]` where `s` is any tensor.
    pub fn scale_by(&mut self, x: Var, s: Var, index: usize) -> Result<Var> {
        let sv = self.value(s);
        if index >= sv.len() {
            return Err(Error::shape("scale_by", format!("index {index} of {:?}", sv.shape())));
        }
        let k = sv.data()[index];
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| a * k).collect())?;
        self.push("scale_by", t, Op::ScaleBy { x, s, index }, &[x, s])
    }

    /// Reverse-mode pass from a scalar `loss`. May run once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::DoubleBackward);
        }
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g)?;
            }
            self.grads[i] = Some(g);
        }
        for (i, g) in self.grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite { op: op_name(&self.nodes[i].op) });
                }
            }
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[T]) -> Result<()> {
        let nodes = std::mem::take(&mut self.nodes);
        let node = &nodes[i];
        let val = |v: Var| -> &Tensor<T> { &nodes[v.0].value };
        let mut grads = std::mem::take(&mut self.grads);
        macro_rules! acc {
            ($v:expr) => {
                acc_buf(&mut grads, &nodes, $v)
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, tb } => {
                let (m, k) = (val(*a).rows(), val(*a).cols());
                let (ad, bd) = (val(*a).data(), val(*b).data());
                if !tb {
                    let n = val(*b).cols();
                    if let Some(da) = acc!(*a) {
                        gemm(false, true, m, n, k, g, bd, T::one(), da);
                    }
                    if let Some(db) = acc!(*b) {
                        gemm(true, false, k, m, n, ad, g, T::one(), db);
                    }
                } else {
                    let n = val(*b).rows();
                    if let Some(da) = acc!(*a) {
                        gemm(false, false, m, n, k, g, bd, T::one(), da);
                    }
                    if let Some(db) = acc!(*b) {
                        gemm(true, false, n, m, k, g, ad, T::one(), db);
                    }
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (val(*x).rows(), val(*x).cols());
                if let Some(dx) = acc!(*x) {
                    for a in 0..r {
                        for b in 0..c {
                            dx[a * c + b] += g[b * r + a];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = acc!(*a) {
                    add_into(da, g);
                }
                if let Some(db) = acc!(*b) {
                    add_into(db, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = acc!(*a) {
                    add_into(da, g);
                }
                if let Some(db) = acc!(*b) {
                    db.iter_mut().zip(g).for_each(|(d, &gg)| *d -= gg);
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                if let Some(da) = acc!(*a) {
                    for ((d, &gg), &y) in da.iter_mut().zip(g).zip(bd) {
                        *d += gg * y;
                    }
                }
                if let Some(db) = acc!(*b) {
                    for ((d, &gg), &x) in db.iter_mut().zip(g).zip(ad) {
                        *d += gg * x;
                    }
                }
            }
            Op::AddBias { x, bias } => {
                let c = val(*x).cols();
                if let Some(dx) = acc!(*x) {
                    add_into(dx, g);
                }
                if let Some(db) = acc!(*bias) {
                    for row in g.chunks(c) {
                        add_into(db, row);
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(dx) = acc!(*x) {
                    dx.iter_mut().zip(g).for_each(|(d, &gg)| *d += gg * *s);
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let c = val(*x).cols();
                let gm = val(*gamma).data();
                let n = T::lit(c as f64);
                if let Some(dx) = acc!(*x) {
                    for (r, rs) in rstd.iter().enumerate() {
                        let gr = &g[r * c..(r + 1) * c];
                        let xh = &xhat[r * c..(r + 1) * c];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..c {
                            let d = gr[j] * gm[j];
                            m1 += d;
                            m2 += d * xh[j];
                        }
                        m1 /= n;
                        m2 /= n;
                        for j in 0..c {
                            let d = gr[j] * gm[j];
                            dx[r * c + j] += *rs * (d - m1 - xh[j] * m2);
                        }
                    }
                }
                if let Some(dg) = acc!(*gamma) {
                    for (gr, xh) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] += gr[j] * xh[j];
                        }
                    }
                }
                if let Some(db) = acc!(*beta) {
                    for gr in g.chunks(c) {
                        add_into(db, gr);
                    }
                }
            }
            Op::Gelu(x) => {
                let (c, a) = (T::lit(GELU_C), T::lit(GELU_A));
                let half = T::lit(0.5);
                let three = T::lit(3.0);
                let xd = val(*x).data();
                if let Some(dx) = acc!(*x) {
                    for ((d, &gg), &z) in dx.iter_mut().zip(g).zip(xd) {
                        let t = (c * (z + a * z * z * z)).tanh();
                        let dt = (T::one() - t * t) * c * (T::one() + three * a * z * z);
                        *d += gg * (half * (T::one() + t) + half * z * dt);
                    }
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let c = node.value.cols();
                if let Some(dx) = acc!(*x) {
                    for ((dr, gr), yr) in dx.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = val(*table).cols();
                if let Some(dt) = acc!(*table) {
                    for (row, &id) in g.chunks(d).zip(ids) {
                        add_into(&mut dt[id * d..(id + 1) * d], row);
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let v = val(*logits).cols();
                let scale = g[0] / T::lit(targets.len() as f64);
                if let Some(dl) = acc!(*logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..v {
                            let mut p = probs[r * v + j];
                            if j == t {
                                p -= T::one();
                            }
                            dl[r * v + j] += scale * p;
                        }
                    }
                }
            }
            Op::L1 { a, b } => {
                let n = T::lit(val(*a).len().max(1) as f64);
                let s = g[0] / n;
                let signs: Vec<T> = val(*a)
                    .data()
                    .iter()
                    .zip(val(*b).data())
                    .map(|(&x, &y)| sign(x - y) * s)
                    .collect();
                if let Some(da) = acc!(*a) {
                    add_into(da, &signs);
                }
                if let Some(db) = acc!(*b) {
                    db.iter_mut().zip(&signs).for_each(|(d, &s)| *d -= s);
                }
            }
            Op::Mse { a, b } => {
                let n = T::lit(val(*a).len().max(1) as f64);
                let s = T::lit(2.0) * g[0] / n;
                let diffs: Vec<T> =
                    val(*a).data().iter().zip(val(*b).data()).map(|(&x, &y)| (x - y) * s).collect();
                if let Some(da) = acc!(*a) {
                    add_into(da, &diffs);
                }
                if let Some(db) = acc!(*b) {
                    db.iter_mut().zip(&diffs).for_each(|(d, &s)| *d -= s);
                }
            }
            Op::Concat { parts, axis } => {
                if *axis == 0 {
                    let mut off = 0;
                    for &p in parts {
                        let n = val(p).len();
                        if let Some(dp) = acc!(p) {
                            add_into(dp, &g[off..off + n]);
                        }
                        off += n;
                    }
                } else {
                    let total = node.value.cols();
                    let mut col = 0;
                    for &p in parts {
                        let (r, c) = (val(p).rows(), val(p).cols());
                        if let Some(dp) = acc!(p) {
                            for i in 0..r {
                                add_into(&mut dp[i * c..(i + 1) * c], &g[i * total + col..i * total + col + c]);
                            }
                        }
                        col += c;
                    }
                }
            }
            Op::Slice { x, rows, cols } => {
                let c = val(*x).cols();
                let w = cols.len();
                if let Some(dx) = acc!(*x) {
                    for (k, i) in rows.clone().enumerate() {
                        add_into(&mut dx[i * c + cols.start..i * c + cols.end], &g[k * w..(k + 1) * w]);
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let c = val(*x).cols();
                if let Some(dx) = acc!(*x) {
                    for (row, &i) in g.chunks(c).zip(idx) {
                        add_into(&mut dx[i * c..(i + 1) * c], row);
                    }
                }
            }
            Op::Mean(x) => {
                let n = T::lit(val(*x).len() as f64);
                if let Some(dx) = acc!(*x) {
                    let s = g[0] / n;
                    dx.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = acc!(*x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::MeanRows(x) => {
                let (r, c) = (val(*x).rows(), val(*x).cols());
                let inv = T::one() / T::lit(r as f64);
                if let Some(dx) = acc!(*x) {
                    for row in dx.chunks_mut(c) {
                        for (d, &gg) in row.iter_mut().zip(g) {
                            *d += gg * inv;
                        }
                    }
                }
            }
            Op::MaskRows { x, emb, mask } => {
                let c = val(*x).cols();
                if let Some(dx) = acc!(*x) {
                    for ((dr, gr), &m) in dx.chunks_mut(c).zip(g.chunks(c)).zip(mask) {
                        if !m {
                            add_into(dr, gr);
                        }
                    }
                }
                if let Some(de) = acc!(*emb) {
                    for (gr, &m) in g.chunks(c).zip(mask) {
                        if m {
                            add_into(de, gr);
                        }
                    }
                }
            }
            Op::StraightThrough { z } => {
                if let Some(dz) = acc!(*z) {
                    add_into(dz, g);
                }
            }
            Op::ScaleBy { x, s, index } => {
                let k = val(*s).data()[*index];
                let xd = val(*x).data();
                let dot: T = g.iter().zip(xd).map(|(&a, &b)| a * b).sum();
                if let Some(dx) = acc!(*x) {
                    dx.iter_mut().zip(g).for_each(|(d, &gg)| *d += gg * k);
                }
                if let Some(ds) = acc!(*s) {
                    ds[*index] += dot;
                }
            }
        }
        self.nodes = nodes;
        self.grads = grads;
        Ok(())
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul { .. } => "matmul",
        Op::Transpose(_) => "transpose",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddBias { .. } => "add_bias",
        Op::Scale(..) => "scale",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Gelu(_) => "gelu",
        Op::Softmax(_) => "softmax",
        Op::Embedding { .. } => "embedding",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::L1 { .. } => "l1_loss",
        Op::Mse { .. } => "mse_loss",
        Op::Concat { .. } => "concat",
        Op::Slice { .. } => "slice",
        Op::GatherRows { .. } => "gather_rows",
        Op::Mean(_) => "mean",
        Op::Sum(_) => "sum",
        Op::MeanRows(_) => "mean_rows",
        Op::MaskRows { .. } => "mask_rows",
        Op::StraightThrough { .. } => "straight_through",
        Op::ScaleBy { .. } => "scale_by",
    }
}

fn acc_buf<'g, T: Real>(grads: &'g mut [Option<Vec<T>>], nodes: &[Node<'_, T>], v: Var) -> Option<&'g mut [T]> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]).as_mut_slice())
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

fn sign<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
