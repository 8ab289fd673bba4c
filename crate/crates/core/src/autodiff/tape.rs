use std::ops::Range;

use super::tensor::{matmul_raw, transpose_raw, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Norms below this are treated as zero by the normalizing ops.
pub const ZERO_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Softplus(Var),
    Sqrt(Var),
    Relu(Var),
    Clamp(Var, f64, f64),
    MatMul(Var, Var),
    Transpose(Var),
    SoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    RowNorm(Var),
    RowNormalize(Var),
    Concat(Vec<Var>, Axis),
    MaxStack(Vec<Var>, Vec<usize>),
    MaxAll(Var, usize),
    Reparam { mu: Var, sigma: Var, eps: Vec<f64> },
    Grl(Var, f64),
    GatherRows(Var, Vec<usize>),
    GatherCols(Var, Vec<usize>),
    GatherElems(Var, Vec<usize>),
    PoolRows(Var, Vec<Vec<usize>>),
    SegmentLogSumExp(Var, Vec<Range<usize>>),
    PairDistances(Var, Var, Vec<(usize, usize)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    tracked: bool,
    op: Op,
}

/// Record of primitive operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so record order is a topological
/// order and [`Tape::backward`] simply walks it in reverse. A node is tracked
/// when it is a tracked leaf or has at least one tracked input; untracked
/// nodes never receive gradient.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a gradient-tracked input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Records an input that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Untracked copy of `v`'s current value.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Accumulated gradient; `None` for untracked nodes and for tracked nodes
    /// that no backward pass has reached yet.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push_raw(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            tracked,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.push_raw(value, op, tracked)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(op, sa, sb));
        }
        Ok(())
    }

    fn zip_map(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(op, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        self.push(value, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_map("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_map("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_map("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_map("div", a, b, |x, y| x / y)?;
        Ok(self.push(v, Op::Div(a, b), &[a, b]))
    }

    /// Adds a length-`n` row vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let (m, n) = ta.dims2();
        if ta.shape().len() != 2 || tr.len() != n {
            return Err(Error::dim("add_row", ta.shape(), tr.shape()));
        }
        let mut data = ta.data().to_vec();
        for i in 0..m {
            for (x, &r) in data[i * n..(i + 1) * n].iter_mut().zip(tr.data()) {
                *x += r;
            }
        }
        let v = Tensor::matrix(m, n, data);
        Ok(self.push(v, Op::AddRow(a, row), &[a, row]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Shift(a), |x| x + c)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    /// `log(1 + e^x)`, evaluated without overflow for large `x` and without
    /// cancellation for very negative `x`.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    /// `max(0, x)`; the subgradient at exactly 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 {
            return Err(Error::dim("transpose", t.shape(), &[]));
        }
        let v = t.transpose();
        Ok(self.push(v, Op::Transpose(a), &[a]))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (m, n) = t.dims2();
        let mut data = t.data().to_vec();
        for i in 0..m {
            let row = &mut data[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        let v = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(v, Op::SoftmaxRows(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(v, Op::Mean(a), &[a])
    }

    /// Sums each row of an `m×n` matrix into a length-`m` vector.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (m, _) = t.dims2();
        let v = Tensor::vector((0..m).map(|i| t.row(i).iter().sum()).collect());
        self.push(v, Op::SumRows(a), &[a])
    }

    /// Euclidean norm of each row, as an `m×1` matrix.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (m, _) = t.dims2();
        let v = Tensor::matrix(m, 1, (0..m).map(|i| l2(t.row(i))).collect());
        self.push(v, Op::RowNorm(a), &[a])
    }

    /// Scales every row to unit length. Rows with norm below [`ZERO_NORM`]
    /// map to the zero row and pass no gradient.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (m, n) = t.dims2();
        let mut data = t.data().to_vec();
        for i in 0..m {
            let row = &mut data[i * n..(i + 1) * n];
            let nrm = l2(row);
            if nrm < ZERO_NORM {
                row.iter_mut().for_each(|x| *x = 0.0);
            } else {
                row.iter_mut().for_each(|x| *x /= nrm);
            }
        }
        let v = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(v, Op::RowNormalize(a), &[a])
    }

    /// Concatenates matrices along rows (stacking) or columns.
    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        let (_, n0) = self.value(*first).dims2();
        let m0 = self.value(*first).rows();
        let mut data = Vec::new();
        let shape = match axis {
            Axis::Rows => {
                let mut rows = 0;
                for &p in parts {
                    let t = self.value(p);
                    if t.cols() != n0 {
                        return Err(Error::dim("concat", self.value(*first).shape(), t.shape()));
                    }
                    rows += t.rows();
                    data.extend_from_slice(t.data());
                }
                vec![rows, n0]
            }
            Axis::Cols => {
                let mut cols = 0;
                for &p in parts {
                    let t = self.value(p);
                    if t.rows() != m0 {
                        return Err(Error::dim("concat", self.value(*first).shape(), t.shape()));
                    }
                    cols += t.cols();
                }
                data.reserve(m0 * cols);
                for i in 0..m0 {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row(i));
                    }
                }
                vec![m0, cols]
            }
        };
        let v = Tensor::new(shape, data)?;
        Ok(self.push(v, Op::Concat(parts.to_vec(), axis), parts))
    }

    /// Elementwise maximum across same-shape tensors. Ties resolve to the
    /// earliest input, and the backward pass routes each element's gradient
    /// to that single input.
    pub fn max_stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Usage("max over zero tensors".into()))?;
        for &p in &parts[1..] {
            self.same_shape("max_stack", first, p)?;
        }
        let len = self.value(first).len();
        let mut data = self.value(first).data().to_vec();
        let mut arg = vec![0usize; len];
        for (k, &p) in parts.iter().enumerate().skip(1) {
            for (i, &x) in self.value(p).data().iter().enumerate() {
                if x > data[i] {
                    data[i] = x;
                    arg[i] = k;
                }
            }
        }
        let v = Tensor::new(self.value(first).shape().to_vec(), data)?;
        Ok(self.push(v, Op::MaxStack(parts.to_vec(), arg), parts))
    }

    /// Which input each element of a [`Tape::max_stack`] output came from.
    pub fn max_stack_argmax(&self, v: Var) -> Option<&[usize]> {
        match &self.nodes[v.0].op {
            Op::MaxStack(_, arg) => Some(arg),
            _ => None,
        }
    }

    /// Maximum over all elements, lowest flat index on ties.
    pub fn max_all(&mut self, a: Var) -> Result<(Var, usize)> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::Usage("max over empty tensor".into()));
        }
        let mut best = 0;
        for (i, &x) in t.data().iter().enumerate() {
            if x > t.data()[best] {
                best = i;
            }
        }
        let v = Tensor::scalar(t.data()[best]);
        Ok((self.push(v, Op::MaxAll(a, best), &[a]), best))
    }

    /// Reparameterized Gaussian sample `mu + eps ⊙ sigma`.
    ///
    /// `eps` is supplied by the caller and is not part of the graph, so the
    /// operation is deterministic and gradients reach only `mu` and `sigma`.
    pub fn reparam_sample(&mut self, mu: Var, sigma: Var, eps: &Tensor) -> Result<Var> {
        self.same_shape("reparam_sample", mu, sigma)?;
        if eps.shape() != self.value(mu).shape() {
            return Err(Error::dim("reparam_sample", self.value(mu).shape(), eps.shape()));
        }
        if let Some(bad) = self.value(sigma).data().iter().find(|&&s| !(s > 0.0)) {
            return Err(Error::Domain(format!("reparam_sample needs sigma > 0, got {bad}")));
        }
        let (tm, ts) = (self.value(mu), self.value(sigma));
        let data = tm
            .data()
            .iter()
            .zip(ts.data())
            .zip(eps.data())
            .map(|((&m, &s), &e)| m + e * s)
            .collect();
        let v = Tensor::new(tm.shape().to_vec(), data)?;
        let op = Op::Reparam {
            mu,
            sigma,
            eps: eps.data().to_vec(),
        };
        Ok(self.push(v, op, &[mu, sigma]))
    }

    /// Gradient reversal: identity forward, gradient scaled by `-lambda`
    /// backward.
    pub fn grl(&mut self, a: Var, lambda: f64) -> Result<Var> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::Config(format!("gradient reversal needs lambda > 0, got {lambda}")));
        }
        let v = self.value(a).clone();
        Ok(self.push(v, Op::Grl(a, lambda), &[a]))
    }

    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = t.dims2();
        if let Some(&bad) = index.iter().find(|&&i| i >= m) {
            return Err(Error::Usage(format!("gather_rows index {bad} out of {m} rows")));
        }
        let mut data = Vec::with_capacity(index.len() * n);
        for &i in index {
            data.extend_from_slice(t.row(i));
        }
        let v = Tensor::matrix(index.len(), n, data);
        Ok(self.push(v, Op::GatherRows(a, index.to_vec()), &[a]))
    }

    pub fn gather_cols(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = t.dims2();
        if let Some(&bad) = index.iter().find(|&&j| j >= n) {
            return Err(Error::Usage(format!("gather_cols index {bad} out of {n} columns")));
        }
        let mut data = Vec::with_capacity(index.len() * m);
        for i in 0..m {
            let row = t.row(i);
            data.extend(index.iter().map(|&j| row[j]));
        }
        let v = Tensor::matrix(m, index.len(), data);
        Ok(self.push(v, Op::GatherCols(a, index.to_vec()), &[a]))
    }

    /// Selects elements by flat index into a vector.
    pub fn gather_elems(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= t.len()) {
            return Err(Error::Usage(format!("gather_elems index {bad} out of {}", t.len())));
        }
        let v = Tensor::vector(index.iter().map(|&i| t.data()[i]).collect());
        Ok(self.push(v, Op::GatherElems(a, index.to_vec()), &[a]))
    }

    /// Output row `r` is the mean of the input rows listed in `groups[r]`.
    /// Empty groups produce zero rows.
    pub fn pool_rows(&mut self, a: Var, groups: Vec<Vec<usize>>) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = t.dims2();
        let mut data = vec![0.0; groups.len() * n];
        for (r, g) in groups.iter().enumerate() {
            let out = &mut data[r * n..(r + 1) * n];
            for &i in g {
                if i >= m {
                    return Err(Error::Usage(format!("pool_rows index {i} out of {m} rows")));
                }
                for (o, &x) in out.iter_mut().zip(t.row(i)) {
                    *o += x;
                }
            }
            if !g.is_empty() {
                let inv = 1.0 / g.len() as f64;
                out.iter_mut().for_each(|o| *o *= inv);
            }
        }
        let v = Tensor::matrix(groups.len(), n, data);
        Ok(self.push(v, Op::PoolRows(a, groups), &[a]))
    }

    /// `log Σ exp` over each contiguous segment of a flat tensor.
    pub fn segment_logsumexp(&mut self, a: Var, segments: Vec<Range<usize>>) -> Result<Var> {
        let t = self.value(a);
        let mut out = Vec::with_capacity(segments.len());
        for s in &segments {
            if s.is_empty() || s.end > t.len() {
                return Err(Error::Usage(format!("invalid segment {s:?} over {} elements", t.len())));
            }
            out.push(logsumexp(&t.data()[s.clone()]));
        }
        let v = Tensor::vector(out);
        Ok(self.push(v, Op::SegmentLogSumExp(a, segments), &[a]))
    }

    /// Euclidean distances `‖a[i] − b[j]‖` for each requested row pair.
    pub fn pair_distances(&mut self, a: Var, b: Var, pairs: &[(usize, usize)]) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(Error::dim("pair_distances", ta.shape(), tb.shape()));
        }
        let mut out = Vec::with_capacity(pairs.len());
        for &(i, j) in pairs {
            if i >= ta.rows() || j >= tb.rows() {
                return Err(Error::Usage(format!("pair ({i}, {j}) out of range")));
            }
            let d2: f64 = ta.row(i).iter().zip(tb.row(j)).map(|(x, y)| (x - y) * (x - y)).sum();
            out.push(d2.sqrt());
        }
        let v = Tensor::vector(out);
        Ok(self.push(v, Op::PairDistances(a, b, pairs.to_vec()), &[a, b]))
    }

    /// Accumulates `d loss / d node` into every tracked ancestor of `loss`.
    ///
    /// Gradients add onto whatever earlier passes left behind; call
    /// [`Tape::zero_grad`] to reset.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.is_tracked(loss) {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        let mut reached = Vec::new();
        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            self.propagate(id, &g, &mut adj);
            reached.push((id, g));
        }
        for (id, g) in reached {
            let node = &mut self.nodes[id];
            match &mut node.grad {
                Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let y = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let n = &self.nodes[v.0];
            if !n.tracked {
                return;
            }
            let slot = adj[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(s, g)| *s -= g));
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (val(*a), val(*b));
                acc(*a, &mut |s| (0..s.len()).for_each(|i| s[i] += g[i] * xb[i]));
                acc(*b, &mut |s| (0..s.len()).for_each(|i| s[i] += g[i] * xa[i]));
            }
            Op::Div(a, b) => {
                let (xa, xb) = (val(*a), val(*b));
                acc(*a, &mut |s| (0..s.len()).for_each(|i| s[i] += g[i] / xb[i]));
                acc(*b, &mut |s| {
                    (0..s.len()).for_each(|i| s[i] -= g[i] * xa[i] / (xb[i] * xb[i]))
                });
            }
            Op::AddRow(a, r) => {
                acc(*a, &mut |s| add_into(s, g));
                let n = val(*r).len();
                acc(*r, &mut |s| {
                    for (k, gv) in g.iter().enumerate() {
                        s[k % n] += gv;
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |s| (0..s.len()).for_each(|i| s[i] += c * g[i])),
            Op::Shift(a) => acc(*a, &mut |s| add_into(s, g)),
            Op::Exp(a) => acc(*a, &mut |s| (0..s.len()).for_each(|i| s[i] += g[i] * y[i])),
            Op::Log(a) => {
                let x = val(*a);
                acc(*a, &mut |s| (0..s.len()).for_each(|i| s[i] += g[i] / x[i]))
            }
            Op::Tanh(a) => acc(*a, &mut |s| {
                (0..s.len()).for_each(|i| s[i] += g[i] * (1.0 - y[i] * y[i]))
            }),
            Op::Softplus(a) => {
                let x = val(*a);
                acc(*a, &mut |s| (0..s.len()).for_each(|i| s[i] += g[i] * sigmoid(x[i])))
            }
            Op::Sqrt(a) => acc(*a, &mut |s| {
                (0..s.len()).for_each(|i| {
                    if y[i] > 0.0 {
                        s[i] += g[i] * 0.5 / y[i]
                    }
                })
            }),
            Op::Relu(a) => {
                let x = val(*a);
                acc(*a, &mut |s| {
                    (0..s.len()).for_each(|i| {
                        if x[i] > 0.0 {
                            s[i] += g[i]
                        }
                    })
                })
            }
            Op::Clamp(a, lo, hi) => {
                let x = val(*a);
                acc(*a, &mut |s| {
                    (0..s.len()).for_each(|i| {
                        if x[i] >= *lo && x[i] <= *hi {
                            s[i] += g[i]
                        }
                    })
                })
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k) = ta.dims2();
                let n = tb.cols();
                acc(*a, &mut |s| {
                    let bt = transpose_raw(tb.data(), k, n);
                    add_into(s, &matmul_raw(g, &bt, m, n, k));
                });
                acc(*b, &mut |s| {
                    let at = transpose_raw(ta.data(), m, k);
                    add_into(s, &matmul_raw(&at, g, k, m, n));
                });
            }
            Op::Transpose(a) => {
                let (m, n) = self.nodes[a.0].value.dims2();
                acc(*a, &mut |s| add_into(s, &transpose_raw(g, n, m)));
            }
            Op::SoftmaxRows(a) => {
                let (m, n) = node.value.dims2();
                acc(*a, &mut |s| {
                    for i in 0..m {
                        let r = i * n..(i + 1) * n;
                        let dot: f64 = y[r.clone()].iter().zip(&g[r.clone()]).map(|(p, q)| p * q).sum();
                        for j in r {
                            s[j] += y[j] * (g[j] - dot);
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |s| s.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let inv = g[0] / val(*a).len() as f64;
                acc(*a, &mut |s| s.iter_mut().for_each(|x| *x += inv));
            }
            Op::SumRows(a) => {
                let (_, n) = self.nodes[a.0].value.dims2();
                acc(*a, &mut |s| {
                    for (k, x) in s.iter_mut().enumerate() {
                        *x += g[k / n];
                    }
                });
            }
            Op::RowNorm(a) => {
                let x = &self.nodes[a.0].value;
                let (m, n) = x.dims2();
                acc(*a, &mut |s| {
                    for i in 0..m {
                        if y[i] > 0.0 {
                            for j in 0..n {
                                s[i * n + j] += g[i] * x.data()[i * n + j] / y[i];
                            }
                        }
                    }
                });
            }
            Op::RowNormalize(a) => {
                let x = &self.nodes[a.0].value;
                let (m, n) = x.dims2();
                acc(*a, &mut |s| {
                    for i in 0..m {
                        let nrm = l2(x.row(i));
                        if nrm < ZERO_NORM {
                            continue;
                        }
                        let r = i * n..(i + 1) * n;
                        let dot: f64 = y[r.clone()].iter().zip(&g[r.clone()]).map(|(p, q)| p * q).sum();
                        for j in r {
                            s[j] += (g[j] - y[j] * dot) / nrm;
                        }
                    }
                });
            }
            Op::Concat(parts, axis) => {
                let total_cols = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let (pm, pn) = self.nodes[p.0].value.dims2();
                    match axis {
                        Axis::Rows => {
                            let len = pm * pn;
                            acc(p, &mut |s| add_into(s, &g[offset..offset + len]));
                            offset += len;
                        }
                        Axis::Cols => {
                            acc(p, &mut |s| {
                                for i in 0..pm {
                                    let src = &g[i * total_cols + offset..i * total_cols + offset + pn];
                                    add_into(&mut s[i * pn..(i + 1) * pn], src);
                                }
                            });
                            offset += pn;
                        }
                    }
                }
            }
            Op::MaxStack(parts, arg) => {
                for (k, &p) in parts.iter().enumerate() {
                    acc(p, &mut |s| {
                        for (i, &a) in arg.iter().enumerate() {
                            if a == k {
                                s[i] += g[i];
                            }
                        }
                    });
                }
            }
            Op::MaxAll(a, idx) => acc(*a, &mut |s| s[*idx] += g[0]),
            Op::Reparam { mu, sigma, eps } => {
                acc(*mu, &mut |s| add_into(s, g));
                acc(*sigma, &mut |s| (0..s.len()).for_each(|i| s[i] += eps[i] * g[i]));
            }
            Op::Grl(a, lambda) => acc(*a, &mut |s| (0..s.len()).for_each(|i| s[i] -= lambda * g[i])),
            Op::GatherRows(a, index) => {
                let n = node.value.cols();
                acc(*a, &mut |s| {
                    for (r, &i) in index.iter().enumerate() {
                        add_into(&mut s[i * n..(i + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::GatherCols(a, index) => {
                let (m, k) = node.value.dims2();
                let n = self.nodes[a.0].value.cols();
                acc(*a, &mut |s| {
                    for i in 0..m {
                        for (c, &j) in index.iter().enumerate() {
                            s[i * n + j] += g[i * k + c];
                        }
                    }
                });
            }
            Op::GatherElems(a, index) => acc(*a, &mut |s| {
                for (r, &i) in index.iter().enumerate() {
                    s[i] += g[r];
                }
            }),
            Op::PoolRows(a, groups) => {
                let n = node.value.cols();
                acc(*a, &mut |s| {
                    for (r, grp) in groups.iter().enumerate() {
                        if grp.is_empty() {
                            continue;
                        }
                        let inv = 1.0 / grp.len() as f64;
                        for &i in grp {
                            for j in 0..n {
                                s[i * n + j] += g[r * n + j] * inv;
                            }
                        }
                    }
                });
            }
            Op::SegmentLogSumExp(a, segments) => {
                let x = val(*a);
                acc(*a, &mut |s| {
                    for (k, seg) in segments.iter().enumerate() {
                        for i in seg.clone() {
                            s[i] += g[k] * (x[i] - y[k]).exp();
                        }
                    }
                });
            }
            Op::PairDistances(a, b, pairs) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let n = ta.cols();
                let coef = |k: usize| if y[k] > ZERO_NORM { g[k] / y[k] } else { 0.0 };
                acc(*a, &mut |s| {
                    for (k, &(i, j)) in pairs.iter().enumerate() {
                        let c = coef(k);
                        for d in 0..n {
                            s[i * n + d] += c * (ta.row(i)[d] - tb.row(j)[d]);
                        }
                    }
                });
                acc(*b, &mut |s| {
                    for (k, &(i, j)) in pairs.iter().enumerate() {
                        let c = coef(k);
                        for d in 0..n {
                            s[j * n + d] -= c * (ta.row(i)[d] - tb.row(j)[d]);
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn l2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logsumexp(x: &[f64]) -> f64 {
    let mx = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + x.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_and_orthogonal() {
        let mut t = Tape::new();
        let i = t.constant(Tensor::identity(2));
        let a = t.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let p = t.matmul(i, a).unwrap();
        assert_eq!(t.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let r = t.constant(Tensor::from_rows(&[&[1.0, 0.0]]));
        let c = t.constant(Tensor::from_rows(&[&[0.0], &[1.0]]));
        let p = t.matmul(r, c).unwrap();
        assert_eq!(t.value(p).data(), &[0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(vec![2, 3]));
        let b = t.constant(Tensor::zeros(vec![2, 3]));
        let msg = t.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_symmetric_and_shift_safe() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_rows(&[&[0.0, 0.0], &[5.0, 1005.0]]));
        let s = t.softmax_rows(a);
        let v = t.value(s).data();
        assert_eq!(&v[..2], &[0.5, 0.5]);
        assert!(v[2] < 1e-300 && (v[3] - 1.0).abs() < 1e-15);
        assert!(v.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn softplus_values() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
        let tiny = softplus(-40.0);
        assert!(tiny > 0.0);
        assert!((tiny / (-40f64).exp() - 1.0).abs() < 1e-12);
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
    }

    #[test]
    fn reparam_cases() {
        let mut t = Tape::new();
        let mu = t.leaf(Tensor::vector(vec![0.3, -1.0]));
        let sg = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        let z = t.reparam_sample(mu, sg, &Tensor::zeros(vec![2])).unwrap();
        assert_eq!(t.value(z), t.value(mu));

        let mu = t.leaf(Tensor::scalar(0.0));
        let sg = t.leaf(Tensor::scalar(1.0));
        let z = t.reparam_sample(mu, sg, &Tensor::scalar(1.5)).unwrap();
        assert_eq!(t.value(z).item(), 1.5);
        t.backward(z).unwrap();
        assert_eq!(t.grad(mu).unwrap().item(), 1.0);
        assert_eq!(t.grad(sg).unwrap().item(), 1.5);
    }

    #[test]
    fn reparam_rejects_nonpositive_sigma() {
        let mut t = Tape::new();
        let mu = t.leaf(Tensor::scalar(0.0));
        let sg = t.leaf(Tensor::scalar(0.0));
        assert!(matches!(
            t.reparam_sample(mu, sg, &Tensor::scalar(1.0)),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn grl_forward_identity_backward_reversed() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![0.1, -7.25, 3.0]));
        let y = t.grl(x, 0.01).unwrap();
        assert_eq!(t.value(y), t.value(x));
        let y2 = t.scale(y, 2.0);
        let s = t.sum(y2);
        t.backward(s).unwrap();
        for g in t.grad(x).unwrap().data() {
            assert!((g + 0.02).abs() < 1e-18);
        }
    }

    #[test]
    fn grl_twice_scales_by_product() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(1.0));
        let a = t.grl(x, 0.5).unwrap();
        let b = t.grl(a, 0.2).unwrap();
        t.backward(b).unwrap();
        assert!((t.grad(x).unwrap().item() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn grl_rejects_nonpositive_lambda() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(1.0));
        assert!(matches!(t.grl(x, 0.0), Err(Error::Config(_))));
        assert!(matches!(t.grl(x, -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn backward_basics() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(vec![2, 3]));
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert!(t.grad(x).unwrap().data().iter().all(|&g| g == 1.0));

        let x = t.leaf(Tensor::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap().item(), 6.0);
        // second pass accumulates
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap().item(), 12.0);
        t.zero_grad();
        assert!(t.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(vec![2]));
        assert!(matches!(t.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn untracked_never_receives_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Tensor::scalar(2.0));
        let x = t.leaf(Tensor::scalar(3.0));
        let y = t.mul(c, x).unwrap();
        t.backward(y).unwrap();
        assert!(t.grad(c).is_none());
        assert_eq!(t.grad(x).unwrap().item(), 2.0);
    }

    #[test]
    fn max_stack_ties_go_to_first() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::vector(vec![0.1, 0.5]));
        let b = t.leaf(Tensor::vector(vec![0.5, 0.5]));
        let c = t.leaf(Tensor::vector(vec![0.3, 0.2]));
        let m = t.max_stack(&[a, b, c]).unwrap();
        assert_eq!(t.value(m).data(), &[0.5, 0.5]);
        assert_eq!(t.max_stack_argmax(m).unwrap(), &[1, 0]);
        let s = t.sum(m);
        t.backward(s).unwrap();
        assert_eq!(t.grad(a).unwrap().data(), &[0.0, 1.0]);
        assert_eq!(t.grad(b).unwrap().data(), &[1.0, 0.0]);
        assert!(t.grad(c).is_none() || t.grad(c).unwrap().data() == [0.0, 0.0]);
    }

    #[test]
    fn row_normalize_zero_row() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_rows(&[&[0.0, 0.0], &[3.0, 4.0]]));
        let y = t.row_normalize(x);
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 0.6, 0.8]);
    }
}
