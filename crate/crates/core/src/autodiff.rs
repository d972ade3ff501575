//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as it executes. Nodes are addressed by
//! [`Var`] handles; values are immutable once computed. `backward` walks the
//! recording in reverse execution order and accumulates gradients into the
//! trainable leaves, which keep them until [`Graph::zero_grad`].

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{self, axis_split, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Recording,
    Inference,
}

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, S),
    AddScalar(usize),
    Transpose(usize),
    Reshape(usize),
    Concat { parts: Vec<usize>, axis: usize },
    Narrow { input: usize, axis: usize, start: usize },
    SumAxis { input: usize, axis: usize },
    MeanAxis { input: usize, axis: usize },
    SumAll(usize),
    MeanAll(usize),
    L2Normalize { input: usize, axis: usize },
    GatherRows { table: usize, rows: Vec<usize> },
    Softmax { input: usize, axis: usize },
    LogSumExp { input: usize, axis: usize },
    Gelu(usize),
    RmsNorm { input: usize, eps: S },
}

#[derive(Clone, Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
    trainable: bool,
}

/// Vectors shorter than this are treated as zero by [`Graph::l2_normalize`].
pub const NORM_FLOOR: f64 = 1e-12;

/// Recording of executed operations.
#[derive(Clone, Debug)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    mode: Mode,
    grads: Vec<Option<Tensor<S>>>,
    backward_done: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    /// A graph that records operations for `backward`.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), mode: Mode::Recording, grads: Vec::new(), backward_done: false }
    }

    /// A graph that only evaluates; `backward` on it is a contract error.
    pub fn inference() -> Self {
        Self { mode: Mode::Inference, ..Self::new() }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf. In inference mode this is the same as a constant.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        let trainable = self.mode == Mode::Recording;
        self.push_leaf(value, trainable)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor<S>, trainable: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: trainable, trainable });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, parents: &[usize]) -> Var {
        let requires_grad =
            self.mode == Mode::Recording && parents.iter().any(|&p| self.nodes[p].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad, trainable: false });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a trainable leaf, if `backward` reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads[v.0].as_ref()
    }

    /// Clears leaf gradients and re-arms `backward`.
    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    // ---- binary ---------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = tensor::matmul_dims(self.shape(a), self.shape(b))?;
        let mut out = vec![S::zero(); m * n];
        tensor::matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a.0, b.0), &[a.0, b.0]))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = match (self.shape(a), self.shape(b)) {
            ([m, k], [n, k2]) if k == k2 => (*m, *k, *n),
            (x, y) => return Err(Error::Dimension(format!("matmul of {x:?} by transpose of {y:?}"))),
        };
        let mut out = vec![S::zero(); m * n];
        tensor::matmul_t_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulT(a.0, b.0), &[a.0, b.0]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a.0, b.0), &[a.0, b.0]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a.0, b.0), &[a.0, b.0]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a.0, b.0), &[a.0, b.0]))
    }

    /// Adds a vector to every row (last axis) of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let n = *self.shape(a).last().unwrap_or(&0);
        if self.shape(row) != [n] {
            return Err(Error::Dimension(format!(
                "row add of {:?} to {:?}",
                self.shape(row),
                self.shape(a)
            )));
        }
        let r = self.value(row).data().to_vec();
        let av = self.value(a);
        let data = av.data().iter().enumerate().map(|(i, &x)| x + r[i % n]).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(out, Op::AddRow(a.0, row.0), &[a.0, row.0]))
    }

    // ---- unary ----------------------------------------------------------

    pub fn scale(&mut self, a: Var, s: S) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a.0, s), &[a.0])
    }

    pub fn add_scalar(&mut self, a: Var, s: S) -> Var {
        let out = self.value(a).map(|x| x + s);
        self.push(out, Op::AddScalar(a.0), &[a.0])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose2()?;
        Ok(self.push(out, Op::Transpose(a.0), &[a.0]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a.0), &[a.0]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Dimension("concat of nothing".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Dimension(format!("concat axis {axis} on {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(k, (x, y))| k == axis || x == y);
            if !compatible {
                return Err(Error::Dimension(format!("concat of {base:?} with {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let v = self.value(*p);
                let len = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat { parts: ids.clone(), axis }, &ids))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::Dimension(format!("narrow {start}+{len} on axis {axis} of {shape:?}")));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let at = (o * n + start) * inner;
            out.extend_from_slice(&src[at..at + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        Ok(self.push(Tensor::new(new_shape, out)?, Op::Narrow { input: a.0, axis, start }, &[a.0]))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = self.reduce_axis(a, axis)?;
        Ok(self.push(out, Op::SumAxis { input: a.0, axis }, &[a.0]))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = S::c(self.shape(a).get(axis).copied().unwrap_or(1) as f64);
        let out = self.reduce_axis(a, axis)?.map(|x| x / n);
        Ok(self.push(out, Op::MeanAxis { input: a.0, axis }, &[a.0]))
    }

    fn reduce_axis(&self, a: Var, axis: usize) -> Result<Tensor<S>> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!("reduce axis {axis} on {shape:?}")));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let row = &src[(o * n + k) * inner..(o * n + k + 1) * inner];
                for (acc, &x) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc = *acc + x;
                }
            }
        }
        let mut new_shape = shape;
        new_shape.remove(axis);
        Tensor::new(new_shape, out)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::SumAll(a.0), &[a.0])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).mean());
        self.push(out, Op::MeanAll(a.0), &[a.0])
    }

    /// Unit-normalizes along `axis`. Vectors with norm below [`NORM_FLOOR`]
    /// map to zero (and pass no gradient); a warning is logged.
    pub fn l2_normalize(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!("normalize axis {axis} on {shape:?}")));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![S::zero(); src.len()];
        let mut zeroed = 0usize;
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let norm = (0..n).map(|k| src[at(k)] * src[at(k)]).sum::<S>().sqrt();
                if norm < S::c(NORM_FLOOR) {
                    zeroed += 1;
                    continue;
                }
                for k in 0..n {
                    out[at(k)] = src[at(k)] / norm;
                }
            }
        }
        if zeroed > 0 {
            log::warn!("l2_normalize: {zeroed} zero-norm vector(s) mapped to zero");
        }
        Ok(self.push(Tensor::new(shape, out)?, Op::L2Normalize { input: a.0, axis }, &[a.0]))
    }

    /// Row lookup into a `vocab × d` table.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let (count, d) = match self.shape(table) {
            [c, d] => (*c, *d),
            s => return Err(Error::Dimension(format!("gather from non-matrix {s:?}"))),
        };
        if let Some(bad) = rows.iter().find(|&&r| r >= count) {
            return Err(Error::Dimension(format!("row {bad} out of {count}")));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        let t = Tensor::new(vec![rows.len(), d], out)?;
        Ok(self.push(t, Op::GatherRows { table: table.0, rows: rows.to_vec() }, &[table.0]))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = self.along_axis(a, axis, |xs, ys| {
            let m = xs.iter().fold(S::neg_infinity(), |m, &x| m.max(x));
            let mut z = S::zero();
            for (y, &x) in ys.iter_mut().zip(xs) {
                *y = (x - m).exp();
                z = z + *y;
            }
            ys.iter_mut().for_each(|y| *y = *y / z);
        })?;
        Ok(self.push(out, Op::Softmax { input: a.0, axis }, &[a.0]))
    }

    /// `log Σ exp` along `axis`; the axis is removed.
    pub fn log_sum_exp(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!("logsumexp axis {axis} on {shape:?}")));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let m = (0..n).fold(S::neg_infinity(), |m, k| m.max(src[at(k)]));
                let s: S = (0..n).map(|k| (src[at(k)] - m).exp()).sum();
                out.push(m + s.ln());
            }
        }
        let mut new_shape = shape;
        new_shape.remove(axis);
        Ok(self.push(Tensor::new(new_shape, out)?, Op::LogSumExp { input: a.0, axis }, &[a.0]))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| gelu(x).0);
        self.push(out, Op::Gelu(a.0), &[a.0])
    }

    /// Parameter-free RMS normalization over the last axis.
    pub fn rms_norm(&mut self, a: Var, eps: S) -> Result<Var> {
        let axis = self.shape(a).len().checked_sub(1).ok_or_else(|| Error::Dimension("rms_norm of scalar".into()))?;
        let out = self.along_axis(a, axis, |xs, ys| {
            let r = rms(xs, eps);
            for (y, &x) in ys.iter_mut().zip(xs) {
                *y = x / r;
            }
        })?;
        Ok(self.push(out, Op::RmsNorm { input: a.0, eps }, &[a.0]))
    }

    /// Applies `f(input_lane, output_lane)` to every 1-D lane along `axis`.
    fn along_axis(&self, a: Var, axis: usize, f: impl Fn(&[S], &mut [S])) -> Result<Tensor<S>> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!("axis {axis} on {shape:?}")));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![S::zero(); src.len()];
        let mut xs = vec![S::zero(); n];
        let mut ys = vec![S::zero(); n];
        for o in 0..outer {
            for i in 0..inner {
                for k in 0..n {
                    xs[k] = src[(o * n + k) * inner + i];
                }
                f(&xs, &mut ys);
                for k in 0..n {
                    out[(o * n + k) * inner + i] = ys[k];
                }
            }
        }
        Tensor::new(shape, out)
    }

    // ---- backward -------------------------------------------------------

    /// Accumulates d`loss`/d`leaf` into every trainable leaf that `loss`
    /// depends on. Trainable leaves it does not reach receive zeros.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.mode == Mode::Inference {
            return Err(Error::Contract("backward on a graph recorded in inference mode".into()));
        }
        if self.backward_done {
            return Err(Error::Contract("backward called twice without zero_grad".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!("backward from non-scalar of shape {:?}", self.shape(loss))));
        }
        self.backward_done = true;

        let mut adj: Vec<Option<Vec<S>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            adj[loss.0] = Some(vec![S::one()]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            if self.nodes[id].trainable {
                let acc = self.grads[id].get_or_insert_with(|| Tensor::zeros(self.nodes[id].value.shape()));
                for (a, &x) in acc.data_mut().iter_mut().zip(&g) {
                    *a = *a + x;
                }
                continue;
            }
            self.propagate(id, &g, &mut adj);
        }
        for id in 0..self.nodes.len() {
            if self.nodes[id].trainable && self.grads[id].is_none() {
                self.grads[id] = Some(Tensor::zeros(self.nodes[id].value.shape()));
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[S], adj: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[id];
        let val = |i: usize| self.nodes[i].value.data();
        let shp = |i: usize| self.nodes[i].value.shape();
        let needs = |i: usize| self.nodes[i].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k, n) = tensor::matmul_dims(shp(*a), shp(*b)).expect("checked in forward");
                if needs(*a) {
                    // dA = dC · Bᵀ
                    let mut d = vec![S::zero(); m * k];
                    tensor::matmul_t_into(g, val(*b), &mut d, m, n, k);
                    accumulate(adj, *a, d);
                }
                if needs(*b) {
                    // dB = Aᵀ · dC
                    let mut d = vec![S::zero(); k * n];
                    tensor::matmul_tn_into(val(*a), g, &mut d, m, k, n);
                    accumulate(adj, *b, d);
                }
            }
            Op::MatMulT(a, b) => {
                let (m, k) = (shp(*a)[0], shp(*a)[1]);
                let n = shp(*b)[0];
                if needs(*a) {
                    // C = A Bᵀ ⇒ dA = dC · B
                    let mut d = vec![S::zero(); m * k];
                    tensor::matmul_into(g, val(*b), &mut d, m, n, k);
                    accumulate(adj, *a, d);
                }
                if needs(*b) {
                    // dB = dCᵀ · A
                    let mut d = vec![S::zero(); n * k];
                    tensor::matmul_tn_into(g, val(*a), &mut d, m, n, k);
                    accumulate(adj, *b, d);
                }
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    accumulate(adj, *a, g.to_vec());
                }
                if needs(*b) {
                    accumulate(adj, *b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    accumulate(adj, *a, g.to_vec());
                }
                if needs(*b) {
                    accumulate(adj, *b, g.iter().map(|&x| -x).collect());
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    accumulate(adj, *a, g.iter().zip(val(*b)).map(|(&x, &y)| x * y).collect());
                }
                if needs(*b) {
                    accumulate(adj, *b, g.iter().zip(val(*a)).map(|(&x, &y)| x * y).collect());
                }
            }
            Op::AddRow(a, row) => {
                if needs(*a) {
                    accumulate(adj, *a, g.to_vec());
                }
                if needs(*row) {
                    let n = shp(*row)[0];
                    let mut d = vec![S::zero(); n];
                    for (i, &x) in g.iter().enumerate() {
                        d[i % n] = d[i % n] + x;
                    }
                    accumulate(adj, *row, d);
                }
            }
            Op::Scale(a, s) => accumulate(adj, *a, g.iter().map(|&x| x * *s).collect()),
            Op::AddScalar(a) | Op::Reshape(a) => accumulate(adj, *a, g.to_vec()),
            Op::Transpose(a) => {
                let s = shp(*a);
                let (r, c) = (s[0], s[1]);
                // output is c×r
                let mut d = vec![S::zero(); r * c];
                for i in 0..c {
                    for j in 0..r {
                        d[j * c + i] = g[i * r + j];
                    }
                }
                accumulate(adj, *a, d);
            }
            Op::Concat { parts, axis } => {
                let out_shape = node.value.shape();
                let (outer, total, inner) = axis_split(out_shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = shp(p)[*axis];
                    if needs(p) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let at = (o * total + offset) * inner;
                            d.extend_from_slice(&g[at..at + len * inner]);
                        }
                        accumulate(adj, p, d);
                    }
                    offset += len;
                }
            }
            Op::Narrow { input, axis, start } => {
                let (outer, n, inner) = axis_split(shp(*input), *axis);
                let len = node.value.shape()[*axis];
                let mut d = vec![S::zero(); outer * n * inner];
                for o in 0..outer {
                    let at = (o * n + start) * inner;
                    d[at..at + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                accumulate(adj, *input, d);
            }
            Op::SumAxis { input, axis } | Op::MeanAxis { input, axis } => {
                let (outer, n, inner) = axis_split(shp(*input), *axis);
                let f = match node.op {
                    Op::MeanAxis { .. } => S::one() / S::c(n as f64),
                    _ => S::one(),
                };
                let mut d = vec![S::zero(); outer * n * inner];
                for o in 0..outer {
                    for k in 0..n {
                        for i in 0..inner {
                            d[(o * n + k) * inner + i] = g[o * inner + i] * f;
                        }
                    }
                }
                accumulate(adj, *input, d);
            }
            Op::SumAll(a) => accumulate(adj, *a, vec![g[0]; val(*a).len()]),
            Op::MeanAll(a) => {
                let n = val(*a).len();
                accumulate(adj, *a, vec![g[0] / S::c(n as f64); n]);
            }
            Op::L2Normalize { input, axis } => {
                let (outer, n, inner) = axis_split(shp(*input), *axis);
                let x = val(*input);
                let y = node.value.data();
                let mut d = vec![S::zero(); x.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * n + k) * inner + i;
                        let norm = (0..n).map(|k| x[at(k)] * x[at(k)]).sum::<S>().sqrt();
                        if norm < S::c(NORM_FLOOR) {
                            continue;
                        }
                        let ydg: S = (0..n).map(|k| y[at(k)] * g[at(k)]).sum();
                        for k in 0..n {
                            d[at(k)] = (g[at(k)] - y[at(k)] * ydg) / norm;
                        }
                    }
                }
                accumulate(adj, *input, d);
            }
            Op::GatherRows { table, rows } => {
                let d_model = shp(*table)[1];
                let mut d = vec![S::zero(); val(*table).len()];
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..d_model {
                        d[r * d_model + j] = d[r * d_model + j] + g[k * d_model + j];
                    }
                }
                accumulate(adj, *table, d);
            }
            Op::Softmax { input, axis } => {
                let (outer, n, inner) = axis_split(shp(*input), *axis);
                let y = node.value.data();
                let mut d = vec![S::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * n + k) * inner + i;
                        let s: S = (0..n).map(|k| y[at(k)] * g[at(k)]).sum();
                        for k in 0..n {
                            d[at(k)] = y[at(k)] * (g[at(k)] - s);
                        }
                    }
                }
                accumulate(adj, *input, d);
            }
            Op::LogSumExp { input, axis } => {
                let (outer, n, inner) = axis_split(shp(*input), *axis);
                let x = val(*input);
                let lse = node.value.data();
                let mut d = vec![S::zero(); x.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let j = o * inner + i;
                        for k in 0..n {
                            let at = (o * n + k) * inner + i;
                            d[at] = g[j] * (x[at] - lse[j]).exp();
                        }
                    }
                }
                accumulate(adj, *input, d);
            }
            Op::Gelu(a) => {
                accumulate(adj, *a, g.iter().zip(val(*a)).map(|(&dy, &x)| dy * gelu(x).1).collect());
            }
            Op::RmsNorm { input, eps } => {
                let x = val(*input);
                let n = *shp(*input).last().expect("non-scalar");
                let y = node.value.data();
                let mut d = vec![S::zero(); x.len()];
                for row in 0..x.len() / n {
                    let lane = row * n..(row + 1) * n;
                    let r = rms(&x[lane.clone()], *eps);
                    let ydg: S = lane.clone().map(|k| y[k] * g[k]).sum::<S>() / S::c(n as f64);
                    for k in lane {
                        d[k] = (g[k] - y[k] * ydg) / r;
                    }
                }
                accumulate(adj, *input, d);
            }
        }
    }
}

fn accumulate<S: Scalar>(adj: &mut [Option<Vec<S>>], id: usize, d: Vec<S>) {
    match &mut adj[id] {
        Some(acc) => acc.iter_mut().zip(d).for_each(|(a, x)| *a = *a + x),
        slot @ None => *slot = Some(d),
    }
}

fn rms<S: Scalar>(xs: &[S], eps: S) -> S {
    let ms = xs.iter().map(|&x| x * x).sum::<S>() / S::c(xs.len() as f64);
    (ms + eps).sqrt()
}

/// GELU value and derivative.
fn gelu<S: Scalar>(x: S) -> (S, S) {
    let k = S::c((2.0 / std::f64::consts::PI).sqrt());
    let a = S::c(0.044715);
    let half = S::c(0.5);
    let u = k * (x + a * x * x * x);
    let t = u.tanh();
    let value = half * x * (S::one() + t);
    let du = k * (S::one() + S::c(3.0) * a * x * x);
    let deriv = half * (S::one() + t) + half * x * (S::one() - t * t) * du;
    (value, deriv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_orthogonal() {
        let mut g = Graph::<f64>::new();
        let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let c = g.matmul(i, b).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
        let r = g.constant(t(&[1, 2], &[1.0, 0.0]));
        let col = g.constant(t(&[2, 1], &[0.0, 5.0]));
        let z = g.matmul(r, col).unwrap();
        assert_eq!(g.value(z).data(), &[0.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("by"), "{err}");
    }

    #[test]
    fn softmax_cases() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(t(&[3], &[1000.0, 0.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        let d = g.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-12 && d[1].abs() < 1e-12 && d[2].abs() < 1e-12);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_loss_gives_zero_gradients() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[3], &[1.0, 2.0, 3.0]));
        let c = g.constant(Tensor::scalar(7.0));
        g.backward(c).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_contract_errors() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
        let loss = g.sum(x);
        g.backward(loss).unwrap();
        assert!(matches!(g.backward(loss), Err(Error::Contract(_))));
        g.zero_grad();
        g.backward(loss).unwrap();

        let mut inf = Graph::<f64>::inference();
        let x = inf.param(t(&[2], &[1.0, 2.0]));
        let loss = inf.sum(x);
        assert!(matches!(inf.backward(loss), Err(Error::Contract(_))));
    }

    #[test]
    fn gradients_accumulate_across_losses() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let a = g.sum(x);
        let b = g.scale(a, 3.0);
        let c = g.add(a, b).unwrap();
        g.backward(c).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[4.0, 4.0]);
    }

    #[test]
    fn zero_norm_normalizes_to_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.param(t(&[2, 2], &[0.0, 0.0, 3.0, 4.0]));
        let y = g.l2_normalize(x, 1).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.6, 0.8]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(&g.grad(x).unwrap().data()[..2], &[0.0, 0.0]);
    }
}
