//! Reverse-mode automatic differentiation over a flat tape.
//!
//! Every primitive appends a node holding its forward value. Nodes are only
//! ever appended, so the tape is topologically ordered by construction and
//! `backward` is a single reverse sweep.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Gradients of a scalar loss, keyed by leaf name.
pub type Gradients = BTreeMap<String, Tensor>;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    Sum(Var, usize),
    Mean(Var, usize),
    SumAll(Var),
    Max(Var, usize, Vec<usize>),
    Concat(Vec<Var>, usize),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    L2NormalizeRows(Var, Vec<f64>),
    Transpose(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    name: Option<String>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn check_axis(op: &'static str, t: &Tensor, axis: usize) -> Result<(usize, usize)> {
    let (n, m) = t.expect_matrix(op)?;
    if axis > 1 {
        return Err(Error::invalid(format!("{op}: axis {axis} out of range")));
    }
    Ok((n, m))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf; its gradient is reported under `name`.
    pub fn leaf(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        self.push_node(value, Op::Leaf, true, Some(name.into()))
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(value, Op::Leaf, false, None)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_node(&mut self, value: Tensor, op: Op, requires_grad: bool, name: Option<String>) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            name,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_node(value, op, rg, None)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// Elementwise sum. `b` may also be a `1×m` row broadcast over `a`'s rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = if va.shape() == vb.shape() {
            va.zip_map(vb, |x, y| x + y)?
        } else {
            let (n, m) = va.expect_matrix("add")?;
            if vb.shape() != [1, m] {
                return Err(Error::shape("add", va.shape(), vb.shape()));
            }
            let mut out = va.clone();
            for i in 0..n {
                for j in 0..m {
                    out.data_mut()[i * m + j] += vb.data()[j];
                }
            }
            out
        };
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Log(a), &[a])
    }

    /// Softmax along `axis` (1 normalizes each row, 0 each column).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = softmax_value(self.value(a), axis, false)?;
        Ok(self.push(out, Op::Softmax(a, axis), &[a]))
    }

    /// Log-softmax along `axis`, computed with max subtraction.
    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = softmax_value(self.value(a), axis, true)?;
        Ok(self.push(out, Op::LogSoftmax(a, axis), &[a]))
    }

    /// Sum over `axis`; axis 0 yields `1×m`, axis 1 yields `n×1`.
    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = reduce(self.value(a), axis, "sum", |xs| xs.iter().sum())?;
        Ok(self.push(out, Op::Sum(a, axis), &[a]))
    }

    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = reduce(self.value(a), axis, "mean", |xs| {
            xs.iter().sum::<f64>() / xs.len() as f64
        })?;
        Ok(self.push(out, Op::Mean(a, axis), &[a]))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::SumAll(a), &[a])
    }

    /// Max over `axis`. Gradient goes to the first maximal entry.
    pub fn max(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        let (n, m) = check_axis("max", t, axis)?;
        if n == 0 || m == 0 {
            return Err(Error::invalid("max over an empty axis"));
        }
        let (outer, inner) = if axis == 0 { (m, n) } else { (n, m) };
        let mut vals = Vec::with_capacity(outer);
        let mut arg = Vec::with_capacity(outer);
        for o in 0..outer {
            let at = |i: usize| if axis == 0 { t.get(i, o) } else { t.get(o, i) };
            let mut best = 0;
            for i in 1..inner {
                if at(i) > at(best) {
                    best = i;
                }
            }
            vals.push(at(best));
            arg.push(best);
        }
        let shape = if axis == 0 { vec![1, m] } else { vec![n, 1] };
        let out = Tensor::new(shape, vals)?;
        Ok(self.push(out, Op::Max(a, axis, arg), &[a]))
    }

    /// Concatenation along `axis` (0 stacks rows, 1 joins columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let (n0, m0) = check_axis("concat", self.value(*first), axis)?;
        let mut rows = 0;
        let mut cols = 0;
        for p in parts {
            let (n, m) = self.value(*p).expect_matrix("concat")?;
            if (axis == 0 && m != m0) || (axis == 1 && n != n0) {
                return Err(Error::shape("concat", self.value(*first).shape(), &[n, m]));
            }
            rows += n;
            cols += m;
        }
        let out = if axis == 0 {
            let mut data = Vec::with_capacity(rows * m0);
            for p in parts {
                data.extend_from_slice(self.value(*p).data());
            }
            Tensor::matrix(rows, m0, data)?
        } else {
            let mut data = Vec::with_capacity(n0 * cols);
            for i in 0..n0 {
                for p in parts {
                    data.extend_from_slice(self.value(*p).row_slice(i));
                }
            }
            Tensor::matrix(n0, cols, data)?
        };
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis), parts))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let out = self.value(a).gather_rows(idx)?;
        Ok(self.push(out, Op::GatherRows(a, idx.to_vec()), &[a]))
    }

    /// Row `r` of `a` is added into row `idx[r]` of an `out_rows`-row result.
    pub fn scatter_add_rows(&mut self, a: Var, idx: &[usize], out_rows: usize) -> Result<Var> {
        let out = self.value(a).scatter_add_rows(idx, out_rows)?;
        Ok(self.push(out, Op::ScatterAddRows(a, idx.to_vec()), &[a]))
    }

    /// Scales every row to unit L2 norm. Zero rows stay zero and pass no gradient.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (n, m) = t.expect_matrix("l2_normalize_rows")?;
        let mut out = t.clone();
        let mut norms = Vec::with_capacity(n);
        for i in 0..n {
            let norm = t.row_slice(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            norms.push(norm);
            if norm > 0.0 {
                for j in 0..m {
                    out.data_mut()[i * m + j] /= norm;
                }
            }
        }
        Ok(self.push(out, Op::L2NormalizeRows(a, norms), &[a]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push(out, Op::Transpose(a), &[a]))
    }

    /// Reverse sweep from a scalar `loss`. Every named leaf appears in the
    /// result; leaves the loss does not depend on get a zero gradient.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if let Op::Leaf = node.op {
                grads[idx] = Some(g);
                continue;
            }
            for (input, contrib) in self.local_grads(node, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }

        let mut out = Gradients::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let (Op::Leaf, Some(name)) = (&node.op, &node.name) {
                let g = grads[idx]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                match out.get_mut(name) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        out.insert(name.clone(), g);
                    }
                }
            }
        }
        Ok(out)
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: &Var| &self.nodes[v.0].value;
        let y = &node.value;
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let mut out = Vec::with_capacity(2);
                if self.requires_grad(*a) {
                    out.push((*a, g.matmul(&val(b).transpose()?)?));
                }
                if self.requires_grad(*b) {
                    out.push((*b, val(a).transpose()?.matmul(g)?));
                }
                out
            }
            Op::Add(a, b) => {
                let gb = if val(b).shape() == g.shape() {
                    g.clone()
                } else {
                    let (n, m) = g.expect_matrix("add")?;
                    let mut s = vec![0.0; m];
                    for i in 0..n {
                        for j in 0..m {
                            s[j] += g.data()[i * m + j];
                        }
                    }
                    Tensor::matrix(1, m, s)?
                };
                vec![(*a, g.clone()), (*b, gb)]
            }
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
            Op::Mul(a, b) => vec![
                (*a, g.zip_map(val(b), |x, y| x * y)?),
                (*b, g.zip_map(val(a), |x, y| x * y)?),
            ],
            Op::Scale(a, c) => vec![(*a, g.map(|x| x * c))],
            Op::Relu(a) => vec![(*a, g.zip_map(val(a), |gx, x| if x > 0.0 { gx } else { 0.0 })?)],
            Op::Sigmoid(a) => vec![(*a, g.zip_map(y, |gx, s| gx * s * (1.0 - s))?)],
            Op::Exp(a) => vec![(*a, g.zip_map(y, |gx, e| gx * e)?)],
            Op::Log(a) => vec![(*a, g.zip_map(val(a), |gx, x| gx / x)?)],
            Op::Softmax(a, axis) => {
                // dx = y * (g - <g, y>) along the axis
                let dot = reduce(&g.zip_map(y, |p, q| p * q)?, *axis, "softmax", |xs| xs.iter().sum())?;
                let mut dx = y.clone();
                let (n, m) = y.expect_matrix("softmax")?;
                for i in 0..n {
                    for j in 0..m {
                        let d = if *axis == 1 { dot.data()[i] } else { dot.data()[j] };
                        dx.data_mut()[i * m + j] = y.get(i, j) * (g.get(i, j) - d);
                    }
                }
                vec![(*a, dx)]
            }
            Op::LogSoftmax(a, axis) => {
                // dx = g - softmax * sum(g) along the axis
                let gs = reduce(g, *axis, "log_softmax", |xs| xs.iter().sum())?;
                let mut dx = g.clone();
                let (n, m) = y.expect_matrix("log_softmax")?;
                for i in 0..n {
                    for j in 0..m {
                        let s = if *axis == 1 { gs.data()[i] } else { gs.data()[j] };
                        dx.data_mut()[i * m + j] -= y.get(i, j).exp() * s;
                    }
                }
                vec![(*a, dx)]
            }
            Op::Sum(a, axis) | Op::Mean(a, axis) => {
                let (n, m) = val(a).expect_matrix("sum")?;
                let scale = match node.op {
                    Op::Mean(..) => 1.0 / if *axis == 0 { n } else { m } as f64,
                    _ => 1.0,
                };
                let mut dx = Tensor::zeros(&[n, m]);
                for i in 0..n {
                    for j in 0..m {
                        let gi = if *axis == 0 { g.data()[j] } else { g.data()[i] };
                        dx.data_mut()[i * m + j] = gi * scale;
                    }
                }
                vec![(*a, dx)]
            }
            Op::SumAll(a) => {
                let s = g.data()[0];
                vec![(*a, Tensor::full(val(a).shape(), s))]
            }
            Op::Max(a, axis, arg) => {
                let (n, m) = val(a).expect_matrix("max")?;
                let mut dx = Tensor::zeros(&[n, m]);
                for (o, &i) in arg.iter().enumerate() {
                    let (r, c) = if *axis == 0 { (i, o) } else { (o, i) };
                    dx.data_mut()[r * m + c] += g.data()[o];
                }
                vec![(*a, dx)]
            }
            Op::Concat(parts, axis) => {
                let mut out = Vec::with_capacity(parts.len());
                let mut offset = 0;
                for p in parts {
                    let (n, m) = val(p).expect_matrix("concat")?;
                    let piece = if *axis == 0 {
                        let gm = g.cols();
                        Tensor::matrix(n, m, g.data()[offset * gm..(offset + n) * gm].to_vec())?
                    } else {
                        let mut d = Vec::with_capacity(n * m);
                        for i in 0..n {
                            d.extend_from_slice(&g.row_slice(i)[offset..offset + m]);
                        }
                        Tensor::matrix(n, m, d)?
                    };
                    offset += if *axis == 0 { n } else { m };
                    out.push((*p, piece));
                }
                out
            }
            Op::GatherRows(a, idx) => {
                vec![(*a, g.scatter_add_rows(idx, val(a).rows())?)]
            }
            Op::ScatterAddRows(a, idx) => vec![(*a, g.gather_rows(idx)?)],
            Op::L2NormalizeRows(a, norms) => {
                let (n, m) = y.expect_matrix("l2_normalize_rows")?;
                let mut dx = Tensor::zeros(&[n, m]);
                for (i, &norm) in norms.iter().enumerate() {
                    if norm == 0.0 {
                        continue;
                    }
                    let yr = y.row_slice(i);
                    let gr = g.row_slice(i);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..m {
                        dx.data_mut()[i * m + j] = (gr[j] - yr[j] * dot) / norm;
                    }
                }
                vec![(*a, dx)]
            }
            Op::Transpose(a) => vec![(*a, g.transpose()?)],
        })
    }
}

fn reduce(t: &Tensor, axis: usize, op: &'static str, f: impl Fn(&[f64]) -> f64) -> Result<Tensor> {
    let (n, m) = check_axis(op, t, axis)?;
    if axis == 1 {
        let vals = (0..n).map(|i| f(t.row_slice(i))).collect();
        Tensor::matrix(n, 1, vals)
    } else {
        let mut col = vec![0.0; n];
        let vals = (0..m)
            .map(|j| {
                for (i, c) in col.iter_mut().enumerate() {
                    *c = t.get(i, j);
                }
                f(&col)
            })
            .collect();
        Tensor::matrix(1, m, vals)
    }
}

fn softmax_value(t: &Tensor, axis: usize, log: bool) -> Result<Tensor> {
    let (n, m) = check_axis("softmax", t, axis)?;
    let mut out = t.clone();
    let (outer, inner) = if axis == 1 { (n, m) } else { (m, n) };
    let pos = |o: usize, i: usize| if axis == 1 { o * m + i } else { i * m + o };
    for o in 0..outer {
        let mx = (0..inner)
            .map(|i| t.data()[pos(o, i)])
            .fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..inner).map(|i| (t.data()[pos(o, i)] - mx).exp()).sum();
        let lz = z.ln();
        for i in 0..inner {
            let shifted = t.data()[pos(o, i)] - mx;
            out.data_mut()[pos(o, i)] = if log { shifted - lz } else { shifted.exp() / z };
        }
    }
    Ok(out)
}
