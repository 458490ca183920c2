use super::{ParamGrads, ParamId, ParamStore, Tensor};
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive kinds exposed through [`Tape::forward`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    MatMul,
    Add,
    Relu,
    Softmax { axis: usize },
    LogSumExp { axis: usize },
    CosineSimilarity,
    Concat { axis: usize },
    Mean { axis: usize },
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softmax(Var, usize),
    LogSumExp(Var, usize),
    Cosine(Var, Var),
    NormalizeRows(Var),
    Transpose(Var),
    Concat(Vec<Var>, usize),
    Mean(Var, usize),
    Sum(Var),
    IndexSelect(Var, Vec<usize>),
    SegmentMean(Var, Vec<Vec<usize>>),
    Reshape(Var),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    /// Same shape, or both operands hold a single value.
    None,
    /// Right operand is one row added to every row of the left.
    Rows,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run computation record. Build a fresh tape for each forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(ParamId, Var)>,
}

/// (outer, len, inner) strides for reducing `shape` along `axis`.
fn axis_split(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Op {
            op,
            msg: format!("axis {axis} out of range for shape {shape:?}"),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn without_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

fn shape_err(op: &'static str, shapes: &[&[usize]]) -> Error {
    Error::Shape {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Input that receives a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Snapshot of a stored parameter; its gradient is reported by [`Gradients::params`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.leaf(store.tensor(id).clone());
        self.params.push((id, v));
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Smallest |input| seen by any relu on this tape (`inf` when there is none).
    /// Finite-difference checks need this margin to exceed the step size.
    pub fn relu_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(x),
                _ => None,
            })
            .flat_map(|x| self.nodes[x.0].value.data().iter().map(|v| v.abs()))
            .fold(f64::INFINITY, f64::min)
    }

    /// Dispatches one of the named primitive kinds.
    pub fn forward(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(Error::Op {
                    op: "forward",
                    msg: format!("{kind:?} takes {n} inputs, got {}", inputs.len()),
                })
            }
        };
        match kind {
            OpKind::MatMul => {
                arity(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            OpKind::Add => {
                arity(2)?;
                self.add(inputs[0], inputs[1])
            }
            OpKind::Relu => {
                arity(1)?;
                Ok(self.relu(inputs[0]))
            }
            OpKind::Softmax { axis } => {
                arity(1)?;
                self.softmax(inputs[0], axis)
            }
            OpKind::LogSumExp { axis } => {
                arity(1)?;
                self.log_sum_exp(inputs[0], axis)
            }
            OpKind::CosineSimilarity => {
                arity(2)?;
                self.cosine_similarity(inputs[0], inputs[1])
            }
            OpKind::Concat { axis } => self.concat(inputs, axis),
            OpKind::Mean { axis } => {
                arity(1)?;
                self.mean(inputs[0], axis)
            }
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", &[sa, sb]));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (ad, bd) = (ta.data(), tb.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = ad[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for (o, bv) in row.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    fn broadcast_kind(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() || (ta.numel() == 1 && tb.numel() == 1) {
            Ok(Broadcast::None)
        } else if ta.rank() == 2
            && (tb.rank() == 1 || (tb.rank() == 2 && tb.shape()[0] == 1))
            && tb.numel() == ta.shape()[1]
        {
            Ok(Broadcast::Rows)
        } else {
            Err(shape_err(op, &[ta.shape(), tb.shape()]))
        }
    }

    fn binary(&self, a: Var, b: Var, bc: Broadcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let bd = tb.data();
        let data = match bc {
            Broadcast::None => ta.data().iter().zip(bd).map(|(x, y)| f(*x, *y)).collect(),
            Broadcast::Rows => {
                let n = bd.len();
                ta.data()
                    .iter()
                    .enumerate()
                    .map(|(i, x)| f(*x, bd[i % n]))
                    .collect()
            }
        };
        Tensor::from_parts(ta.shape().to_vec(), data)
    }

    /// Elementwise sum. `b` may also be a single row broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = self.broadcast_kind("add", a, b)?;
        let out = self.binary(a, b, bc, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b, bc), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = self.broadcast_kind("sub", a, b)?;
        let out = self.binary(a, b, bc, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b, bc), rg))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", &[ta.shape(), tb.shape()]));
        }
        let out = self.binary(a, b, Broadcast::None, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let t = self.value(a);
        let out = Tensor::from_parts(
            t.shape().to_vec(),
            t.data().iter().map(|x| x * factor).collect(),
        );
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, factor), rg)
    }

    /// Rectifier. The derivative at exactly zero is taken as zero.
    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::from_parts(
            t.shape().to_vec(),
            t.data().iter().map(|x| x.max(0.0)).collect(),
        );
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        let (outer, len, inner) = axis_split("softmax", t.shape(), axis)?;
        if len == 0 {
            return Err(Error::Op {
                op: "softmax",
                msg: "empty axis".into(),
            });
        }
        let x = t.data();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let m = (0..len).map(|k| x[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..len {
                    let e = (x[idx(k)] - m).exp();
                    out[idx(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    out[idx(k)] /= z;
                }
            }
        }
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Softmax(a, axis), rg))
    }

    /// `log(sum(exp(x)))` along `axis`, which is removed from the output shape.
    pub fn log_sum_exp(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        let (outer, len, inner) = axis_split("log_sum_exp", t.shape(), axis)?;
        if len == 0 {
            return Err(Error::Op {
                op: "log_sum_exp",
                msg: "empty axis".into(),
            });
        }
        let x = t.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let m = (0..len).map(|k| x[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = (0..len).map(|k| (x[idx(k)] - m).exp()).sum();
                out[o * inner + i] = m + s.ln();
            }
        }
        let out = Tensor::from_parts(without_axis(t.shape(), axis), out);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::LogSumExp(a, axis), rg))
    }

    /// Cosine of the angle between two equally shaped tensors, as a scalar.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("cosine_similarity", &[ta.shape(), tb.shape()]));
        }
        let (na, nb) = (norm(ta.data()), norm(tb.data()));
        if na == 0.0 || nb == 0.0 {
            return Err(Error::Op {
                op: "cosine_similarity",
                msg: "zero-norm input".into(),
            });
        }
        let c = (dot(ta.data(), tb.data()) / (na * nb)).clamp(-1.0, 1.0);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(c), Op::Cosine(a, b), rg))
    }

    /// Scales every row of a matrix to unit Euclidean norm.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(shape_err("normalize_rows", &[t.shape()]));
        }
        let mut out = Vec::with_capacity(t.numel());
        for r in 0..t.rows() {
            let row = t.row(r);
            let n = norm(row);
            if n == 0.0 {
                return Err(Error::Op {
                    op: "normalize_rows",
                    msg: format!("row {r} has zero norm"),
                });
            }
            out.extend(row.iter().map(|x| x / n));
        }
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::NormalizeRows(a), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(shape_err("transpose", &[t.shape()]));
        }
        let (m, n) = (t.shape()[0], t.shape()[1]);
        let d = t.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(vec![n, m], out), Op::Transpose(a), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(Error::Op {
                op: "concat",
                msg: "no inputs".into(),
            });
        };
        let base = self.shape(*first).to_vec();
        axis_split("concat", &base, axis)?;
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                let shapes: Vec<&[usize]> = parts.iter().map(|v| self.shape(*v)).collect();
                return Err(shape_err("concat", &shapes));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat(parts.to_vec(), axis),
            rg,
        ))
    }

    /// Mean along `axis`, which is removed from the output shape.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        let (outer, len, inner) = axis_split("mean", t.shape(), axis)?;
        if len == 0 {
            return Err(Error::Op {
                op: "mean",
                msg: "empty axis".into(),
            });
        }
        let x = t.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += x[(o * len + k) * inner + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= len as f64);
        let out = Tensor::from_parts(without_axis(t.shape(), axis), out);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Mean(a, axis), rg))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Gathers entries (rank 1) or rows (rank 2) by index; repeats allowed.
    pub fn index_select(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if t.rank() == 0 {
            return Err(shape_err("index_select", &[t.shape()]));
        }
        let n = t.shape()[0];
        let width: usize = t.shape()[1..].iter().product();
        let mut out = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            if i >= n {
                return Err(Error::Op {
                    op: "index_select",
                    msg: format!("index {i} out of range for {n} rows"),
                });
            }
            out.extend_from_slice(&t.data()[i * width..(i + 1) * width]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = indices.len();
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::IndexSelect(a, indices.to_vec()),
            rg,
        ))
    }

    /// Row `g` of the output is the mean of the input rows listed in `groups[g]`;
    /// an empty group yields a zero row.
    pub fn segment_mean(&mut self, a: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let t = self.value(a);
        if t.rank() == 0 {
            return Err(shape_err("segment_mean", &[t.shape()]));
        }
        let n = t.shape()[0];
        let width: usize = t.shape()[1..].iter().product();
        let mut out = vec![0.0; groups.len() * width];
        for (g, members) in groups.iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            let dst = &mut out[g * width..(g + 1) * width];
            for &i in members {
                if i >= n {
                    return Err(Error::Op {
                        op: "segment_mean",
                        msg: format!("index {i} out of range for {n} rows"),
                    });
                }
                for (d, s) in dst.iter_mut().zip(&t.data()[i * width..(i + 1) * width]) {
                    *d += s;
                }
            }
            let inv = 1.0 / members.len() as f64;
            dst.iter_mut().for_each(|v| *v *= inv);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = groups.len();
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::SegmentMean(a, groups.to_vec()),
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshaped(shape.to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Reverse sweep from a single-valued root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(Error::Op {
                op: "backward",
                msg: format!("root must be scalar, got shape {:?}", rv.shape()),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let (ad, bd) = (ta.data(), tb.data());
                acc(*a, &|da| {
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            da[i * k + p] += dot(gi, &bd[p * n..(p + 1) * n]);
                        }
                    }
                });
                acc(*b, &|db| {
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = ad[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for (d, gv) in db[p * n..(p + 1) * n].iter_mut().zip(gi) {
                                *d += aip * gv;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                acc(*a, &|da| da.iter_mut().zip(g).for_each(|(d, x)| *d += x));
                acc(*b, &|db| match bc {
                    Broadcast::None => db.iter_mut().zip(g).for_each(|(d, x)| *d += sign * x),
                    Broadcast::Rows => {
                        let n = db.len();
                        for (i, x) in g.iter().enumerate() {
                            db[i % n] += sign * x;
                        }
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &|da| {
                    for ((d, x), y) in da.iter_mut().zip(g).zip(bd) {
                        *d += x * y;
                    }
                });
                acc(*b, &|db| {
                    for ((d, x), y) in db.iter_mut().zip(g).zip(ad) {
                        *d += x * y;
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &|da| da.iter_mut().zip(g).for_each(|(d, x)| *d += s * x)),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                acc(*a, &|da| {
                    for ((d, gv), xv) in da.iter_mut().zip(g).zip(x) {
                        if *xv > 0.0 {
                            *d += gv;
                        }
                    }
                });
            }
            Op::Softmax(a, axis) => {
                let y = node.value.data();
                let (outer, len, inner) =
                    axis_split("softmax", node.value.shape(), *axis).expect("checked in forward");
                acc(*a, &|da| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |k: usize| (o * len + k) * inner + i;
                            let s: f64 = (0..len).map(|k| g[idx(k)] * y[idx(k)]).sum();
                            for k in 0..len {
                                da[idx(k)] += y[idx(k)] * (g[idx(k)] - s);
                            }
                        }
                    }
                });
            }
            Op::LogSumExp(a, axis) => {
                let x = self.value(*a);
                let out = node.value.data();
                let (outer, len, inner) =
                    axis_split("log_sum_exp", x.shape(), *axis).expect("checked in forward");
                let xd = x.data();
                acc(*a, &|da| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let r = o * inner + i;
                            for k in 0..len {
                                let j = (o * len + k) * inner + i;
                                da[j] += g[r] * (xd[j] - out[r]).exp();
                            }
                        }
                    }
                });
            }
            Op::Cosine(a, b) => {
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                let (na, nb) = (norm(xa), norm(xb));
                let c = dot(xa, xb) / (na * nb);
                let gs = g[0];
                acc(*a, &|da| {
                    for ((d, x), y) in da.iter_mut().zip(xa).zip(xb) {
                        *d += gs * (y / (na * nb) - c * x / (na * na));
                    }
                });
                acc(*b, &|db| {
                    for ((d, y), x) in db.iter_mut().zip(xb).zip(xa) {
                        *d += gs * (x / (na * nb) - c * y / (nb * nb));
                    }
                });
            }
            Op::NormalizeRows(a) => {
                let x = self.value(*a);
                let y = &node.value;
                acc(*a, &|da| {
                    let c = x.cols();
                    for r in 0..x.rows() {
                        let n = norm(x.row(r));
                        let yr = y.row(r);
                        let gr = &g[r * c..(r + 1) * c];
                        let proj = dot(yr, gr);
                        for j in 0..c {
                            da[r * c + j] += (gr[j] - yr[j] * proj) / n;
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let (m, n) = (s[0], s[1]);
                acc(*a, &|da| {
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Concat(parts, axis) => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let chunk = self.shape(*p)[*axis] * inner;
                    acc(*p, &|dp| {
                        for o in 0..outer {
                            let src = &g[o * row + offset..o * row + offset + chunk];
                            for (d, s) in dp[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Mean(a, axis) => {
                let (outer, len, inner) =
                    axis_split("mean", self.shape(*a), *axis).expect("checked in forward");
                acc(*a, &|da| {
                    for o in 0..outer {
                        for k in 0..len {
                            for i in 0..inner {
                                da[(o * len + k) * inner + i] += g[o * inner + i] / len as f64;
                            }
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &|da| da.iter_mut().for_each(|d| *d += g[0])),
            Op::IndexSelect(a, indices) => {
                let width: usize = self.shape(*a)[1..].iter().product();
                acc(*a, &|da| {
                    for (r, &i) in indices.iter().enumerate() {
                        for w in 0..width {
                            da[i * width + w] += g[r * width + w];
                        }
                    }
                });
            }
            Op::SegmentMean(a, groups) => {
                let width: usize = self.shape(*a)[1..].iter().product();
                acc(*a, &|da| {
                    for (r, members) in groups.iter().enumerate() {
                        if members.is_empty() {
                            continue;
                        }
                        let inv = 1.0 / members.len() as f64;
                        for &i in members {
                            for w in 0..width {
                                da[i * width + w] += g[r * width + w] * inv;
                            }
                        }
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &|da| da.iter_mut().zip(g).for_each(|(d, x)| *d += x)),
        }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`; zeros when `v` was not reached.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        let shape = tape.shape(v).to_vec();
        match &self.grads[v.0] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }

    /// Gradients of every parameter bound on `tape`, summed when a parameter
    /// was bound more than once.
    pub fn params(&self, tape: &Tape) -> ParamGrads {
        let mut out = ParamGrads::new();
        for &(id, v) in &tape.params {
            let g = self.wrt(tape, v);
            let merged = match out.get(id) {
                Some(prev) => Tensor::from_parts(
                    g.shape().to_vec(),
                    prev.data().iter().zip(g.data()).map(|(a, b)| a + b).collect(),
                ),
                None => g,
            };
            out.insert(id, merged);
        }
        out
    }
}
