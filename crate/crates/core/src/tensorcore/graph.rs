use std::collections::BTreeMap;
use std::rc::Rc;

use super::kernels::{
    broadcast_strides, for_each_offset, gemm_acc, permuted_strides, softmax_axis,
};
use super::tensor::{split_axis, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    LeakyRelu(f64),
    Exp,
    Sqrt,
    Neg,
}

impl Unary {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Unary::Sigmoid => {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            }
            Unary::Tanh => x.tanh(),
            Unary::LeakyRelu(slope) => {
                if x >= 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Unary::Exp => x.exp(),
            Unary::Sqrt => x.sqrt(),
            Unary::Neg => -x,
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    fn deriv(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
            Unary::LeakyRelu(slope) => {
                if x >= 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Unary::Exp => y,
            Unary::Sqrt => {
                if y > 0.0 {
                    0.5 / y
                } else {
                    0.0
                }
            }
            Unary::Neg => -1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    L2Norm,
}

/// Vectors shorter than this are treated as having no direction.
pub const ZERO_NORM: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Var, Unary),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Broadcast(Var),
    Reduce(Var, Reduce, usize),
    Softmax { x: Var, axis: usize },
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    Gather { x: Var, rows: Vec<usize> },
    UnitVectors(Var),
    VnRelu(Var, Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    name: Option<String>,
}

/// Tape of recorded operations. Nodes are appended in evaluation order, so
/// reverse insertion order is a valid topological order for backward.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    names: BTreeMap<String, usize>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for a named leaf, if it received any.
    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names.get(name).and_then(|&i| self.grads[i].as_ref())
    }

    /// All named leaf gradients; leaves that were never reached get zeros.
    pub fn named(&self, g: &Graph) -> BTreeMap<String, Tensor> {
        self.names
            .iter()
            .map(|(n, &i)| {
                let grad = self.grads[i]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(g.nodes[i].value.shape()));
                (n.clone(), grad)
            })
            .collect()
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn check_axis(op: &'static str, axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        return Err(Error::Axis { op, axis, rank });
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
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

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            name: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Trainable leaf whose gradient is reported under `name`.
    pub fn param(&mut self, name: &str, value: Tensor) -> Var {
        let v = self.leaf(value, true);
        self.nodes[v.0].name = Some(name.to_string());
        v
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(op, ta, tb)?;
        ta.zip_map(tb, f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Add(a, b), out, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Sub(a, b), out, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Mul(a, b), out, rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("div", a, b, |x, y| x / y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Div(a, b), out, rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).scale(factor);
        let rg = self.rg(&[a]);
        self.push(Op::Scale(a, factor), out, rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push(Op::AddScalar(a), out, rg)
    }

    pub fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        let x = self.value(a);
        if !x.is_finite() {
            return Err(Error::NonFinite { op: "apply_unary" });
        }
        let out = x.map(|v| kind.eval(v));
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Unary(a, kind), out, rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Tanh, a)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.unary(Unary::LeakyRelu(slope), a)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` for rank-2 operands or rank-3 operands sharing a
    /// leading batch extent; `ta`/`tb` transpose the trailing two axes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let dims = matmul_dims(av.shape(), bv.shape(), ta, tb)?;
        let (batch, m, k, n) = dims;
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            gemm_acc(
                &av.data()[bi * m * k..(bi + 1) * m * k],
                ta,
                &bv.data()[bi * k * n..(bi + 1) * k * n],
                tb,
                m,
                k,
                n,
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        let shape = if av.rank() == 3 {
            vec![batch, m, n]
        } else {
            vec![m, n]
        };
        let out = Tensor::new(shape, out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::MatMul { a, b, ta, tb }, out, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Reshape(a), out, rg))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let rank = x.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&ax| ax >= rank || std::mem::replace(&mut seen[ax], true)) {
            return Err(Error::Input(format!("permute: invalid axes {axes:?} for rank {rank}")));
        }
        let shape: Vec<usize> = axes.iter().map(|&ax| x.shape()[ax]).collect();
        let st = permuted_strides(x.shape(), axes);
        let src = x.data();
        let mut out = vec![0.0; src.len()];
        for_each_offset(&shape, &st, |lin, off| out[lin] = src[off]);
        let out = Tensor::new(shape, out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Permute(a, axes.to_vec()), out, rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let rank = self.value(a).rank();
        if rank < 2 {
            return Err(Error::Axis {
                op: "transpose",
                axis: 1,
                rank,
            });
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(a, &axes)
    }

    /// Right-aligned broadcast; source extents must be 1 or match.
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let ok = x.rank() <= shape.len()
            && x
                .shape()
                .iter()
                .rev()
                .zip(shape.iter().rev())
                .all(|(&s, &d)| s == 1 || s == d);
        if !ok {
            return Err(Error::Shape {
                op: "broadcast_to",
                lhs: x.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let st = broadcast_strides(x.shape(), shape);
        let src = x.data();
        let mut out = vec![0.0; shape.iter().product()];
        for_each_offset(shape, &st, |lin, off| out[lin] = src[off]);
        let out = Tensor::new(shape.to_vec(), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Broadcast(a), out, rg))
    }

    pub fn reduce(&mut self, kind: Reduce, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        check_axis("reduce", axis, x.rank())?;
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let src = x.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let row = &src[(o * n + j) * inner..(o * n + j + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                match kind {
                    Reduce::Sum | Reduce::Mean => dst.iter_mut().zip(row).for_each(|(d, v)| *d += v),
                    Reduce::L2Norm => dst.iter_mut().zip(row).for_each(|(d, v)| *d += v * v),
                }
            }
        }
        match kind {
            Reduce::Sum => {}
            Reduce::Mean => out.iter_mut().for_each(|d| *d /= n as f64),
            Reduce::L2Norm => out.iter_mut().for_each(|d| *d = d.sqrt()),
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        let out = Tensor::new(shape, out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Reduce(a, kind, axis), out, rg))
    }

    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(Reduce::Sum, a, axis)
    }

    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(Reduce::Mean, a, axis)
    }

    pub fn l2norm(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(Reduce::L2Norm, a, axis)
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        let flat = self.reshape(a, &[n])?;
        self.sum(flat, 0)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.softmax_masked(a, axis, None)
    }

    /// Softmax along `axis` restricted to entries where `mask` is true;
    /// masked-out entries are exactly zero.
    pub fn softmax_masked(&mut self, a: Var, axis: usize, mask: Option<Rc<[bool]>>) -> Result<Var> {
        let x = self.value(a);
        check_axis("softmax", axis, x.rank())?;
        if let Some(m) = &mask {
            if m.len() != x.len() {
                return Err(Error::Length {
                    len: m.len(),
                    shape: x.shape().to_vec(),
                });
            }
        }
        if !x.is_finite() {
            return Err(Error::NonFinite { op: "softmax" });
        }
        let out = softmax_axis(x.data(), x.shape(), axis, mask.as_deref());
        let out = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Softmax { x: a, axis }, out, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Input("concat of zero tensors".into()))?;
        let base = self.value(*first).shape().to_vec();
        check_axis("concat", axis, base.len())?;
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let x = self.value(p);
                let chunk = x.shape()[axis] * inner;
                out.extend_from_slice(&x.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::new(shape, out)?;
        let rg = self.rg(parts);
        Ok(self.push(Op::Concat(parts.to_vec(), axis), out, rg))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        check_axis("slice", axis, x.rank())?;
        if start + len > x.shape()[axis] {
            return Err(Error::Input(format!(
                "slice [{start}, {}) out of range for extent {}",
                start + len,
                x.shape()[axis]
            )));
        }
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * n + start) * inner;
            out.extend_from_slice(&x.data()[from..from + len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        let out = Tensor::new(shape, out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Slice { x: a, axis, start }, out, rg))
    }

    /// Selects rows along axis 0; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if x.rank() == 0 {
            return Err(Error::Axis {
                op: "gather_rows",
                axis: 0,
                rank: 0,
            });
        }
        let n = x.shape()[0];
        let row = x.len() / n.max(1);
        let mut out = Vec::with_capacity(rows.len() * row);
        for &r in rows {
            if r >= n {
                return Err(Error::Input(format!("gather_rows: row {r} out of range for {n}")));
            }
            out.extend_from_slice(&x.data()[r * row..(r + 1) * row]);
        }
        let mut shape = x.shape().to_vec();
        shape[0] = rows.len();
        let out = Tensor::new(shape, out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Gather { x: a, rows: rows.to_vec() }, out, rg))
    }

    /// Normalizes each vector along the last axis; vectors with norm below
    /// [`ZERO_NORM`] map to zero.
    pub fn unit_vectors(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let d = *x.shape().last().ok_or(Error::Axis {
            op: "unit_vectors",
            axis: 0,
            rank: 0,
        })?;
        let mut out = x.data().to_vec();
        for v in out.chunks_mut(d) {
            let n = v.iter().map(|c| c * c).sum::<f64>().sqrt();
            if n < ZERO_NORM {
                v.iter_mut().for_each(|c| *c = 0.0);
            } else {
                v.iter_mut().for_each(|c| *c /= n);
            }
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::UnitVectors(a), out, rg))
    }

    /// Vector-neuron ReLU on paired vectors along the last axis: keeps `q`
    /// when `<q,k> >= 0`, otherwise removes the component of `q` along `k`.
    pub fn vn_relu_project(&mut self, q: Var, k: Var) -> Result<Var> {
        let (qv, kv) = (self.value(q), self.value(k));
        same_shape("vn_relu", qv, kv)?;
        let d = *qv.shape().last().ok_or(Error::Axis {
            op: "vn_relu",
            axis: 0,
            rank: 0,
        })?;
        let mut out = qv.data().to_vec();
        for (o, kk) in out.chunks_mut(d).zip(kv.data().chunks(d)) {
            if let Some(coef) = relu_coef(o, kk) {
                o.iter_mut().zip(kk).for_each(|(x, kc)| *x -= coef * kc);
            }
        }
        let out = Tensor::new(qv.shape().to_vec(), out)?;
        let rg = self.rg(&[q, k]);
        Ok(self.push(Op::VnRelu(q, k), out, rg))
    }

    /// Reverse-mode sweep from `output`, seeded with `seed`.
    pub fn backward(&self, output: Var, seed: &Tensor) -> Result<Gradients> {
        if seed.shape() != self.shape(output) {
            return Err(Error::Shape {
                op: "backward",
                lhs: self.shape(output).to_vec(),
                rhs: seed.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed.clone());
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &node.value, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let names = self
            .nodes
            .iter()
            .enumerate()
            .take(output.0 + 1)
            .filter_map(|(i, n)| n.name.clone().map(|name| (name, i)))
            .collect();
        Ok(Gradients { grads, names })
    }

    /// Backward from a rank-0 (or single element) output with seed 1.
    pub fn backward_scalar(&self, output: Var) -> Result<Gradients> {
        let seed = Tensor::full(self.shape(output), 1.0);
        self.backward(output, &seed)
    }

    fn propagate(&self, node: &Node, y: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, delta: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing
                    .data_mut()
                    .iter_mut()
                    .zip(delta.data())
                    .for_each(|(e, d)| *e += d),
                slot => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(val(*b), |gi, bi| gi * bi)?);
                acc(*b, g.zip_map(val(*a), |gi, ai| gi * ai)?);
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                acc(*a, g.zip_map(bv, |gi, bi| gi / bi)?);
                let gb = g.zip_map(y, |gi, yi| gi * yi)?.zip_map(bv, |t, bi| -t / bi)?;
                acc(*b, gb);
            }
            Op::Scale(a, f) => acc(*a, g.scale(*f)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Unary(a, kind) => {
                let x = val(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(x.data().iter().zip(y.data()))
                    .map(|(gi, (&xi, &yi))| gi * kind.deriv(xi, yi))
                    .collect();
                acc(*a, Tensor::new(x.shape().to_vec(), data)?);
            }
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (val(*a), val(*b));
                let (batch, m, k, n) = matmul_dims(av.shape(), bv.shape(), *ta, *tb)?;
                let mut ga = vec![0.0; av.len()];
                let mut gb = vec![0.0; bv.len()];
                for bi in 0..batch {
                    let gs = &g.data()[bi * m * n..(bi + 1) * m * n];
                    let asl = &av.data()[bi * m * k..(bi + 1) * m * k];
                    let bsl = &bv.data()[bi * k * n..(bi + 1) * k * n];
                    let gas = &mut ga[bi * m * k..(bi + 1) * m * k];
                    if *ta {
                        // a stored k×m: dA = op(B)·dCᵀ
                        gemm_acc(bsl, *tb, gs, true, k, n, m, gas);
                    } else {
                        gemm_acc(gs, false, bsl, !*tb, m, n, k, gas);
                    }
                    let gbs = &mut gb[bi * k * n..(bi + 1) * k * n];
                    if *tb {
                        // b stored n×k: dB = dCᵀ·op(A)
                        gemm_acc(gs, true, asl, *ta, n, m, k, gbs);
                    } else {
                        gemm_acc(asl, !*ta, gs, false, k, m, n, gbs);
                    }
                }
                acc(*a, Tensor::new(av.shape().to_vec(), ga)?);
                acc(*b, Tensor::new(bv.shape().to_vec(), gb)?);
            }
            Op::Reshape(a) => acc(*a, g.clone().reshape(val(*a).shape())?),
            Op::Permute(a, axes) => {
                let src_shape = val(*a).shape();
                let st = permuted_strides(src_shape, axes);
                let mut out = vec![0.0; g.len()];
                for_each_offset(y.shape(), &st, |lin, off| out[off] = g.data()[lin]);
                acc(*a, Tensor::new(src_shape.to_vec(), out)?);
            }
            Op::Broadcast(a) => {
                let src_shape = val(*a).shape();
                let st = broadcast_strides(src_shape, y.shape());
                let mut out = vec![0.0; val(*a).len()];
                for_each_offset(y.shape(), &st, |lin, off| out[off] += g.data()[lin]);
                acc(*a, Tensor::new(src_shape.to_vec(), out)?);
            }
            Op::Reduce(a, kind, axis) => {
                let x = val(*a);
                let (outer, n, inner) = split_axis(x.shape(), *axis);
                let mut out = vec![0.0; x.len()];
                for o in 0..outer {
                    for j in 0..n {
                        for i in 0..inner {
                            let src = (o * n + j) * inner + i;
                            let dst = o * inner + i;
                            out[src] = match kind {
                                Reduce::Sum => g.data()[dst],
                                Reduce::Mean => g.data()[dst] / n as f64,
                                Reduce::L2Norm => {
                                    let norm = y.data()[dst];
                                    if norm > 0.0 {
                                        g.data()[dst] * x.data()[src] / norm
                                    } else {
                                        0.0
                                    }
                                }
                            };
                        }
                    }
                }
                acc(*a, Tensor::new(x.shape().to_vec(), out)?);
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = split_axis(y.shape(), *axis);
                let mut out = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * n * inner + j * inner + i;
                        let dot: f64 = (0..n).map(|j| y.data()[at(j)] * g.data()[at(j)]).sum();
                        for j in 0..n {
                            out[at(j)] = y.data()[at(j)] * (g.data()[at(j)] - dot);
                        }
                    }
                }
                acc(*x, Tensor::new(y.shape().to_vec(), out)?);
            }
            Op::Concat(parts, axis) => {
                let (outer, _, inner) = split_axis(y.shape(), *axis);
                let mut offset = 0;
                let total = y.shape()[*axis] * inner;
                for &p in parts {
                    let shape = val(p).shape().to_vec();
                    let chunk = shape[*axis] * inner;
                    let mut out = Vec::with_capacity(outer * chunk);
                    for o in 0..outer {
                        let from = o * total + offset;
                        out.extend_from_slice(&g.data()[from..from + chunk]);
                    }
                    offset += chunk;
                    acc(p, Tensor::new(shape, out)?);
                }
            }
            Op::Slice { x, axis, start } => {
                let shape = val(*x).shape().to_vec();
                let (outer, n, inner) = split_axis(&shape, *axis);
                let len = y.shape()[*axis];
                let mut out = vec![0.0; val(*x).len()];
                for o in 0..outer {
                    let to = (o * n + start) * inner;
                    out[to..to + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                acc(*x, Tensor::new(shape, out)?);
            }
            Op::Gather { x, rows } => {
                let shape = val(*x).shape().to_vec();
                let row = val(*x).len() / shape[0].max(1);
                let mut out = vec![0.0; val(*x).len()];
                for (k, &r) in rows.iter().enumerate() {
                    out[r * row..(r + 1) * row]
                        .iter_mut()
                        .zip(&g.data()[k * row..(k + 1) * row])
                        .for_each(|(o, gi)| *o += gi);
                }
                acc(*x, Tensor::new(shape, out)?);
            }
            Op::UnitVectors(a) => {
                let x = val(*a);
                let d = *x.shape().last().expect("rank checked at construction");
                let mut out = vec![0.0; x.len()];
                for ((o, xs), (us, gs)) in out
                    .chunks_mut(d)
                    .zip(x.data().chunks(d))
                    .zip(y.data().chunks(d).zip(g.data().chunks(d)))
                {
                    let n = xs.iter().map(|c| c * c).sum::<f64>().sqrt();
                    if n < ZERO_NORM {
                        continue;
                    }
                    let ug: f64 = us.iter().zip(gs).map(|(u, gi)| u * gi).sum();
                    for ((oc, uc), gc) in o.iter_mut().zip(us).zip(gs) {
                        *oc = (gc - uc * ug) / n;
                    }
                }
                acc(*a, Tensor::new(x.shape().to_vec(), out)?);
            }
            Op::VnRelu(q, k) => {
                let (qv, kv) = (val(*q), val(*k));
                let d = *qv.shape().last().expect("rank checked at construction");
                let mut gq = g.data().to_vec();
                let mut gk = vec![0.0; kv.len()];
                for (((gqs, gks), (qs, ks)), gs) in gq
                    .chunks_mut(d)
                    .zip(gk.chunks_mut(d))
                    .zip(qv.data().chunks(d).zip(kv.data().chunks(d)))
                    .zip(g.data().chunks(d))
                {
                    if relu_coef(qs, ks).is_none() {
                        continue;
                    }
                    let kk: f64 = ks.iter().map(|c| c * c).sum();
                    let dot: f64 = qs.iter().zip(ks).map(|(a, b)| a * b).sum();
                    let s = dot / kk;
                    let kg: f64 = ks.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        gqs[j] = gs[j] - ks[j] * kg / kk;
                        gks[j] = -s * gs[j] - kg * (qs[j] / kk - 2.0 * dot * ks[j] / (kk * kk));
                    }
                }
                acc(*q, Tensor::new(qv.shape().to_vec(), gq)?);
                acc(*k, Tensor::new(kv.shape().to_vec(), gk)?);
            }
        }
        Ok(())
    }
}

/// Projection coefficient `<q,k>/<k,k>` when the VN-ReLU removes the
/// component along `k`; `None` when `q` passes through unchanged.
fn relu_coef(q: &[f64], k: &[f64]) -> Option<f64> {
    let dot: f64 = q.iter().zip(k).map(|(a, b)| a * b).sum();
    let kk: f64 = k.iter().map(|c| c * c).sum();
    if dot >= 0.0 || kk.sqrt() < ZERO_NORM {
        None
    } else {
        Some(dot / kk)
    }
}

fn matmul_dims(a: &[usize], b: &[usize], ta: bool, tb: bool) -> Result<(usize, usize, usize, usize)> {
    let err = || Error::Shape {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    let (batch, a2, b2) = match (a.len(), b.len()) {
        (2, 2) => (1, &a[..], &b[..]),
        (3, 3) if a[0] == b[0] => (a[0], &a[1..], &b[1..]),
        _ => return Err(err()),
    };
    let (m, ka) = if ta { (a2[1], a2[0]) } else { (a2[0], a2[1]) };
    let (kb, n) = if tb { (b2[1], b2[0]) } else { (b2[0], b2[1]) };
    if ka != kb {
        return Err(err());
    }
    Ok((batch, m, ka, n))
}
