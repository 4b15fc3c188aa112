//! Append-only computation graph with reverse-mode differentiation.
//!
//! Nodes are pushed in evaluation order, so a node's parents always have
//! smaller indices and the insertion order is already topological. A graph
//! lives for one training step and is dropped after [`Graph::backward`].

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::sum::ExactSum;
use super::tensor::{broadcast_index, broadcast_shape, matmul_dims, mm_nn, mm_nt, mm_tn, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    BatchMatMulExact(Var, Var),
    TransposeLast(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Softplus(Var),
    Sigmoid(Var),
    Exp(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Concat(Vec<Var>),
    SliceLast { x: Var, start: usize },
    Reshape(Var),
    SumLast(Var),
    MeanRows(Var),
    CumsumExclusive(Var),
    Mean(Var),
    Sum(Var),
    SumSq(Var, Option<Var>),
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul(..) => "bmm",
            Op::BatchMatMulExact(..) => "bmm_exact",
            Op::TransposeLast(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Relu(_) => "relu",
            Op::Softplus(_) => "softplus",
            Op::Sigmoid(_) => "sigmoid",
            Op::Exp(_) => "exp",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Concat(_) => "concat",
            Op::SliceLast { .. } => "slice",
            Op::Reshape(_) => "reshape",
            Op::SumLast(_) => "sum_last",
            Op::MeanRows(_) => "mean_rows",
            Op::CumsumExclusive(_) => "cumsum_exclusive",
            Op::Mean(_) => "mean",
            Op::Sum(_) => "sum",
            Op::SumSq(..) => "sum_sq",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Result of a backward pass: one optional gradient per node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    /// Gradient with respect to `v`; zero if `v` does not reach the root.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }

    /// One gradient per parameter in `store`, zero for parameters that were
    /// never bound or not reached.
    pub fn for_params(&self, store: &ParamStore) -> Vec<Tensor> {
        store
            .ids()
            .map(|id| match self.params.get(&id) {
                Some(&v) => self.wrt(v),
                None => Tensor::zeros(store.get(id).shape().to_vec()),
            })
            .collect()
    }
}

fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

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

    pub fn op_tag(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.tag()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input that is not a stored parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    /// Inputs that never need a gradient go through the same path.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value)
    }

    /// Binds a stored parameter; repeated binds return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).clone());
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = matmul_dims(self.shape(a), self.shape(b))?;
        let data = mm_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new([m, n], data)?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    /// `[B, m, k] × [B, k, n] → [B, m, n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.batch_matmul_impl(a, b, false)
    }

    /// As [`Graph::batch_matmul`], but each inner product visits `k` in an
    /// order fixed by the values involved, so the result is invariant to
    /// reordering along `k`.
    pub fn batch_matmul_exact(&mut self, a: Var, b: Var) -> Result<Var> {
        self.batch_matmul_impl(a, b, true)
    }

    fn batch_matmul_impl(&mut self, a: Var, b: Var, exact: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (bs, m, k, n) = match (sa, sb) {
            ([b1, m, k], [b2, k2, n]) if b1 == b2 && k == k2 => (*b1, *m, *k, *n),
            _ => return Err(Error::shape("batch_matmul", sa, sb)),
        };
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(bs * m * n);
        let mut order: Vec<usize> = (0..k).collect();
        for i in 0..bs {
            let (ab, bb) = (&av[i * m * k..(i + 1) * m * k], &bv[i * k * n..(i + 1) * k * n]);
            if exact {
                for r in 0..m {
                    let arow = &ab[r * k..(r + 1) * k];
                    canonical_order(&mut order, arow, bb, n);
                    for c in 0..n {
                        data.push(order.iter().map(|&p| arow[p] * bb[p * n + c]).sum());
                    }
                }
            } else {
                data.extend(mm_nn(ab, bb, m, k, n));
            }
        }
        let value = Tensor::new([bs, m, n], data)?;
        let op = if exact {
            Op::BatchMatMulExact(a, b)
        } else {
            Op::BatchMatMul(a, b)
        };
        Ok(self.push(op, value))
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let value = transpose_last_value(self.value(x)).ok_or_else(|| Error::shape("transpose_last", &shape, &[]))?;
        Ok(self.push(Op::TransposeLast(x), value))
    }

    fn broadcast_binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out = broadcast_shape(sa, sb).ok_or_else(|| Error::shape(name, sa, sb))?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let data = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else if sa == out.as_slice() && tiles(sb, &out) {
            va.chunks(vb.len())
                .flat_map(|ch| ch.iter().zip(vb).map(|(&x, &y)| f(x, y)))
                .collect()
        } else if sb == out.as_slice() && tiles(sa, &out) {
            vb.chunks(va.len())
                .flat_map(|ch| va.iter().zip(ch).map(|(&x, &y)| f(x, y)))
                .collect()
        } else {
            let ia = broadcast_index(sa, &out);
            let ib = broadcast_index(sb, &out);
            ia.iter().zip(&ib).map(|(&i, &j)| f(va[i], vb[j])).collect()
        };
        Tensor::new(out, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), value))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), value))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push(Op::Scale(x, c), value)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v + c);
        self.push(Op::AddScalar(x), value)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(Op::Relu(x), value)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let value = self.value(x).map(stable_softplus);
        self.push(Op::Softplus(x), value)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(stable_sigmoid);
        self.push(Op::Sigmoid(x), value)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::exp);
        self.push(Op::Exp(x), value)
    }

    /// Shift-invariant softmax along `axis`. The normalizer is summed exactly,
    /// so outputs do not depend on element order.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::invalid(format!(
                "softmax axis {axis} out of range for shape {:?}",
                t.shape()
            )));
        }
        if !t.is_finite() {
            return Err(Error::NonFinite("softmax"));
        }
        let value = softmax_value(t, axis);
        Ok(self.push(Op::Softmax { x, axis }, value))
    }

    /// Normalizes each slice along the last axis to zero mean and unit
    /// variance (no affine terms).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let d = *t.shape().last().ok_or_else(|| Error::shape("layer_norm", &[], &[]))?;
        let rows = t.len() / d.max(1);
        let mut out = vec![0.0; t.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &t.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push(Op::LayerNorm { x, inv_std }, value))
    }

    /// Concatenates along the last axis; all leading axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let lead = self
            .shape(*first)
            .split_last()
            .map(|(_, l)| l.to_vec())
            .unwrap_or_default();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            match s.split_last() {
                Some((w, l)) if l == lead.as_slice() => widths.push(*w),
                _ => return Err(Error::shape("concat", self.shape(*first), s)),
            }
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(Op::Concat(parts.to_vec()), value))
    }

    /// `x[..., start..end]`.
    pub fn slice_last(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let w = *s.last().unwrap_or(&0);
        if start >= end || end > w {
            return Err(Error::invalid(format!(
                "slice {start}..{end} out of range for shape {s:?}"
            )));
        }
        let rows = self.value(x).len() / w;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&src[r * w + start..r * w + end]);
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = end - start;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(Op::SliceLast { x, start }, value))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape.to_vec())?;
        Ok(self.push(Op::Reshape(x), value))
    }

    /// Sums over the last axis, keeping it with extent 1.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let w = *s.last().ok_or_else(|| Error::shape("sum_last", &s, &[]))?;
        let data = self.value(x).data().chunks(w).map(|c| c.iter().sum()).collect();
        let mut shape = s;
        *shape.last_mut().unwrap() = 1;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(Op::SumLast(x), value))
    }

    /// Column means of a matrix: `[n, d] → [1, d]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (n, d) = match s.as_slice() {
            [n, d] if *n > 0 => (*n, *d),
            _ => return Err(Error::shape("mean_rows", &s, &[])),
        };
        let mut data = vec![0.0; d];
        for row in self.value(x).data().chunks(d) {
            for (o, v) in data.iter_mut().zip(row) {
                *o += v;
            }
        }
        data.iter_mut().for_each(|v| *v /= n as f64);
        let value = Tensor::new([1, d], data)?;
        Ok(self.push(Op::MeanRows(x), value))
    }

    /// `y[..., i] = Σ_{j<i} x[..., j]`.
    pub fn cumsum_exclusive(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let w = *s.last().ok_or_else(|| Error::shape("cumsum_exclusive", &s, &[]))?;
        let mut data = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).data().chunks(w) {
            let mut acc = 0.0;
            for v in row {
                data.push(acc);
                acc += v;
            }
        }
        let value = Tensor::new(s, data)?;
        Ok(self.push(Op::CumsumExclusive(x), value))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64);
        self.push(Op::Mean(x), value)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(Op::Sum(x), value)
    }

    /// `Σ (x − y)²`, or `Σ x²` without `y`.
    pub fn sum_sq(&mut self, x: Var, y: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let s = match y {
            Some(y) => {
                let yv = self.value(y);
                if xv.shape() != yv.shape() {
                    return Err(Error::shape("sum_sq", xv.shape(), yv.shape()));
                }
                xv.data().iter().zip(yv.data()).map(|(a, b)| (a - b) * (a - b)).sum()
            }
            None => xv.data().iter().map(|a| a * a).sum(),
        };
        Ok(self.push(Op::SumSq(x, y), Tensor::scalar(s)))
    }

    /// Reverse-mode sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::invalid(format!(
                "backward root must be scalar, got shape {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(rv.shape().to_vec(), 1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params: self.params.clone(),
        })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut acc = |v: Var, t: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        let like = |v: Var, data: Vec<f64>| Tensor::new(self.shape(v).to_vec(), data).expect("gradient shape");
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                acc(*a, like(*a, mm_nt(gd, self.value(*b).data(), m, n, k)));
                acc(*b, like(*b, mm_tn(self.value(*a).data(), gd, k, m, n)));
            }
            Op::BatchMatMul(a, b) | Op::BatchMatMulExact(a, b) => {
                let (bs, m, k) = (self.shape(*a)[0], self.shape(*a)[1], self.shape(*a)[2]);
                let n = self.shape(*b)[2];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let mut ga = Vec::with_capacity(bs * m * k);
                let mut gb = Vec::with_capacity(bs * k * n);
                for s in 0..bs {
                    let gs = &gd[s * m * n..(s + 1) * m * n];
                    ga.extend(mm_nt(gs, &bv[s * k * n..(s + 1) * k * n], m, n, k));
                    gb.extend(mm_tn(&av[s * m * k..(s + 1) * m * k], gs, k, m, n));
                }
                acc(*a, like(*a, ga));
                acc(*b, like(*b, gb));
            }
            Op::TransposeLast(x) => {
                acc(*x, transpose_last_value(g).expect("transpose grad"));
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                acc(*a, reduce_to(g, self.shape(*a), 1.0));
                acc(*b, reduce_to(g, self.shape(*b), sign));
            }
            Op::Mul(a, b) if self.shape(*a) == self.shape(*b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, like(*a, gd.iter().zip(vb).map(|(g, y)| g * y).collect()));
                acc(*b, like(*b, gd.iter().zip(va).map(|(g, x)| g * x).collect()));
            }
            Op::Mul(a, b) => {
                let os = out.shape();
                let ia = broadcast_index(self.shape(*a), os);
                let ib = broadcast_index(self.shape(*b), os);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let mut ga = vec![0.0; va.len()];
                let mut gb = vec![0.0; vb.len()];
                for (k, (&p, &q)) in ia.iter().zip(&ib).enumerate() {
                    ga[p] += gd[k] * vb[q];
                    gb[q] += gd[k] * va[p];
                }
                acc(*a, like(*a, ga));
                acc(*b, like(*b, gb));
            }
            Op::Scale(x, c) => acc(*x, g.map(|v| v * c)),
            Op::AddScalar(x) | Op::Reshape(x) => acc(*x, like(*x, gd.to_vec())),
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                acc(
                    *x,
                    like(
                        *x,
                        gd.iter()
                            .zip(xv)
                            .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                            .collect(),
                    ),
                );
            }
            Op::Softplus(x) => {
                let xv = self.value(*x).data();
                acc(
                    *x,
                    like(*x, gd.iter().zip(xv).map(|(g, &x)| g * stable_sigmoid(x)).collect()),
                );
            }
            Op::Sigmoid(x) => {
                let od = out.data();
                acc(
                    *x,
                    like(*x, gd.iter().zip(od).map(|(g, s)| g * s * (1.0 - s)).collect()),
                );
            }
            Op::Exp(x) => {
                let od = out.data();
                acc(*x, like(*x, gd.iter().zip(od).map(|(g, e)| g * e).collect()));
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(out.shape(), *axis);
                let y = out.data();
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for inn in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + inn;
                        let dot: f64 = (0..len).map(|j| gd[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            gx[at(j)] = y[at(j)] * (gd[at(j)] - dot);
                        }
                    }
                }
                acc(*x, like(*x, gx));
            }
            Op::LayerNorm { x, inv_std } => {
                let d = *out.shape().last().unwrap();
                let y = out.data();
                let mut gx = vec![0.0; y.len()];
                for (r, is) in inv_std.iter().enumerate() {
                    let span = r * d..(r + 1) * d;
                    let (gr, yr) = (&gd[span.clone()], &y[span.clone()]);
                    let gm = gr.iter().sum::<f64>() / d as f64;
                    let gym = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for ((o, gv), yv) in gx[span].iter_mut().zip(gr).zip(yr) {
                        *o = is * (gv - gm - yv * gym);
                    }
                }
                acc(*x, like(*x, gx));
            }
            Op::Concat(parts) => {
                let widths: Vec<usize> = parts.iter().map(|p| *self.shape(*p).last().unwrap()).collect();
                let total: usize = widths.iter().sum();
                let rows = gd.len() / total;
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    let mut part = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        part.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                    }
                    acc(p, like(p, part));
                    offset += w;
                }
            }
            Op::SliceLast { x, start } => {
                let w_in = *self.shape(*x).last().unwrap();
                let w_out = *out.shape().last().unwrap();
                let mut gx = vec![0.0; self.value(*x).len()];
                for (r, chunk) in gd.chunks(w_out).enumerate() {
                    gx[r * w_in + start..r * w_in + start + w_out].copy_from_slice(chunk);
                }
                acc(*x, like(*x, gx));
            }
            Op::SumLast(x) => {
                let w = *self.shape(*x).last().unwrap();
                let gx = gd.iter().flat_map(|&v| std::iter::repeat_n(v, w)).collect();
                acc(*x, like(*x, gx));
            }
            Op::MeanRows(x) => {
                let n = self.shape(*x)[0];
                let gx = (0..n).flat_map(|_| gd.iter().map(move |v| v / n as f64)).collect();
                acc(*x, like(*x, gx));
            }
            Op::CumsumExclusive(x) => {
                let w = *self.shape(*x).last().unwrap();
                let mut gx = Vec::with_capacity(gd.len());
                for row in gd.chunks(w) {
                    let mut tail = vec![0.0; w];
                    let mut accum = 0.0;
                    for j in (0..w).rev() {
                        tail[j] = accum;
                        accum += row[j];
                    }
                    gx.extend(tail);
                }
                acc(*x, like(*x, gx));
            }
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                acc(*x, Tensor::full(self.shape(*x).to_vec(), gd[0] / n));
            }
            Op::Sum(x) => acc(*x, Tensor::full(self.shape(*x).to_vec(), gd[0])),
            Op::SumSq(x, y) => {
                let xv = self.value(*x).data();
                match y {
                    Some(y) => {
                        let yv = self.value(*y).data();
                        let diff: Vec<f64> = xv.iter().zip(yv).map(|(a, b)| 2.0 * gd[0] * (a - b)).collect();
                        acc(*y, like(*y, diff.iter().map(|v| -v).collect()));
                        acc(*x, like(*x, diff));
                    }
                    None => acc(*x, like(*x, xv.iter().map(|a| 2.0 * gd[0] * a).collect())),
                }
            }
        }
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_value(t: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = axis_split(t.shape(), axis);
    let x = t.data();
    let mut y = vec![0.0; x.len()];
    let mut acc = ExactSum::new();
    for o in 0..outer {
        for inn in 0..inner {
            let at = |j: usize| (o * len + j) * inner + inn;
            let max = (0..len).map(|j| x[at(j)]).fold(f64::NEG_INFINITY, f64::max);
            acc.clear();
            for j in 0..len {
                let e = (x[at(j)] - max).exp();
                y[at(j)] = e;
                acc.add(e);
            }
            let total = acc.value();
            for j in 0..len {
                y[at(j)] /= total;
            }
        }
    }
    Tensor::new(t.shape().to_vec(), y).expect("softmax shape")
}

fn transpose_last_value(t: &Tensor) -> Option<Tensor> {
    let (bs, r, c) = match t.shape() {
        [r, c] => (1, *r, *c),
        [b, r, c] => (*b, *r, *c),
        _ => return None,
    };
    let src = t.data();
    let mut out = vec![0.0; src.len()];
    for b in 0..bs {
        let base = b * r * c;
        for i in 0..r {
            for j in 0..c {
                out[base + j * r + i] = src[base + i * c + j];
            }
        }
    }
    let mut shape = t.shape().to_vec();
    let n = shape.len();
    shape.swap(n - 2, n - 1);
    Tensor::new(shape, out).ok()
}

/// Sums a broadcast gradient back down to `target`'s shape.
fn reduce_to(g: &Tensor, target: &[usize], sign: f64) -> Tensor {
    if g.shape() == target {
        return if sign == 1.0 { g.clone() } else { g.map(|v| -v) };
    }
    let mut out = vec![0.0; target.iter().product()];
    if tiles(target, g.shape()) {
        for ch in g.data().chunks(out.len()) {
            for (o, v) in out.iter_mut().zip(ch) {
                *o += sign * v;
            }
        }
    } else {
        let idx = broadcast_index(target, g.shape());
        for (k, &i) in idx.iter().enumerate() {
            out[i] += sign * g.data()[k];
        }
    }
    Tensor::new(target.to_vec(), out).expect("reduce shape")
}

/// Whether `small` broadcasts to `out` by repeating its whole buffer, i.e.
/// it equals a suffix of `out` up to leading unit axes.
fn tiles(small: &[usize], out: &[usize]) -> bool {
    let core: &[usize] = {
        let lead = small.iter().take_while(|&&d| d == 1).count();
        &small[lead..]
    };
    !core.is_empty() && out.ends_with(core) || small.iter().all(|&d| d == 1)
}

/// Sorts `order` (a permutation of `0..k`) by `a[p]`, then by row `p` of
/// the `k×n` matrix `b`. Equal keys mean equal terms, so summing in this
/// order depends only on the multiset of `(a[p], b[p, ..])` pairs.
fn canonical_order(order: &mut [usize], a: &[f64], b: &[f64], n: usize) {
    for (i, o) in order.iter_mut().enumerate() {
        *o = i;
    }
    order.sort_unstable_by(|&p, &q| {
        a[p].total_cmp(&a[q]).then_with(|| {
            let (rp, rq) = (&b[p * n..(p + 1) * n], &b[q * n..(q + 1) * n]);
            rp.iter()
                .zip(rq)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
}
