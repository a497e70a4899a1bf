use std::collections::BTreeMap;

use crate::scalar::Scalar;
use crate::tensor::{
    broadcast_index_map, broadcast_shape, gemm_acc, inverse_permutation, numel, permute_data, Tensor,
};

use super::params::{ParamId, ParamStore};
use super::GraphError;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, S),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    Relu(Var),
    ClampMin(Var, S),
    Softmax(Var),
    CausalSoftmax(Var),
    LayerNorm { x: Var, xhat: Vec<S>, inv_std: Vec<S> },
    Square(Var),
    Sqrt(Var),
    Rsqrt(Var),
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul(..) => "bmm",
            Op::Permute(..) => "permute",
            Op::Reshape(..) => "reshape",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Gelu(..) => "gelu",
            Op::Relu(..) => "relu",
            Op::ClampMin(..) => "clamp_min",
            Op::Softmax(..) => "softmax",
            Op::CausalSoftmax(..) => "causal_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Square(..) => "square",
            Op::Sqrt(..) => "sqrt",
            Op::Rsqrt(..) => "rsqrt",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumAxis { .. } => "sum_axis",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
        }
    }
}

#[derive(Debug, Clone)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
    params: Vec<(ParamId, Var)>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adds the gradients of every bound parameter into the store's
    /// accumulators. Frozen parameters receive their gradient too; only the
    /// optimizer consults the frozen flag.
    pub fn accumulate_into(&self, store: &mut ParamStore<S>) {
        for &(id, var) in &self.params {
            if let Some(g) = self.get(var) {
                store.grad_mut(id).add_assign(g);
            }
        }
    }
}

/// Append-only tape of tensor operations.
///
/// Node indices increase in creation order, so iterating them backwards is a
/// reverse topological order of the (acyclic) computation.
#[derive(Debug, Clone)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    bound: BTreeMap<ParamId, Var>,
    backward_done: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: BTreeMap::new(),
            backward_done: false,
        }
    }

    /// Drops all recorded nodes so the graph can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.bound.clear();
        self.backward_done = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Result<Var, GraphError> {
        if !value.all_finite() {
            return Err(GraphError::NonFinite { op: op.name() });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Result<Var, GraphError> {
        self.push(value, Op::Leaf, false)
    }

    /// A free leaf that receives gradient but is not tied to a parameter.
    pub fn variable(&mut self, value: Tensor<S>) -> Result<Var, GraphError> {
        self.push(value, Op::Leaf, true)
    }

    /// Binds parameter `id` as a leaf. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Result<Var, GraphError> {
        if let Some(&v) = self.bound.get(&id) {
            return Ok(v);
        }
        let v = self.push(store.value(id).clone(), Op::Leaf, true)?;
        self.nodes[v.0].param = Some(id);
        self.bound.insert(id, v);
        Ok(v)
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> GraphError {
        GraphError::ShapeMismatch {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    fn broadcast_binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<Var, GraphError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| self.mismatch(name, a, b))?;
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let data: Vec<S> = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = broadcast_index_map(&sa, &out_shape);
            let mb = broadcast_index_map(&sb, &out_shape);
            ma.iter().zip(&mb).map(|(&i, &j)| f(va[i], vb[j])).collect()
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(out_shape, data).expect("broadcast shape"), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.broadcast_binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.broadcast_binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.broadcast_binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.broadcast_binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, x: Var, c: S) -> Result<Var, GraphError> {
        let v = self.value(x).map(|e| e + c);
        let rg = self.rg(x);
        self.push(v, Op::AddScalar(x), rg)
    }

    pub fn mul_scalar(&mut self, x: Var, c: S) -> Result<Var, GraphError> {
        let v = self.value(x).map(|e| e * c);
        let rg = self.rg(x);
        self.push(v, Op::MulScalar(x, c), rg)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var, GraphError> {
        self.mul_scalar(x, -S::one())
    }

    /// `a[..., m, k] · b[k, n]` (weight shared across leading axes), or a
    /// batched product when both operands are 3-D with equal batch size.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() == 3 && sb.len() == 3 {
            return self.bmm(a, b);
        }
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(self.mismatch("matmul", a, b));
        }
        let k = sb[0];
        let n = sb[1];
        let rows = numel(&sa) / k.max(1);
        let mut out = vec![S::zero(); rows * n];
        gemm_acc(self.value(a).data(), false, self.value(b).data(), false, &mut out, rows, k, n);
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(shape, out).expect("matmul shape"), Op::MatMul(a, b), rg)
    }

    fn bmm(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(self.mismatch("bmm", a, b));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![S::zero(); bs * m * n];
        let va = self.value(a).data();
        let vb = self.value(b).data();
        for i in 0..bs {
            gemm_acc(
                &va[i * m * k..(i + 1) * m * k],
                false,
                &vb[i * k * n..(i + 1) * k * n],
                false,
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(vec![bs, m, n], out).expect("bmm shape"), Op::BatchMatMul(a, b), rg)
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var, GraphError> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(GraphError::InvalidAxis {
                op: "permute",
                shape,
                axis: perm.len(),
            });
        }
        let (s, d) = permute_data(self.value(x).data(), &shape, perm);
        let rg = self.rg(x);
        self.push(Tensor::new(s, d).expect("permute"), Op::Permute(x, perm.to_vec()), rg)
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var, GraphError> {
        let nd = self.shape(x).len();
        if nd < 2 {
            return Err(GraphError::InvalidAxis {
                op: "transpose",
                shape: self.shape(x).to_vec(),
                axis: 1,
            });
        }
        let mut perm: Vec<usize> = (0..nd).collect();
        perm.swap(nd - 1, nd - 2);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, GraphError> {
        let v = self.value(x).clone().reshaped(shape).map_err(|_| GraphError::ShapeMismatch {
            op: "reshape",
            lhs: self.shape(x).to_vec(),
            rhs: shape.to_vec(),
        })?;
        let rg = self.rg(x);
        self.push(v, Op::Reshape(x), rg)
    }

    fn unary(&mut self, x: Var, f: impl Fn(S) -> S, op: Op<S>) -> Result<Var, GraphError> {
        let v = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(v, op, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, GraphError> {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, GraphError> {
        self.unary(x, |e| e.tanh(), Op::Tanh(x))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var, GraphError> {
        self.unary(x, |e| gelu_parts(e).0, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, GraphError> {
        self.unary(x, |e| e.max(S::zero()), Op::Relu(x))
    }

    pub fn clamp_min(&mut self, x: Var, lo: S) -> Result<Var, GraphError> {
        self.unary(x, |e| e.max(lo), Op::ClampMin(x, lo))
    }

    pub fn square(&mut self, x: Var) -> Result<Var, GraphError> {
        self.unary(x, |e| e * e, Op::Square(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var, GraphError> {
        if self.value(x).data().iter().any(|&e| e < S::zero()) {
            return Err(GraphError::NonFinite { op: "sqrt" });
        }
        self.unary(x, |e| e.sqrt(), Op::Sqrt(x))
    }

    pub fn rsqrt(&mut self, x: Var) -> Result<Var, GraphError> {
        self.unary(x, |e| e.sqrt().recip(), Op::Rsqrt(x))
    }

    /// Softmax over the last axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Result<Var, GraphError> {
        let v = self.value(x);
        let len = *v.shape().last().unwrap_or(&1);
        let mut out = v.clone();
        for row in out.data_mut().chunks_mut(len.max(1)) {
            softmax_row(row, len);
        }
        let rg = self.rg(x);
        self.push(out, Op::Softmax(x), rg)
    }

    /// Softmax over the last axis of a `[..., P, P]` score tensor where row
    /// `i` only attends to columns `j <= i`. Masked weights are exactly zero.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var, GraphError> {
        let shape = self.shape(x).to_vec();
        let nd = shape.len();
        if nd < 2 || shape[nd - 1] != shape[nd - 2] {
            return Err(GraphError::ShapeMismatch {
                op: "causal_softmax",
                lhs: shape.clone(),
                rhs: shape,
            });
        }
        let p = shape[nd - 1];
        let mut out = self.value(x).clone();
        for (r, row) in out.data_mut().chunks_mut(p.max(1)).enumerate() {
            let i = r % p;
            softmax_row(row, i + 1);
            for e in &mut row[i + 1..] {
                *e = S::zero();
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::CausalSoftmax(x), rg)
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var, GraphError> {
        let v = self.value(x);
        let len = *v.shape().last().unwrap_or(&1);
        let eps = S::lit(LAYER_NORM_EPS);
        let n = S::from_usize_lossy(len);
        let mut xhat = Vec::with_capacity(v.len());
        let mut inv_std = Vec::with_capacity(v.len() / len.max(1));
        for row in v.data().chunks(len.max(1)) {
            let mean = row.iter().copied().sum::<S>() / n;
            let var = row.iter().map(|&e| (e - mean) * (e - mean)).sum::<S>() / n;
            let is = (var + eps).sqrt().recip();
            inv_std.push(is);
            xhat.extend(row.iter().map(|&e| (e - mean) * is));
        }
        let out = Tensor::new(v.shape().to_vec(), xhat.clone()).expect("layer norm");
        let rg = self.rg(x);
        self.push(out, Op::LayerNorm { x, xhat, inv_std }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, GraphError> {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, GraphError> {
        let v = self.value(x);
        let s = v.sum() / S::from_usize_lossy(v.len().max(1));
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var, GraphError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(GraphError::InvalidAxis { op: "sum_axis", shape, axis });
        }
        let outer: usize = shape[..axis].iter().product();
        let mid = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let v = self.value(x).data();
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                let base = (o * mid + m) * inner;
                for i in 0..inner {
                    out[o * inner + i] += v[base + i];
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let rg = self.rg(x);
        self.push(Tensor::new(out_shape, out).expect("sum axis"), Op::SumAxis { x, axis }, rg)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, GraphError> {
        let first = *inputs.first().ok_or(GraphError::EmptyInput { op: "concat" })?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(GraphError::InvalidAxis { op: "concat", shape: base, axis });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(self.mismatch("concat", first, v));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            Tensor::new(shape, out).expect("concat"),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        )
    }

    /// `len` consecutive entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, GraphError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(GraphError::InvalidAxis { op: "slice", shape, axis });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis] * inner;
        let v = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let b = o * full + start * inner;
            out.extend_from_slice(&v[b..b + len * inner]);
        }
        let mut s = shape;
        s[axis] = len;
        let rg = self.rg(x);
        self.push(Tensor::new(s, out).expect("slice"), Op::Slice { x, axis, start }, rg)
    }

    /// Reverse-mode sweep from a one-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<S>, GraphError> {
        if self.nodes.is_empty() {
            return Err(GraphError::EmptyTape);
        }
        if self.backward_done {
            return Err(GraphError::BackwardTwice);
        }
        if self.value(loss).len() != 1 {
            return Err(GraphError::NotScalar {
                shape: self.shape(loss).to_vec(),
            });
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let params = self.bound.iter().map(|(&id, &v)| (id, v)).collect();
        Ok(Gradients { grads, params })
    }

    fn accum(&self, grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Sums a gradient of `out_shape` down to the broadcast input's shape.
    fn reduce_to(&self, g: &Tensor<S>, v: Var, scale: impl Fn(usize, S) -> S) -> Tensor<S> {
        let in_shape = self.shape(v);
        let mut out = Tensor::zeros(in_shape);
        if in_shape == g.shape() {
            for (i, (o, &gv)) in out.data_mut().iter_mut().zip(g.data()).enumerate() {
                *o = scale(i, gv);
            }
            return out;
        }
        let map = broadcast_index_map(in_shape, g.shape());
        let od = out.data_mut();
        for (i, (&j, &gv)) in map.iter().zip(g.data()).enumerate() {
            od[j] += scale(i, gv);
        }
        out
    }

    fn broadcast_value(&self, v: Var, out_shape: &[usize]) -> Vec<S> {
        let t = self.value(v);
        if t.shape() == out_shape {
            return t.data().to_vec();
        }
        broadcast_index_map(t.shape(), out_shape)
            .into_iter()
            .map(|j| t.data()[j])
            .collect()
    }

    fn propagate(&self, idx: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                let ga = self.reduce_to(g, a, |_, x| x);
                let gb = self.reduce_to(g, b, |_, x| x);
                self.accum(grads, a, ga);
                self.accum(grads, b, gb);
            }
            &Op::Sub(a, b) => {
                let ga = self.reduce_to(g, a, |_, x| x);
                let gb = self.reduce_to(g, b, |_, x| -x);
                self.accum(grads, a, ga);
                self.accum(grads, b, gb);
            }
            &Op::Mul(a, b) => {
                if self.rg(a) {
                    let bv = self.broadcast_value(b, g.shape());
                    let ga = self.reduce_to(g, a, |i, x| x * bv[i]);
                    self.accum(grads, a, ga);
                }
                if self.rg(b) {
                    let av = self.broadcast_value(a, g.shape());
                    let gb = self.reduce_to(g, b, |i, x| x * av[i]);
                    self.accum(grads, b, gb);
                }
            }
            &Op::Div(a, b) => {
                let bv = self.broadcast_value(b, g.shape());
                if self.rg(a) {
                    let ga = self.reduce_to(g, a, |i, x| x / bv[i]);
                    self.accum(grads, a, ga);
                }
                if self.rg(b) {
                    let od = out.data();
                    let gb = self.reduce_to(g, b, |i, x| -x * od[i] / bv[i]);
                    self.accum(grads, b, gb);
                }
            }
            &Op::AddScalar(x) => self.accum(grads, x, g.clone()),
            &Op::MulScalar(x, c) => self.accum(grads, x, g.map(|e| e * c)),
            &Op::MatMul(a, b) => {
                let sb = self.shape(b);
                let (k, n) = (sb[0], sb[1]);
                let rows = self.value(a).len() / k.max(1);
                if self.rg(a) {
                    let mut ga = Tensor::zeros(self.shape(a));
                    gemm_acc(g.data(), false, self.value(b).data(), true, ga.data_mut(), rows, n, k);
                    self.accum(grads, a, ga);
                }
                if self.rg(b) {
                    let mut gb = Tensor::zeros(sb);
                    gemm_acc(self.value(a).data(), true, g.data(), false, gb.data_mut(), k, rows, n);
                    self.accum(grads, b, gb);
                }
            }
            &Op::BatchMatMul(a, b) => {
                let sa = self.shape(a);
                let sb = self.shape(b);
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let gd = g.data();
                if self.rg(a) {
                    let mut ga = Tensor::zeros(sa);
                    let vb = self.value(b).data();
                    for i in 0..bs {
                        gemm_acc(
                            &gd[i * m * n..(i + 1) * m * n],
                            false,
                            &vb[i * k * n..(i + 1) * k * n],
                            true,
                            &mut ga.data_mut()[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    self.accum(grads, a, ga);
                }
                if self.rg(b) {
                    let mut gb = Tensor::zeros(sb);
                    let va = self.value(a).data();
                    for i in 0..bs {
                        gemm_acc(
                            &va[i * m * k..(i + 1) * m * k],
                            true,
                            &gd[i * m * n..(i + 1) * m * n],
                            false,
                            &mut gb.data_mut()[i * k * n..(i + 1) * k * n],
                            k,
                            m,
                            n,
                        );
                    }
                    self.accum(grads, b, gb);
                }
            }
            Op::Permute(x, perm) => {
                let inv = inverse_permutation(perm);
                let (s, d) = permute_data(g.data(), g.shape(), &inv);
                self.accum(grads, *x, Tensor::new(s, d).expect("permute grad"));
            }
            &Op::Reshape(x) => {
                let gx = g.clone().reshaped(self.shape(x)).expect("reshape grad");
                self.accum(grads, x, gx);
            }
            &Op::Sigmoid(x) => {
                let gx = g.zip_map(out, |gv, y| gv * y * (S::one() - y));
                self.accum(grads, x, gx);
            }
            &Op::Tanh(x) => {
                let gx = g.zip_map(out, |gv, y| gv * (S::one() - y * y));
                self.accum(grads, x, gx);
            }
            &Op::Gelu(x) => {
                let gx = g.zip_map(self.value(x), |gv, e| gv * gelu_parts(e).1);
                self.accum(grads, x, gx);
            }
            &Op::Relu(x) => {
                let gx = g.zip_map(self.value(x), |gv, e| if e > S::zero() { gv } else { S::zero() });
                self.accum(grads, x, gx);
            }
            &Op::ClampMin(x, lo) => {
                let gx = g.zip_map(self.value(x), |gv, e| if e > lo { gv } else { S::zero() });
                self.accum(grads, x, gx);
            }
            &Op::Softmax(x) | &Op::CausalSoftmax(x) => {
                let len = *out.shape().last().unwrap_or(&1);
                let mut gx = Tensor::zeros(out.shape());
                for ((gr, yr), or) in g
                    .data()
                    .chunks(len)
                    .zip(out.data().chunks(len))
                    .zip(gx.data_mut().chunks_mut(len))
                {
                    let dot: S = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for ((o, &gv), &y) in or.iter_mut().zip(gr).zip(yr) {
                        *o = y * (gv - dot);
                    }
                }
                self.accum(grads, x, gx);
            }
            Op::LayerNorm { x, xhat, inv_std } => {
                let len = *out.shape().last().unwrap_or(&1);
                let n = S::from_usize_lossy(len);
                let mut gx = Tensor::zeros(out.shape());
                for (((gr, xr), or), &is) in g
                    .data()
                    .chunks(len)
                    .zip(xhat.chunks(len))
                    .zip(gx.data_mut().chunks_mut(len))
                    .zip(inv_std)
                {
                    let mean_g = gr.iter().copied().sum::<S>() / n;
                    let mean_gx = gr.iter().zip(xr).map(|(&a, &b)| a * b).sum::<S>() / n;
                    for ((o, &gv), &xh) in or.iter_mut().zip(gr).zip(xr) {
                        *o = is * (gv - mean_g - xh * mean_gx);
                    }
                }
                self.accum(grads, *x, gx);
            }
            &Op::Square(x) => {
                let two = S::lit(2.0);
                let gx = g.zip_map(self.value(x), |gv, e| gv * two * e);
                self.accum(grads, x, gx);
            }
            &Op::Sqrt(x) => {
                // Subgradient 0 at the origin keeps zero-residual losses finite.
                let two = S::lit(2.0);
                let gx = g.zip_map(out, |gv, y| if y > S::zero() { gv / (two * y) } else { S::zero() });
                self.accum(grads, x, gx);
            }
            &Op::Rsqrt(x) => {
                let half = S::lit(0.5);
                let gx = g.zip_map(self.value(x), |gv, e| -gv * half * e.powf(S::lit(-1.5)));
                self.accum(grads, x, gx);
            }
            &Op::Sum(x) => {
                let gx = Tensor::full(self.shape(x), g.item());
                self.accum(grads, x, gx);
            }
            &Op::Mean(x) => {
                let n = S::from_usize_lossy(self.value(x).len().max(1));
                let gx = Tensor::full(self.shape(x), g.item() / n);
                self.accum(grads, x, gx);
            }
            &Op::SumAxis { x, axis } => {
                let shape = self.shape(x);
                let outer: usize = shape[..axis].iter().product();
                let mid = shape[axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let mut gx = Tensor::zeros(shape);
                let gd = g.data();
                let xd = gx.data_mut();
                for o in 0..outer {
                    for m in 0..mid {
                        let base = (o * mid + m) * inner;
                        xd[base..base + inner].copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                    }
                }
                self.accum(grads, x, gx);
            }
            Op::Concat { inputs, axis } => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let full = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis] * inner;
                    if self.rg(v) {
                        let mut gv = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            let b = o * full + offset;
                            gv.extend_from_slice(&g.data()[b..b + len]);
                        }
                        self.accum(grads, v, Tensor::new(self.shape(v).to_vec(), gv).expect("concat grad"));
                    }
                    offset += len;
                }
            }
            &Op::Slice { x, axis, start } => {
                let shape = self.shape(x);
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let full = shape[axis] * inner;
                let len = out.shape()[axis] * inner;
                let mut gx = Tensor::zeros(shape);
                for o in 0..outer {
                    let b = o * full + start * inner;
                    gx.data_mut()[b..b + len].copy_from_slice(&g.data()[o * len..(o + 1) * len]);
                }
                self.accum(grads, x, gx);
            }
        }
    }
}

pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// GELU value and derivative (tanh approximation).
fn gelu_parts<S: Scalar>(x: S) -> (S, S) {
    let c = S::lit((2.0 / std::f64::consts::PI).sqrt());
    let k = S::lit(0.044715);
    let half = S::lit(0.5);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let y = half * x * (S::one() + t);
    let dy = half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + S::lit(3.0) * k * x * x);
    (y, dy)
}

fn softmax_row<S: Scalar>(row: &mut [S], active: usize) {
    let head = &mut row[..active];
    let max = head.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for e in head.iter_mut() {
        *e = (*e - max).exp();
        total += *e;
    }
    for e in head.iter_mut() {
        *e /= total;
    }
}
