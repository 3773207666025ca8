//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every primitive application in topological order.
//! Values are computed eagerly; [`Graph::backward`] walks the recording in
//! reverse and returns adjoints for every node that depends on a parameter
//! leaf.
//!
//! Shapes are never broadcast implicitly. The only mixed-shape arithmetic is
//! [`Graph::scale_by`] (tensor times a one-element tensor); everything else
//! requires explicit [`Graph::expand`], [`Graph::reshape`] or
//! [`Graph::transpose`].

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive identifiers for [`Graph::apply`].
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive<T> {
    Add,
    Sub,
    Mul,
    /// Multiply by a constant.
    Scale(T),
    /// Multiply a tensor by a one-element tensor.
    ScaleBy,
    MatMul,
    /// Swap the last two axes.
    Transpose,
    Reshape(Vec<usize>),
    Concat(usize),
    Slice {
        axis: usize,
        start: usize,
        len: usize,
    },
    Sum,
    Mean,
    SumAxis(usize),
    MeanAxis(usize),
    /// Insert a new axis of extent `n` at `axis`, repeating the input.
    Expand {
        axis: usize,
        n: usize,
    },
    /// Softmax over the last axis.
    Softmax,
    /// Normalization over the last axis, without affine parameters.
    LayerNorm,
    Silu,
    Sin,
    Cos,
    Sqrt,
    Exp,
    Log,
    /// Unit L2 norm over the last axis.
    L2Normalize,
}

impl<T> Primitive<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Scale(_) => "scale",
            Primitive::ScaleBy => "scale_by",
            Primitive::MatMul => "matmul",
            Primitive::Transpose => "transpose",
            Primitive::Reshape(_) => "reshape",
            Primitive::Concat(_) => "concat",
            Primitive::Slice { .. } => "slice",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::SumAxis(_) => "sum_axis",
            Primitive::MeanAxis(_) => "mean_axis",
            Primitive::Expand { .. } => "expand",
            Primitive::Softmax => "softmax",
            Primitive::LayerNorm => "layer_norm",
            Primitive::Silu => "silu",
            Primitive::Sin => "sin",
            Primitive::Cos => "cos",
            Primitive::Sqrt => "sqrt",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::L2Normalize => "l2_normalize",
        }
    }
}

const LN_EPS: f64 = 1e-5;
const L2_EPS: f64 = 1e-12;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScaleBy(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    Expand { x: Var, axis: usize },
    Softmax(Var),
    LayerNorm { x: Var, inv_std: Vec<T> },
    Silu(Var),
    Sin(Var),
    Cos(Var),
    Sqrt(Var),
    Exp(Var),
    Log(Var),
    L2Normalize { x: Var, norms: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording of primitive applications.
///
/// Not `Sync`-shared: one graph belongs to one thread of execution.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// (outer, mid, inner) extents around `axis`.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

fn last_axis(shape: &[usize]) -> (usize, usize) {
    let d = *shape.last().unwrap_or(&1);
    (numel(shape) / d, d)
}

/// Dense matrix product with optional logical transposes of the operands.
/// `a` is stored `[m,k]` (or `[k,m]` when `ta`), `b` is `[k,n]` (or `[n,k]` when `tb`).
#[allow(clippy::too_many_arguments)]
fn gemm_into<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    accumulate: bool,
    c: &mut [T],
) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(m, k, n, a, rsa, csa, b, rsb, csb, beta, c);
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    /// Leaf whose adjoint is reported by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: &'static str, value: Tensor<T>, node_op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NumericFault { op });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: node_op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    /// Dispatches a primitive by identifier.
    pub fn apply(&mut self, prim: &Primitive<T>, inputs: &[Var]) -> Result<Var> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() != n {
                return Err(Error::shape(
                    prim.name(),
                    format!("expected {n} inputs, got {}", inputs.len()),
                ));
            }
            Ok(())
        };
        match prim {
            Primitive::Add => arity(2).and_then(|_| self.add(inputs[0], inputs[1])),
            Primitive::Sub => arity(2).and_then(|_| self.sub(inputs[0], inputs[1])),
            Primitive::Mul => arity(2).and_then(|_| self.mul(inputs[0], inputs[1])),
            Primitive::Scale(s) => arity(1).and_then(|_| self.scale(inputs[0], *s)),
            Primitive::ScaleBy => arity(2).and_then(|_| self.scale_by(inputs[0], inputs[1])),
            Primitive::MatMul => arity(2).and_then(|_| self.matmul(inputs[0], inputs[1])),
            Primitive::Transpose => arity(1).and_then(|_| self.transpose(inputs[0])),
            Primitive::Reshape(s) => arity(1).and_then(|_| self.reshape(inputs[0], s.clone())),
            Primitive::Concat(axis) => self.concat(inputs, *axis),
            Primitive::Slice { axis, start, len } => arity(1).and_then(|_| self.slice(inputs[0], *axis, *start, *len)),
            Primitive::Sum => arity(1).and_then(|_| self.sum(inputs[0])),
            Primitive::Mean => arity(1).and_then(|_| self.mean(inputs[0])),
            Primitive::SumAxis(a) => arity(1).and_then(|_| self.sum_axis(inputs[0], *a)),
            Primitive::MeanAxis(a) => arity(1).and_then(|_| self.mean_axis(inputs[0], *a)),
            Primitive::Expand { axis, n } => arity(1).and_then(|_| self.expand(inputs[0], *axis, *n)),
            Primitive::Softmax => arity(1).and_then(|_| self.softmax(inputs[0])),
            Primitive::LayerNorm => arity(1).and_then(|_| self.layer_norm(inputs[0])),
            Primitive::Silu => arity(1).and_then(|_| self.silu(inputs[0])),
            Primitive::Sin => arity(1).and_then(|_| self.sin(inputs[0])),
            Primitive::Cos => arity(1).and_then(|_| self.cos(inputs[0])),
            Primitive::Sqrt => arity(1).and_then(|_| self.sqrt(inputs[0])),
            Primitive::Exp => arity(1).and_then(|_| self.exp(inputs[0])),
            Primitive::Log => arity(1).and_then(|_| self.log(inputs[0])),
            Primitive::L2Normalize => arity(1).and_then(|_| self.l2_normalize(inputs[0])),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        let v = self.value(a).map(|x| x * s);
        self.push("scale", v, Op::Scale(a, s), &[a])
    }

    /// `a * s` where `s` holds exactly one element.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape(
                "scale_by",
                format!("scale factor must have one element, got {:?}", self.shape(s)),
            ));
        }
        let k = self.value(s).item();
        let v = self.value(a).map(|x| x * k);
        self.push("scale_by", v, Op::ScaleBy(a, s), &[a, s])
    }

    /// Matrix product. Supported ranks (lhs x rhs):
    /// `[m,k]x[k,n]`, `[b,m,k]x[b,k,n]`, `[b,m,k]x[k,n]` and `[m,k]x[b,k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let dims = matmul_dims(&sa, &sb)?;
        let mut out = vec![T::zero(); dims.batch * dims.m * dims.n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for bi in 0..dims.batch {
            let a_off = if dims.a_batched { bi * dims.m * dims.k } else { 0 };
            let b_off = if dims.b_batched { bi * dims.k * dims.n } else { 0 };
            gemm_into(
                dims.m,
                dims.k,
                dims.n,
                &da[a_off..a_off + dims.m * dims.k],
                false,
                &db[b_off..b_off + dims.k * dims.n],
                false,
                false,
                &mut out[bi * dims.m * dims.n..(bi + 1) * dims.m * dims.n],
            );
        }
        let v = Tensor::from_parts(dims.out_shape.clone(), out);
        self.push("matmul", v, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("transpose", format!("rank {} < 2", s.len())));
        }
        let v = transpose_last2(self.value(a));
        self.push("transpose", v, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        self.push("reshape", v, Op::Reshape(a), &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(Error::shape("concat", format!("{base:?} vs {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_at_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let mid = v.shape()[axis];
                out.extend_from_slice(&v.data()[o * mid * inner..(o + 1) * mid * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let v = Tensor::from_parts(shape, out);
        self.push("concat", v, Op::Concat(parts.to_vec(), axis), parts)
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{start}..{}) on axis {axis} of {s:?}", start + len),
            ));
        }
        let (outer, mid, inner) = split_at_axis(&s, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * mid * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let v = Tensor::from_parts(shape, out);
        self.push("slice", v, Op::Slice { x: a, axis, start }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push("sum", v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let v = Tensor::scalar(x.sum() / T::of(x.len() as f64));
        self.push("mean", v, Op::Mean(a), &[a])
    }

    fn reduce_axis(&self, a: Var, axis: usize, op: &'static str) -> Result<Tensor<T>> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(Error::shape(op, format!("axis {axis} out of range for {s:?}")));
        }
        let (outer, mid, inner) = split_at_axis(&s, axis);
        let src = self.value(a).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                let row = &src[(o * mid + m) * inner..(o * mid + m + 1) * inner];
                for (acc, &x) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += x;
                }
            }
        }
        let mut shape = s;
        shape.remove(axis);
        Ok(Tensor::from_parts(shape, out))
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let v = self.reduce_axis(a, axis, "sum_axis")?;
        self.push("sum_axis", v, Op::SumAxis(a, axis), &[a])
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let n = T::of(self.shape(a).get(axis).copied().unwrap_or(1) as f64);
        let v = self.reduce_axis(a, axis, "mean_axis")?.map(|x| x / n);
        self.push("mean_axis", v, Op::MeanAxis(a, axis), &[a])
    }

    pub fn expand(&mut self, a: Var, axis: usize, n: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis > s.len() || n == 0 {
            return Err(Error::shape("expand", format!("axis {axis} x{n} on {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis..].iter().product();
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            for _ in 0..n {
                out.extend_from_slice(&src[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = s;
        shape.insert(axis, n);
        let v = Tensor::from_parts(shape, out);
        self.push("expand", v, Op::Expand { x: a, axis }, &[a])
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (rows, d) = last_axis(x.shape());
        let mut out = x.data().to_vec();
        for r in 0..rows {
            let row = &mut out[r * d..(r + 1) * d];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let v = Tensor::from_parts(x.shape().to_vec(), out);
        self.push("softmax", v, Op::Softmax(a), &[a])
    }

    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (rows, d) = last_axis(x.shape());
        let dn = T::of(d as f64);
        let eps = T::of(LN_EPS);
        let mut out = x.data().to_vec();
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &mut out[r * d..(r + 1) * d];
            let mu = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / dn;
            let is = (var + eps).sqrt().recip();
            for v in row.iter_mut() {
                *v = (*v - mu) * is;
            }
            inv_std.push(is);
        }
        let v = Tensor::from_parts(x.shape().to_vec(), out);
        self.push("layer_norm", v, Op::LayerNorm { x: a, inv_std }, &[a])
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x / (T::one() + (-x).exp()));
        self.push("silu", v, Op::Silu(a), &[a])
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(T::sin);
        self.push("sin", v, Op::Sin(a), &[a])
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(T::cos);
        self.push("cos", v, Op::Cos(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(T::sqrt);
        self.push("sqrt", v, Op::Sqrt(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(T::exp);
        self.push("exp", v, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(T::ln);
        self.push("log", v, Op::Log(a), &[a])
    }

    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (rows, d) = last_axis(x.shape());
        let eps = T::of(L2_EPS);
        let mut out = x.data().to_vec();
        let mut norms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &mut out[r * d..(r + 1) * d];
            let n = (row.iter().map(|&v| v * v).sum::<T>() + eps).sqrt();
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        let v = Tensor::from_parts(x.shape().to_vec(), out);
        self.push("l2_normalize", v, Op::L2Normalize { x: a, norms }, &[a])
    }

    /// Propagates adjoints from a scalar `loss` back to every node.
    ///
    /// Consumes the graph. Parameters with no path to `loss` get a zero gradient.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let loss_shape = self.shape(loss).to_vec();
        if numel(&loss_shape) != 1 {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        let shapes: Vec<Vec<usize>> = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(loss_shape));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            // Only leaf gradients are kept; interior ones are consumed here.
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            } else {
                self.propagate(i, g, &mut grads);
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, i: usize, owned: Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let g = &owned;
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let y = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => match (wants(*a), wants(*b)) {
                (true, true) => {
                    acc(grads, *a, g.clone());
                    acc(grads, *b, owned);
                }
                (true, false) => acc(grads, *a, owned),
                (false, true) => acc(grads, *b, owned),
                (false, false) => {}
            },
            Op::Sub(a, b) => {
                if wants(*a) {
                    acc(grads, *a, g.clone());
                }
                if wants(*b) {
                    acc(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    acc(grads, *a, g.zip_map(val(*b), |x, y| x * y).unwrap());
                }
                if wants(*b) {
                    acc(grads, *b, g.zip_map(val(*a), |x, y| x * y).unwrap());
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                acc(grads, *a, g.map(|x| x * s));
            }
            Op::ScaleBy(a, s) => {
                let k = val(*s).item();
                if wants(*a) {
                    acc(grads, *a, g.map(|x| x * k));
                }
                if wants(*s) {
                    let d: T = g.data().iter().zip(val(*a).data()).map(|(&x, &y)| x * y).sum();
                    let shape = val(*s).shape().to_vec();
                    acc(grads, *s, Tensor::from_parts(shape, vec![d]));
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let dims = matmul_dims(va.shape(), vb.shape()).expect("validated in forward");
                let (m, k, n) = (dims.m, dims.k, dims.n);
                let gd = g.data();
                if wants(*a) {
                    let mut da = vec![T::zero(); va.len()];
                    for bi in 0..dims.batch {
                        let a_off = if dims.a_batched { bi * m * k } else { 0 };
                        let b_off = if dims.b_batched { bi * k * n } else { 0 };
                        // dA = dC * B^T
                        gemm_into(
                            m,
                            n,
                            k,
                            &gd[bi * m * n..(bi + 1) * m * n],
                            false,
                            &vb.data()[b_off..b_off + k * n],
                            true,
                            !dims.a_batched && bi > 0,
                            &mut da[a_off..a_off + m * k],
                        );
                    }
                    acc(grads, *a, Tensor::from_parts(va.shape().to_vec(), da));
                }
                if wants(*b) {
                    let mut db = vec![T::zero(); vb.len()];
                    for bi in 0..dims.batch {
                        let a_off = if dims.a_batched { bi * m * k } else { 0 };
                        let b_off = if dims.b_batched { bi * k * n } else { 0 };
                        // dB = A^T * dC
                        gemm_into(
                            k,
                            m,
                            n,
                            &va.data()[a_off..a_off + m * k],
                            true,
                            &gd[bi * m * n..(bi + 1) * m * n],
                            false,
                            !dims.b_batched && bi > 0,
                            &mut db[b_off..b_off + k * n],
                        );
                    }
                    acc(grads, *b, Tensor::from_parts(vb.shape().to_vec(), db));
                }
            }
            Op::Transpose(a) => acc(grads, *a, transpose_last2(g)),
            Op::Reshape(a) => {
                let shape = val(*a).shape().to_vec();
                acc(grads, *a, Tensor::from_parts(shape, owned.into_data()));
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = split_at_axis(g.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let s = val(p).shape();
                    let mid = s[*axis];
                    if wants(p) {
                        let mut out = Vec::with_capacity(outer * mid * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            out.extend_from_slice(&g.data()[base..base + mid * inner]);
                        }
                        acc(grads, p, Tensor::from_parts(s.to_vec(), out));
                    }
                    offset += mid;
                }
            }
            Op::Slice { x, axis, start } => {
                let s = val(*x).shape().to_vec();
                let (outer, mid, inner) = split_at_axis(&s, *axis);
                let len = g.shape()[*axis];
                let mut out = vec![T::zero(); numel(&s)];
                for o in 0..outer {
                    let dst = o * mid * inner + start * inner;
                    out[dst..dst + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                acc(grads, *x, Tensor::from_parts(s, out));
            }
            Op::Sum(a) => {
                let k = g.item();
                acc(grads, *a, Tensor::full(val(*a).shape().to_vec(), k));
            }
            Op::Mean(a) => {
                let k = g.item() / T::of(val(*a).len() as f64);
                acc(grads, *a, Tensor::full(val(*a).shape().to_vec(), k));
            }
            Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                let s = val(*a).shape().to_vec();
                let (outer, mid, inner) = split_at_axis(&s, *axis);
                let scale = match &nodes[i].op {
                    Op::MeanAxis(..) => T::one() / T::of(mid as f64),
                    _ => T::one(),
                };
                let mut out = Vec::with_capacity(numel(&s));
                for o in 0..outer {
                    for _ in 0..mid {
                        out.extend(g.data()[o * inner..(o + 1) * inner].iter().map(|&x| x * scale));
                    }
                }
                acc(grads, *a, Tensor::from_parts(s, out));
            }
            Op::Expand { x, axis } => {
                let s = val(*x).shape().to_vec();
                let (outer, n, inner) = split_at_axis(g.shape(), *axis);
                let mut out = vec![T::zero(); outer * inner];
                for o in 0..outer {
                    for r in 0..n {
                        let src = &g.data()[(o * n + r) * inner..(o * n + r + 1) * inner];
                        for (d, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                }
                acc(grads, *x, Tensor::from_parts(s, out));
            }
            Op::Softmax(a) => {
                let (rows, d) = last_axis(y.shape());
                let mut out = vec![T::zero(); y.len()];
                for r in 0..rows {
                    let yr = &y.data()[r * d..(r + 1) * d];
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for j in 0..d {
                        out[r * d + j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(grads, *a, Tensor::from_parts(y.shape().to_vec(), out));
            }
            Op::LayerNorm { x, inv_std } => {
                let (rows, d) = last_axis(y.shape());
                let dn = T::of(d as f64);
                let mut out = vec![T::zero(); y.len()];
                for r in 0..rows {
                    let yr = &y.data()[r * d..(r + 1) * d];
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let mg = gr.iter().copied().sum::<T>() / dn;
                    let mgy = gr.iter().zip(yr).map(|(&p, &q)| p * q).sum::<T>() / dn;
                    for j in 0..d {
                        out[r * d + j] = inv_std[r] * (gr[j] - mg - yr[j] * mgy);
                    }
                }
                acc(grads, *x, Tensor::from_parts(y.shape().to_vec(), out));
            }
            Op::Silu(a) => {
                let d = g
                    .zip_map(val(*a), |gv, x| {
                        let s = T::one() / (T::one() + (-x).exp());
                        gv * s * (T::one() + x * (T::one() - s))
                    })
                    .unwrap();
                acc(grads, *a, d);
            }
            Op::Sin(a) => acc(grads, *a, g.zip_map(val(*a), |gv, x| gv * x.cos()).unwrap()),
            Op::Cos(a) => acc(grads, *a, g.zip_map(val(*a), |gv, x| -gv * x.sin()).unwrap()),
            Op::Sqrt(a) => {
                let two = T::of(2.0);
                acc(grads, *a, g.zip_map(y, |gv, s| gv / (two * s)).unwrap());
            }
            Op::Exp(a) => acc(grads, *a, g.zip_map(y, |gv, e| gv * e).unwrap()),
            Op::Log(a) => acc(grads, *a, g.zip_map(val(*a), |gv, x| gv / x).unwrap()),
            Op::L2Normalize { x, norms } => {
                let (rows, d) = last_axis(y.shape());
                let mut out = vec![T::zero(); y.len()];
                for r in 0..rows {
                    let yr = &y.data()[r * d..(r + 1) * d];
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for j in 0..d {
                        out[r * d + j] = (gr[j] - yr[j] * dot) / norms[r];
                    }
                }
                acc(grads, *x, Tensor::from_parts(y.shape().to_vec(), out));
            }
        }
    }
}

fn acc<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += *x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

struct MatMulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_batched: bool,
    b_batched: bool,
    out_shape: Vec<usize>,
}

fn matmul_dims(sa: &[usize], sb: &[usize]) -> Result<MatMulDims> {
    let bad = || Error::shape("matmul", format!("{sa:?} x {sb:?}"));
    let (batch, a_batched, b_batched, m, ka, kb, n) = match (sa.len(), sb.len()) {
        (2, 2) => (1, false, false, sa[0], sa[1], sb[0], sb[1]),
        (3, 3) => {
            if sa[0] != sb[0] {
                return Err(bad());
            }
            (sa[0], true, true, sa[1], sa[2], sb[1], sb[2])
        }
        (3, 2) => (sa[0], true, false, sa[1], sa[2], sb[0], sb[1]),
        (2, 3) => (sb[0], false, true, sa[0], sa[1], sb[1], sb[2]),
        _ => return Err(bad()),
    };
    if ka != kb {
        return Err(bad());
    }
    let out_shape = if a_batched || b_batched {
        vec![batch, m, n]
    } else {
        vec![m, n]
    };
    Ok(MatMulDims {
        batch,
        m,
        k: ka,
        n,
        a_batched,
        b_batched,
        out_shape,
    })
}

fn transpose_last2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let r = s.len();
    let (rows, cols) = (s[r - 2], s[r - 1]);
    let batch = x.len() / (rows * cols);
    let mut out = vec![T::zero(); x.len()];
    for b in 0..batch {
        let src = &x.data()[b * rows * cols..(b + 1) * rows * cols];
        let dst = &mut out[b * rows * cols..(b + 1) * rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                dst[j * rows + i] = src[i * cols + j];
            }
        }
    }
    let mut shape = s.to_vec();
    shape.swap(r - 2, r - 1);
    Tensor::from_parts(shape, out)
}

/// Adjoints produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf (input, constant or parameter); interior nodes give `None`.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros when `v` is detached from the loss.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
}
