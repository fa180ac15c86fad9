use std::sync::{Arc, OnceLock};

use super::{numel, Scalar, Tensor, SELU_ALPHA, SELU_LAMBDA};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Bmm(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Selu(Var),
    LogFloor(Var, f64),
    Softmax(Var, usize),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    SumAxis(Var, usize),
    SumAll(Var),
    Norm(Var, usize),
    Squash(Var),
    Repeat(Var, usize),
    Gather { table: Var, ids: Arc<[usize]>, skip_pad: bool },
    MaxPool { x: Var, argmax: Vec<usize> },
    Pad { x: Var, axis: usize, before: usize },
    Pick { x: Var, idx: Vec<usize> },
    /// Whole GRU recurrence; `gates` caches `z`, `r` and the candidate per position.
    GruSeq {
        xp: Var,
        wzr: Var,
        whh: Var,
        mask: Option<Var>,
        reverse: bool,
        gates: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Bmm(..) => "bmm",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Affine(..) => "affine",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Selu(_) => "selu",
            Op::LogFloor(..) => "log",
            Op::Softmax(..) => "softmax",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(_) => "reshape",
            Op::Permute(..) => "permute",
            Op::SumAxis(..) => "reduce_sum",
            Op::SumAll(_) => "sum",
            Op::Norm(..) => "norm",
            Op::Squash(_) => "squash",
            Op::Repeat(..) => "repeat",
            Op::Gather { .. } => "gather",
            Op::MaxPool { .. } => "max_pool",
            Op::Pad { .. } => "pad",
            Op::Pick { .. } => "pick",
            Op::GruSeq { .. } => "gru_sequence",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

fn check_finite_enabled() -> bool {
    static FLAG: OnceLock<bool> = OnceLock::new();
    *FLAG.get_or_init(|| {
        cfg!(debug_assertions)
            || std::env::var("BGC_CHECK_FINITE").is_ok_and(|v| v == "1")
    })
}

/// Splits `shape` around `axis` into `(outer, extent, inner)` element counts.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Norm of a slice, scaled by the largest magnitude so it never overflows.
fn stable_norm<T: Scalar>(xs: &[T]) -> T {
    let m = xs.iter().fold(T::zero(), |m, x| m.max(x.abs()));
    if m == T::zero() || !m.is_finite() {
        return m;
    }
    let ss: T = xs.iter().map(|&x| (x / m) * (x / m)).sum();
    m * ss.sqrt()
}

/// `n / (1 + n²)`, the factor squash applies to its input.
fn squash_gain<T: Scalar>(n: T) -> T {
    if n > T::one() {
        T::one() / (n + T::one() / n)
    } else {
        n / (T::one() + n * n)
    }
}

/// Derivative of [`squash_gain`], `(1 − n²)/(1 + n²)²`.
fn squash_gain_slope<T: Scalar>(n: T) -> T {
    let one = T::one();
    if n > one {
        let inv2 = one / (n * n);
        (inv2 * inv2 - inv2) / ((one + inv2) * (one + inv2))
    } else {
        let d = one + n * n;
        (one - n * n) / (d * d)
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Squash applied to one capsule vector.
pub(crate) fn squash_slice<T: Scalar>(s: &[T], out: &mut [T]) {
    let n = stable_norm(s);
    if n == T::zero() {
        out.iter_mut().for_each(|o| *o = T::zero());
        return;
    }
    let g = squash_gain(n);
    for (o, &x) in out.iter_mut().zip(s) {
        *o = g * x;
    }
}

/// Records differentiable tensor operations for one forward pass.
///
/// A tape is append-only; build a fresh one per forward pass and drop it after
/// [`Tape::backward`].
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A value that gradients do not flow into.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
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
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>) -> Var {
        if check_finite_enabled() && data.iter().any(|x| !x.is_finite()) {
            panic!("non-finite value in output of {}", op.name());
        }
        let needs_grad = self.inputs(&op).iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Tensor::from_parts(shape, data),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn inputs(&self, op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Bmm(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                vec![*a, *b]
            }
            Op::Affine(x, _)
            | Op::Sigmoid(x)
            | Op::Tanh(x)
            | Op::Relu(x)
            | Op::Selu(x)
            | Op::LogFloor(x, _)
            | Op::Softmax(x, _)
            | Op::Slice { x, .. }
            | Op::Reshape(x)
            | Op::Permute(x, _)
            | Op::SumAxis(x, _)
            | Op::SumAll(x)
            | Op::Norm(x, _)
            | Op::Squash(x)
            | Op::Repeat(x, _)
            | Op::MaxPool { x, .. }
            | Op::Pad { x, .. }
            | Op::Pick { x, .. } => vec![*x],
            Op::Gather { table, .. } => vec![*table],
            Op::Concat(xs, _) => xs.clone(),
            Op::GruSeq { xp, wzr, whh, mask, .. } => {
                let mut v = vec![*xp, *wzr, *whh];
                v.extend(*mask);
                v
            }
        }
    }

    // ----- linear algebra -----

    /// `[m×k] · [k×n] → [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b)))
    }

    /// Batched product `[B×m×k] · [B×k×n] → [B×m×n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::dim("bmm", sa, sb));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); batch * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for p in 0..batch {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &da[p * m * k..(p + 1) * m * k],
                k as isize,
                1,
                &db[p * k * n..(p + 1) * k * n],
                n as isize,
                1,
                T::zero(),
                &mut out[p * m * n..(p + 1) * m * n],
                n as isize,
                1,
            );
        }
        Ok(self.push(vec![batch, m, n], out, Op::Bmm(a, b)))
    }

    // ----- elementwise -----

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(name, sa, sb));
        }
        let shape = sa.to_vec();
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let op = match name {
            "add" => Op::Add(a, b),
            "sub" => Op::Sub(a, b),
            _ => Op::Mul(a, b),
        };
        Ok(self.push(shape, out, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y)
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y)
    }

    /// `scale·x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (s, c) = (T::lit(scale), T::lit(shift));
        let v = self.value(x);
        let out = v.data().iter().map(|&e| s * e + c).collect();
        self.push(v.shape().to_vec(), out, Op::Affine(x, scale))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.affine(x, factor, 0.0)
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let v = self.value(x);
        let out = v.data().iter().map(|&e| f(e)).collect();
        self.push(v.shape().to_vec(), out, op)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), |e| e.tanh())
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |e| if e > T::zero() { e } else { T::zero() })
    }

    pub fn selu(&mut self, x: Var) -> Var {
        let (lambda, alpha) = (T::lit(SELU_LAMBDA), T::lit(SELU_ALPHA));
        self.unary(x, Op::Selu(x), move |e| {
            if e > T::zero() {
                lambda * e
            } else {
                lambda * alpha * (e.exp() - T::one())
            }
        })
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log_floor(&mut self, x: Var, floor: f64) -> Var {
        let fl = T::lit(floor);
        self.unary(x, Op::LogFloor(x, floor), move |e| e.max(fl).ln())
    }

    // ----- normalisation -----

    /// Softmax along `axis`, shifted by the slice maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("softmax", &shape, &[axis]));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * dim * inner + k * inner + i;
                let mut mx = T::neg_infinity();
                for k in 0..dim {
                    mx = mx.max(src[at(k)]);
                }
                let mut sum = T::zero();
                for k in 0..dim {
                    let e = (src[at(k)] - mx).exp();
                    out[at(k)] = e;
                    sum += e;
                }
                for k in 0..dim {
                    out[at(k)] = out[at(k)] / sum;
                }
            }
        }
        Ok(self.push(shape, out, Op::Softmax(x, axis)))
    }

    /// Capsule squash `‖s‖²/(1+‖s‖²) · s/‖s‖` over the last axis; zero maps to zero.
    pub fn squash(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let Some(&d) = shape.last() else {
            return Err(Error::dim("squash", &shape, &[]));
        };
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for (s, o) in src.chunks(d).zip(out.chunks_mut(d)) {
            squash_slice(s, o);
        }
        Ok(self.push(shape, out, Op::Squash(x)))
    }

    /// Euclidean norm along `axis`, removing it.
    pub fn norm(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("norm", &shape, &[axis]));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        let mut buf = vec![T::zero(); dim];
        for o in 0..outer {
            for i in 0..inner {
                for k in 0..dim {
                    buf[k] = src[o * dim * inner + k * inner + i];
                }
                out[o * inner + i] = stable_norm(&buf);
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        Ok(self.push(out_shape, out, Op::Norm(x, axis)))
    }

    // ----- structural -----

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::Contract("concat of zero tensors".into()));
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat", &base, &[axis]));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(shape, out, Op::Concat(xs.to_vec(), axis)))
    }

    /// Take `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::dim("slice", &shape, &[axis, start, len]));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.push(out_shape, out, Op::Slice { x, axis, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let cur = self.shape(x);
        if numel(shape) != numel(cur) || shape.iter().any(|&d| d == 0) {
            return Err(Error::dim("reshape", cur, shape));
        }
        let data = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), data, Op::Reshape(x)))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len()
            && perm.iter().all(|&p| p < shape.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(Error::dim("permute", &shape, perm));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let out = permute_data(self.value(x).data(), &shape, perm);
        Ok(self.push(out_shape, out, Op::Permute(x, perm.to_vec())))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return Err(Error::dim("transpose", self.shape(x), &[2]));
        }
        self.permute(x, &[1, 0])
    }

    /// Sum along `axis`, removing it.
    pub fn reduce_sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("reduce_sum", &shape, &[axis]));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..dim {
                let row = &src[o * dim * inner + k * inner..][..inner];
                for (dst, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *dst += s;
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        Ok(self.push(out_shape, out, Op::SumAxis(x, axis)))
    }

    /// Sum of every element, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Vec::new(), vec![s], Op::SumAll(x))
    }

    /// Stacks `n` copies of `x` along a new leading axis.
    pub fn repeat(&mut self, x: Var, n: usize) -> Result<Var> {
        if n == 0 {
            return Err(Error::Contract("repeat count must be >= 1".into()));
        }
        let v = self.value(x);
        let mut shape = vec![n];
        shape.extend_from_slice(v.shape());
        let mut out = Vec::with_capacity(n * v.len());
        for _ in 0..n {
            out.extend_from_slice(v.data());
        }
        Ok(self.push(shape, out, Op::Repeat(x, n)))
    }

    /// Zero padding along `axis`.
    pub fn pad(&mut self, x: Var, axis: usize, before: usize, after: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("pad", &shape, &[axis]));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let padded = dim + before + after;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * padded * inner];
        for o in 0..outer {
            let dst = o * padded * inner + before * inner;
            out[dst..dst + dim * inner].copy_from_slice(&src[o * dim * inner..(o + 1) * dim * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = padded;
        Ok(self.push(out_shape, out, Op::Pad { x, axis, before }))
    }

    // ----- indexing -----

    /// Row lookup `table[ids[i]]`, giving `[ids.len() × E]`.
    ///
    /// With `skip_pad`, row 0 never receives gradient.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize], skip_pad: bool) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 || ids.is_empty() {
            return Err(Error::dim("gather", &shape, &[ids.len()]));
        }
        let (rows, width) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Data(format!(
                "token index {bad} outside embedding table with {rows} rows"
            )));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * width);
        for &i in ids {
            out.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        Ok(self.push(
            vec![ids.len(), width],
            out,
            Op::Gather {
                table,
                ids: ids.into(),
                skip_pad,
            },
        ))
    }

    /// From `[N×C]`, picks `x[n, idx[n]]` giving `[N]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || shape[0] != idx.len() {
            return Err(Error::dim("pick", &shape, &[idx.len()]));
        }
        let c = shape[1];
        if let Some(&bad) = idx.iter().find(|&&i| i >= c) {
            return Err(Error::Data(format!("label {bad} out of range for {c} classes")));
        }
        let src = self.value(x).data();
        let out = idx.iter().enumerate().map(|(n, &i)| src[n * c + i]).collect();
        Ok(self.push(vec![idx.len()], out, Op::Pick { x, idx: idx.to_vec() }))
    }

    /// Non-overlapping max over windows of axis 1 of `[N×T×F]`; a trailing
    /// remainder shorter than `window` is dropped. Ties go to the earliest position.
    pub fn max_pool(&mut self, x: Var, window: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if window == 0 {
            return Err(Error::Contract("max-pool window must be >= 1".into()));
        }
        if shape.len() != 3 || shape[1] < window {
            return Err(Error::dim("max_pool", &shape, &[window]));
        }
        let (n, t, f) = (shape[0], shape[1], shape[2]);
        let pooled = t / window;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * pooled * f);
        let mut argmax = Vec::with_capacity(n * pooled * f);
        for b in 0..n {
            for p in 0..pooled {
                for c in 0..f {
                    let start = b * t * f + p * window * f + c;
                    let mut best = start;
                    for w in 1..window {
                        let at = start + w * f;
                        if src[at] > src[best] {
                            best = at;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        Ok(self.push(vec![n, pooled, f], out, Op::MaxPool { x, argmax }))
    }

    // ----- fused recurrence -----

    /// GRU recurrence over pre-projected inputs, as one tape node.
    ///
    /// `xp: [N × T × 3H]` holds `x_t·W_x + b` for the update gate, reset gate
    /// and candidate (in that order); `wzr: [H × 2H]` and `whh: [H × H]` are the
    /// recurrent weights. With `h_in = h_{t−1} ⊙ mask`:
    ///
    /// ```text
    /// [z, r] = σ(h_in·wzr + xp_t[..2H])
    /// h̃     = tanh((r ⊙ h_in)·whh + xp_t[2H..])
    /// h_t    = h_{t−1} + z ⊙ (h̃ − h_{t−1})
    /// ```
    ///
    /// Positions run backwards when `reverse`; the output `[N × T × H]` is
    /// indexed by position either way. The state starts at zero.
    pub fn gru_recurrence(
        &mut self,
        xp: Var,
        wzr: Var,
        whh: Var,
        mask: Option<Var>,
        reverse: bool,
    ) -> Result<Var> {
        let sx = self.shape(xp).to_vec();
        let hidden = self.shape(whh)[0];
        if sx.len() != 3
            || sx[2] != 3 * hidden
            || self.shape(whh) != [hidden, hidden]
            || self.shape(wzr) != [hidden, 2 * hidden]
        {
            return Err(Error::dim("gru_recurrence", &sx, self.shape(wzr)));
        }
        if let Some(m) = mask {
            if self.shape(m) != [sx[0], hidden] {
                return Err(Error::dim("gru_recurrence mask", self.shape(m), &[sx[0], hidden]));
            }
        }
        let (n, steps, h) = (sx[0], sx[1], hidden);
        let nh = n * h;
        let xv = self.value(xp).data();
        let (wzr_v, whh_v) = (self.value(wzr).data(), self.value(whh).data());
        let mv = mask.map(|m| self.value(m).data());

        let mut out = vec![T::zero(); n * steps * h];
        let mut gates = vec![T::zero(); steps * 3 * nh];
        let mut prev = vec![T::zero(); nh];
        let mut h_in = vec![T::zero(); nh];
        let mut pre = vec![T::zero(); 2 * nh];
        let mut cand = vec![T::zero(); nh];
        for k in 0..steps {
            let t = if reverse { steps - 1 - k } else { k };
            for (i, v) in h_in.iter_mut().enumerate() {
                *v = mv.map_or(prev[i], |m| prev[i] * m[i]);
            }
            T::gemm(n, h, 2 * h, T::one(), &h_in, h as isize, 1, wzr_v, 2 * h as isize, 1, T::zero(), &mut pre, 2 * h as isize, 1);
            let cache = &mut gates[t * 3 * nh..(t + 1) * 3 * nh];
            let (zc, rest) = cache.split_at_mut(nh);
            let (rc, cc) = rest.split_at_mut(nh);
            for b in 0..n {
                let x_row = &xv[(b * steps + t) * 3 * h..][..3 * h];
                for j in 0..h {
                    zc[b * h + j] = sigmoid(pre[b * 2 * h + j] + x_row[j]);
                    rc[b * h + j] = sigmoid(pre[b * 2 * h + h + j] + x_row[h + j]);
                }
            }
            for i in 0..nh {
                h_in[i] *= rc[i];
            }
            T::gemm(n, h, h, T::one(), &h_in, h as isize, 1, whh_v, h as isize, 1, T::zero(), &mut cand, h as isize, 1);
            for b in 0..n {
                let x_row = &xv[(b * steps + t) * 3 * h + 2 * h..][..h];
                let o_row = &mut out[(b * steps + t) * h..][..h];
                for j in 0..h {
                    let i = b * h + j;
                    let c = (cand[i] + x_row[j]).tanh();
                    cc[i] = c;
                    let hv = prev[i] + zc[i] * (c - prev[i]);
                    o_row[j] = hv;
                    prev[i] = hv;
                }
            }
        }
        let op = Op::GruSeq { xp, wzr, whh, mask, reverse, gates };
        Ok(self.push(vec![n, steps, h], out, op))
    }

    // ----- reverse pass -----

    /// Reverse-mode sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(id);
            let Some(g) = upper[0].as_deref() else {
                continue;
            };
            self.propagate(id, g, lower);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn slot<'a>(&self, lower: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        Some(lower[v.0].get_or_insert_with(|| vec![T::zero(); node.value.len()]))
    }

    fn propagate(&self, id: usize, g: &[T], lower: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(lower, *a) {
                    // ga += g · bᵀ
                    T::gemm(m, n, k, T::one(), g, n as isize, 1, bv, 1, n as isize, T::one(), ga, k as isize, 1);
                }
                if let Some(gb) = self.slot(lower, *b) {
                    // gb += aᵀ · g
                    T::gemm(k, m, n, T::one(), av, 1, k as isize, g, n as isize, 1, T::one(), gb, n as isize, 1);
                }
            }
            Op::Bmm(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(lower, *a) {
                    for p in 0..batch {
                        T::gemm(
                            m, n, k, T::one(),
                            &g[p * m * n..(p + 1) * m * n], n as isize, 1,
                            &bv[p * k * n..(p + 1) * k * n], 1, n as isize,
                            T::one(), &mut ga[p * m * k..(p + 1) * m * k], k as isize, 1,
                        );
                    }
                }
                if let Some(gb) = self.slot(lower, *b) {
                    for p in 0..batch {
                        T::gemm(
                            k, m, n, T::one(),
                            &av[p * m * k..(p + 1) * m * k], 1, k as isize,
                            &g[p * m * n..(p + 1) * m * n], n as isize, 1,
                            T::one(), &mut gb[p * k * n..(p + 1) * k * n], n as isize, 1,
                        );
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.slot(lower, v) {
                        gv.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(lower, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                }
                if let Some(gb) = self.slot(lower, *b) {
                    gb.iter_mut().zip(g).for_each(|(d, &s)| *d -= s);
                }
            }
            Op::Mul(a, b) => {
                let bv = self.value(*b).data();
                if let Some(ga) = self.slot(lower, *a) {
                    for ((d, &s), &o) in ga.iter_mut().zip(g).zip(bv) {
                        *d += s * o;
                    }
                }
                let av = self.value(*a).data();
                if let Some(gb) = self.slot(lower, *b) {
                    for ((d, &s), &o) in gb.iter_mut().zip(g).zip(av) {
                        *d += s * o;
                    }
                }
            }
            Op::Affine(x, scale) => {
                let s = T::lit(*scale);
                if let Some(gx) = self.slot(lower, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, &u)| *d += s * u);
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = self.slot(lower, *x) {
                    for ((d, &u), &o) in gx.iter_mut().zip(g).zip(y) {
                        *d += u * o * (T::one() - o);
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(gx) = self.slot(lower, *x) {
                    for ((d, &u), &o) in gx.iter_mut().zip(g).zip(y) {
                        *d += u * (T::one() - o * o);
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.slot(lower, *x) {
                    for ((d, &u), &e) in gx.iter_mut().zip(g).zip(xv) {
                        if e > T::zero() {
                            *d += u;
                        }
                    }
                }
            }
            Op::Selu(x) => {
                let (lambda, alpha) = (T::lit(SELU_LAMBDA), T::lit(SELU_ALPHA));
                let xv = self.value(*x).data();
                if let Some(gx) = self.slot(lower, *x) {
                    for ((d, &u), &e) in gx.iter_mut().zip(g).zip(xv) {
                        *d += if e > T::zero() {
                            u * lambda
                        } else {
                            u * lambda * alpha * e.exp()
                        };
                    }
                }
            }
            Op::LogFloor(x, floor) => {
                let fl = T::lit(*floor);
                let xv = self.value(*x).data();
                if let Some(gx) = self.slot(lower, *x) {
                    for ((d, &u), &e) in gx.iter_mut().zip(g).zip(xv) {
                        if e > fl {
                            *d += u / e;
                        }
                    }
                }
            }
            Op::Softmax(x, axis) => {
                let (outer, dim, inner) = split_axis(node.value.shape(), *axis);
                if let Some(gx) = self.slot(lower, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| o * dim * inner + k * inner + i;
                            let dot: T = (0..dim).map(|k| g[at(k)] * y[at(k)]).sum();
                            for k in 0..dim {
                                gx[at(k)] += y[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Squash(x) => {
                let d = *node.value.shape().last().unwrap();
                let xv = self.value(*x).data();
                if let Some(gx) = self.slot(lower, *x) {
                    for ((s, gv), dst) in xv.chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d)) {
                        let n = stable_norm(s);
                        if n == T::zero() {
                            continue;
                        }
                        // J = g·I + n·g'(n)·ûûᵀ with û = s/n; the unit-vector form
                        // cannot overflow for tiny norms
                        let gain = squash_gain(n);
                        let slope = n * squash_gain_slope(n);
                        let udotg: T = s.iter().zip(gv).map(|(&a, &b)| (a / n) * b).sum();
                        for ((o, &si), &gi) in dst.iter_mut().zip(s).zip(gv) {
                            *o += gain * gi + slope * udotg * (si / n);
                        }
                    }
                }
            }
            Op::Norm(x, axis) => {
                let xs = self.shape(*x);
                let (outer, dim, inner) = split_axis(xs, *axis);
                let xv = self.value(*x).data();
                if let Some(gx) = self.slot(lower, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let n = y[o * inner + i];
                            if n == T::zero() {
                                continue;
                            }
                            let u = g[o * inner + i];
                            for k in 0..dim {
                                let at = o * dim * inner + k * inner + i;
                                gx[at] += u * xv[at] / n;
                            }
                        }
                    }
                }
            }
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in xs {
                    let extent = self.shape(v)[*axis];
                    if let Some(gv) = self.slot(lower, v) {
                        let chunk = extent * inner;
                        for o in 0..outer {
                            let src = &g[o * total * inner + offset * inner..][..chunk];
                            gv[o * chunk..(o + 1) * chunk]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, &s)| *d += s);
                        }
                    }
                    offset += extent;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, dim, inner) = split_axis(self.shape(*x), *axis);
                let len = node.value.shape()[*axis];
                if let Some(gx) = self.slot(lower, *x) {
                    for o in 0..outer {
                        let dst = o * dim * inner + start * inner;
                        gx[dst..dst + len * inner]
                            .iter_mut()
                            .zip(&g[o * len * inner..(o + 1) * len * inner])
                            .for_each(|(d, &s)| *d += s);
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.slot(lower, *x) {
                    gx.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                }
            }
            Op::Permute(x, perm) => {
                if let Some(gx) = self.slot(lower, *x) {
                    let mut inverse = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inverse[p] = i;
                    }
                    let back = permute_data(g, node.value.shape(), &inverse);
                    gx.iter_mut().zip(&back).for_each(|(d, &s)| *d += s);
                }
            }
            Op::SumAxis(x, axis) => {
                let (outer, dim, inner) = split_axis(self.shape(*x), *axis);
                if let Some(gx) = self.slot(lower, *x) {
                    for o in 0..outer {
                        for k in 0..dim {
                            let dst = &mut gx[o * dim * inner + k * inner..][..inner];
                            dst.iter_mut()
                                .zip(&g[o * inner..(o + 1) * inner])
                                .for_each(|(d, &s)| *d += s);
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if let Some(gx) = self.slot(lower, *x) {
                    let u = g[0];
                    gx.iter_mut().for_each(|d| *d += u);
                }
            }
            Op::Repeat(x, n) => {
                if let Some(gx) = self.slot(lower, *x) {
                    let len = gx.len();
                    for c in 0..*n {
                        gx.iter_mut()
                            .zip(&g[c * len..(c + 1) * len])
                            .for_each(|(d, &s)| *d += s);
                    }
                }
            }
            Op::Pad { x, axis, before } => {
                let (outer, dim, inner) = split_axis(self.shape(*x), *axis);
                let padded = node.value.shape()[*axis];
                if let Some(gx) = self.slot(lower, *x) {
                    for o in 0..outer {
                        let src = &g[o * padded * inner + before * inner..][..dim * inner];
                        gx[o * dim * inner..(o + 1) * dim * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, &s)| *d += s);
                    }
                }
            }
            Op::Gather {
                table,
                ids,
                skip_pad,
            } => {
                let width = self.shape(*table)[1];
                if let Some(gt) = self.slot(lower, *table) {
                    for (r, &i) in ids.iter().enumerate() {
                        if *skip_pad && i == 0 {
                            continue;
                        }
                        gt[i * width..(i + 1) * width]
                            .iter_mut()
                            .zip(&g[r * width..(r + 1) * width])
                            .for_each(|(d, &s)| *d += s);
                    }
                }
            }
            Op::Pick { x, idx } => {
                let c = self.shape(*x)[1];
                if let Some(gx) = self.slot(lower, *x) {
                    for (n, &i) in idx.iter().enumerate() {
                        gx[n * c + i] += g[n];
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                if let Some(gx) = self.slot(lower, *x) {
                    for (&at, &u) in argmax.iter().zip(g) {
                        gx[at] += u;
                    }
                }
            }
            Op::GruSeq { xp, wzr, whh, mask, reverse, gates } => {
                self.gru_backward(node.value.data(), g, lower, [*xp, *wzr, *whh], *mask, *reverse, gates);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn gru_backward(
        &self,
        out: &[T],
        g: &[T],
        lower: &mut [Option<Vec<T>>],
        [xp, wzr, whh]: [Var; 3],
        mask: Option<Var>,
        reverse: bool,
        gates: &[T],
    ) {
        let sx = self.shape(xp);
        let (n, steps, h) = (sx[0], sx[1], sx[2] / 3);
        let nh = n * h;
        let (wzr_v, whh_v) = (self.value(wzr).data(), self.value(whh).data());
        let mv = mask.map(|m| self.value(m).data());
        let need = |v: Var| self.nodes[v.0].needs_grad;
        let mut gxp = need(xp).then(|| vec![T::zero(); n * steps * 3 * h]);
        let mut gwzr = need(wzr).then(|| vec![T::zero(); 2 * h * h]);
        let mut gwhh = need(whh).then(|| vec![T::zero(); h * h]);
        let mut gmask = mask.filter(|&m| need(m)).map(|_| vec![T::zero(); nh]);

        let zero = vec![T::zero(); nh];
        let mut prev = vec![T::zero(); nh];
        let mut carry = vec![T::zero(); nh];
        let mut h_in = vec![T::zero(); nh];
        let mut rh = vec![T::zero(); nh];
        let mut dcp = vec![T::zero(); nh];
        let mut drh = vec![T::zero(); nh];
        let mut da = vec![T::zero(); 2 * nh];
        let mut dh_in = vec![T::zero(); nh];
        for k in (0..steps).rev() {
            let t = if reverse { steps - 1 - k } else { k };
            // state entering position t
            if k == 0 {
                prev.copy_from_slice(&zero);
            } else {
                let tp = if reverse { t + 1 } else { t - 1 };
                for b in 0..n {
                    prev[b * h..(b + 1) * h].copy_from_slice(&out[(b * steps + tp) * h..][..h]);
                }
            }
            let cache = &gates[t * 3 * nh..(t + 1) * 3 * nh];
            let (zc, rest) = cache.split_at(nh);
            let (rc, cc) = rest.split_at(nh);
            for i in 0..nh {
                h_in[i] = mv.map_or(prev[i], |m| prev[i] * m[i]);
                rh[i] = rc[i] * h_in[i];
            }
            // carry becomes dL/dh_t, then dL/dz and friends
            for b in 0..n {
                for j in 0..h {
                    let i = b * h + j;
                    let dh = carry[i] + g[(b * steps + t) * h + j];
                    let (z, c) = (zc[i], cc[i]);
                    dcp[i] = dh * z * (T::one() - c * c);
                    da[b * 2 * h + j] = dh * (c - prev[i]) * z * (T::one() - z);
                    carry[i] = dh * (T::one() - z);
                }
            }
            if let Some(gw) = gwhh.as_mut() {
                T::gemm(h, n, h, T::one(), &rh, 1, h as isize, &dcp, h as isize, 1, T::one(), gw, h as isize, 1);
            }
            T::gemm(n, h, h, T::one(), &dcp, h as isize, 1, whh_v, 1, h as isize, T::zero(), &mut drh, h as isize, 1);
            for b in 0..n {
                for j in 0..h {
                    let i = b * h + j;
                    let r = rc[i];
                    da[b * 2 * h + h + j] = drh[i] * h_in[i] * r * (T::one() - r);
                    dh_in[i] = drh[i] * r;
                }
            }
            if let Some(gw) = gwzr.as_mut() {
                T::gemm(h, n, 2 * h, T::one(), &h_in, 1, h as isize, &da, 2 * h as isize, 1, T::one(), gw, 2 * h as isize, 1);
            }
            T::gemm(n, 2 * h, h, T::one(), &da, 2 * h as isize, 1, wzr_v, 1, 2 * h as isize, T::one(), &mut dh_in, h as isize, 1);
            if let Some(gx) = gxp.as_mut() {
                for b in 0..n {
                    let row = &mut gx[(b * steps + t) * 3 * h..][..3 * h];
                    row[..2 * h].copy_from_slice(&da[b * 2 * h..(b + 1) * 2 * h]);
                    row[2 * h..].copy_from_slice(&dcp[b * h..(b + 1) * h]);
                }
            }
            for i in 0..nh {
                if let Some(gm) = gmask.as_mut() {
                    gm[i] += dh_in[i] * prev[i];
                }
                carry[i] += mv.map_or(dh_in[i], |m| dh_in[i] * m[i]);
            }
        }
        let mut add = |v: Var, src: Option<Vec<T>>| {
            if let (Some(src), Some(dst)) = (src, self.slot(lower, v)) {
                dst.iter_mut().zip(&src).for_each(|(d, &s)| *d += s);
            }
        };
        add(xp, gxp);
        add(wzr, gwzr);
        add(whh, gwhh);
        if let Some(m) = mask {
            add(m, gmask);
        }
    }
}

fn permute_data<T: Scalar>(src: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = src.len();
    let mut out = Vec::with_capacity(total);
    if rank == 0 {
        out.extend_from_slice(src);
        return out;
    }
    let last = rank - 1;
    let (inner_len, inner_step) = (out_shape[last], step[last]);
    let mut index = vec![0usize; rank];
    let mut base = 0usize;
    while out.len() < total {
        let mut at = base;
        for _ in 0..inner_len {
            out.push(src[at]);
            at += inner_step;
        }
        // odometer over the outer axes
        let mut ax = last;
        while ax > 0 {
            ax -= 1;
            index[ax] += 1;
            base += step[ax];
            if index[ax] < out_shape[ax] {
                break;
            }
            base -= step[ax] * out_shape[ax];
            index[ax] = 0;
        }
    }
    out
}

/// Result of [`Tape::backward`]: one gradient per recorded node.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`; zeros when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Tensor<T> {
        let shape = self.shapes[v.0].clone();
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(shape),
        }
    }

    /// Gradient if one was accumulated.
    pub fn try_get(&self, v: Var) -> Option<Tensor<T>> {
        self.grads
            .get(v.0)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor::from_parts(self.shapes[v.0].clone(), g.clone()))
    }

    /// Moves a gradient out without copying.
    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get_mut(v.0)?.take()?;
        Some(Tensor::from_parts(self.shapes[v.0].clone(), g))
    }
}
