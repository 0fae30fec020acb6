//! Primitive operations on [`Var`] and their backward rules.
//!
//! Every backward rule is written with `Var` operations, so gradients are
//! themselves differentiable.

use crate::broadcast::{broadcast_shape, broadcast_to, broadcasts_into, sum_to, zip_broadcast};
use crate::error::{AdError, Result};
use crate::linalg;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Constant,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    Offset,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Softplus,
    Relu,
    Square,
    Sqrt,
    Clamp(f64, f64),
    Identity,
    SumTo,
    BroadcastTo,
    Reshape,
    MatMul,
    Transpose,
    Concat(usize),
    Slice { axis: usize, start: usize },
    Pad { axis: usize, start: usize },
    Cholesky,
    TriSolve { transpose: bool },
    LogDet,
    InverseSpd,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn lower_mask(d: usize, diag: f64) -> Tensor {
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..i {
            m[i * d + j] = 1.0;
        }
        m[i * d + i] = diag;
    }
    Tensor::from_parts(vec![d, d], m)
}

impl Op {
    /// Contributions of the output adjoint `g` to each parent adjoint.
    pub(crate) fn vjp(
        &self,
        tape: &Tape,
        id: usize,
        parents: &[usize],
        g: &Var,
        needs: &[bool],
    ) -> Result<Vec<Option<Var>>> {
        let p = |i: usize| tape.var(parents[i]);
        let out = || tape.var(id);
        let shape_of = |i: usize| tape.value(parents[i]).shape().to_vec();
        let want = |i: usize| needs.get(i).copied().unwrap_or(false);
        let one = |v: Result<Var>| -> Result<Vec<Option<Var>>> { Ok(vec![Some(v?)]) };
        match self {
            Op::Leaf | Op::Constant => Ok(Vec::new()),
            Op::Add | Op::Sub => {
                let ga = if want(0) { Some(g.sum_to(&shape_of(0))?) } else { None };
                let gb = if want(1) {
                    let gb = g.sum_to(&shape_of(1))?;
                    Some(if matches!(self, Op::Sub) { gb.neg() } else { gb })
                } else {
                    None
                };
                Ok(vec![ga, gb])
            }
            Op::Mul => {
                let ga = if want(0) { Some(g.mul(&p(1))?.sum_to(&shape_of(0))?) } else { None };
                let gb = if want(1) { Some(g.mul(&p(0))?.sum_to(&shape_of(1))?) } else { None };
                Ok(vec![ga, gb])
            }
            Op::Div => {
                let ga = if want(0) { Some(g.div(&p(1))?.sum_to(&shape_of(0))?) } else { None };
                let gb = if want(1) {
                    Some(g.mul(&out())?.div(&p(1))?.neg().sum_to(&shape_of(1))?)
                } else {
                    None
                };
                Ok(vec![ga, gb])
            }
            Op::Neg => Ok(vec![Some(g.neg())]),
            Op::Scale(c) => Ok(vec![Some(g.scale(*c))]),
            Op::Offset | Op::Identity => Ok(vec![Some(g.identity())]),
            Op::Exp => one(g.mul(&out())),
            Op::Log => one(g.div(&p(0))),
            Op::Tanh => {
                let y = out();
                one(g.sub(&g.mul(&y.square())?))
            }
            Op::Sigmoid => {
                let y = out();
                one(g.mul(&y)?.mul(&y.neg().offset(1.0)))
            }
            Op::Softplus => one(g.mul(&p(0).sigmoid())),
            Op::Relu => {
                let mask = tape.value(parents[0]).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                one(g.mul(&tape.constant(mask)))
            }
            Op::Square => one(g.mul(&p(0))?.scale(2.0).pipe(Ok)),
            Op::Sqrt => one(g.div(&out()).map(|v| v.scale(0.5))),
            Op::Clamp(lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let mask = tape
                    .value(parents[0])
                    .map(|x| if x > lo && x < hi { 1.0 } else { 0.0 });
                one(g.mul(&tape.constant(mask)))
            }
            Op::SumTo => one(g.broadcast_to(&shape_of(0))),
            Op::BroadcastTo => one(g.sum_to(&shape_of(0))),
            Op::Reshape => one(g.reshape(&shape_of(0))),
            Op::MatMul => {
                let ga = if want(0) { Some(g.matmul(&p(1).transpose()?)?) } else { None };
                let gb = if want(1) { Some(p(0).transpose()?.matmul(g)?) } else { None };
                Ok(vec![ga, gb])
            }
            Op::Transpose => one(g.transpose()),
            Op::Concat(axis) => {
                let mut start = 0;
                let mut res = Vec::with_capacity(parents.len());
                for i in 0..parents.len() {
                    let len = shape_of(i)[*axis];
                    res.push(if want(i) { Some(g.slice(*axis, start, len)?) } else { None });
                    start += len;
                }
                Ok(res)
            }
            Op::Slice { axis, start } => one(g.pad(*axis, *start, &shape_of(0))),
            Op::Pad { axis, start } => {
                let len = shape_of(0)[*axis];
                one(g.slice(*axis, *start, len))
            }
            Op::Cholesky => {
                // A = L·Lᵀ: Ā = sym(L⁻ᵀ Φ(Lᵀ L̄) L⁻¹), Φ = lower part with halved diagonal.
                let l = out();
                let d = *shape_of(0).last().unwrap();
                let phi = tape.constant(lower_mask(d, 0.5));
                let p_mat = l.transpose()?.matmul(g)?.mul(&phi)?;
                let q = l.trisolve(&p_mat, true)?;
                let s_t = l.trisolve(&q.transpose()?, true)?;
                one(s_t.add(&s_t.transpose()?).map(|v| v.scale(0.5)))
            }
            Op::TriSolve { transpose } => {
                let (l, x) = (p(0), out());
                let d = *shape_of(0).last().unwrap();
                let tril = tape.constant(lower_mask(d, 1.0));
                let gb = l.trisolve(g, !transpose)?;
                let gl = if want(0) {
                    let outer = if *transpose {
                        x.matmul(&gb.transpose()?)?
                    } else {
                        gb.matmul(&x.transpose()?)?
                    };
                    Some(outer.mul(&tril)?.neg())
                } else {
                    None
                };
                Ok(vec![gl, if want(1) { Some(gb) } else { None }])
            }
            Op::LogDet => {
                let mut s = g.shape();
                s.extend([1, 1]);
                one(g.reshape(&s)?.mul(&p(0).inverse_spd()?))
            }
            Op::InverseSpd => {
                let yt = out().transpose()?;
                one(yt.matmul(g)?.matmul(&yt).map(|v| v.neg()))
            }
        }
    }
}

trait Pipe: Sized {
    fn pipe<T>(self, f: impl FnOnce(Self) -> T) -> T {
        f(self)
    }
}
impl<T> Pipe for T {}

impl Var {
    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let v = self.value().map(f);
        self.tape.push(v, op, vec![self.id])
    }

    fn binary(&self, other: &Var, op: Op, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        if !self.tape.same(&other.tape) {
            return Err(AdError::TapeMismatch);
        }
        let (a, b) = (self.value(), other.value());
        let out = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| AdError::ShapeMismatch {
            op: name,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })?;
        let data = zip_broadcast(a.data(), a.shape(), b.data(), b.shape(), &out, f);
        Ok(self
            .tape
            .push(Tensor::from_parts(out, data), op, vec![self.id, other.id]))
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.binary(other, Op::Add, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.binary(other, Op::Sub, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.binary(other, Op::Mul, "mul", |a, b| a * b)
    }

    pub fn div(&self, other: &Var) -> Result<Var> {
        self.binary(other, Op::Div, "div", |a, b| a / b)
    }

    pub fn neg(&self) -> Var {
        self.unary(Op::Neg, |x| -x)
    }

    pub fn scale(&self, c: f64) -> Var {
        self.unary(Op::Scale(c), |x| c * x)
    }

    /// `self + c` for a constant `c`.
    pub fn offset(&self, c: f64) -> Var {
        self.unary(Op::Offset, |x| x + c)
    }

    pub fn exp(&self) -> Var {
        self.unary(Op::Exp, f64::exp)
    }

    pub fn log(&self) -> Var {
        self.unary(Op::Log, f64::ln)
    }

    pub fn tanh(&self) -> Var {
        self.unary(Op::Tanh, f64::tanh)
    }

    pub fn sigmoid(&self) -> Var {
        self.unary(Op::Sigmoid, sigmoid)
    }

    pub fn softplus(&self) -> Var {
        self.unary(Op::Softplus, softplus)
    }

    pub fn relu(&self) -> Var {
        self.unary(Op::Relu, |x| x.max(0.0))
    }

    pub fn square(&self) -> Var {
        self.unary(Op::Square, |x| x * x)
    }

    pub fn sqrt(&self) -> Var {
        self.unary(Op::Sqrt, f64::sqrt)
    }

    /// Clamps into `[lo, hi]`; the gradient vanishes where the clamp is active.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var {
        self.unary(Op::Clamp(lo, hi), |x| x.clamp(lo, hi))
    }

    /// A new node with the same value. Differentiating with respect to the
    /// alias ignores every other use of `self`.
    pub fn identity(&self) -> Var {
        self.tape
            .push((*self.value()).clone(), Op::Identity, vec![self.id])
    }

    pub fn sum_to(&self, shape: &[usize]) -> Result<Var> {
        let v = self.value();
        if v.shape() == shape {
            return Ok(self.identity());
        }
        if !broadcasts_into(shape, v.shape()) {
            return Err(AdError::ShapeMismatch {
                op: "sum_to",
                lhs: v.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = sum_to(v.data(), v.shape(), shape);
        Ok(self
            .tape
            .push(Tensor::from_parts(shape.to_vec(), data), Op::SumTo, vec![self.id]))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var> {
        let v = self.value();
        if v.shape() == shape {
            return Ok(self.identity());
        }
        if !broadcasts_into(v.shape(), shape) {
            return Err(AdError::ShapeMismatch {
                op: "broadcast_to",
                lhs: v.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = broadcast_to(v.data(), v.shape(), shape);
        Ok(self.tape.push(
            Tensor::from_parts(shape.to_vec(), data),
            Op::BroadcastTo,
            vec![self.id],
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let v = self.value().reshape(shape.to_vec())?;
        Ok(self.tape.push(v, Op::Reshape, vec![self.id]))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&self) -> Result<Var> {
        let ones = vec![1; self.value().ndim()];
        self.sum_to(&ones)?.reshape(&[])
    }

    pub fn mean(&self) -> Result<Var> {
        let n = self.value().numel() as f64;
        Ok(self.sum()?.scale(1.0 / n))
    }

    /// Sum over `axis`, dropping it unless `keepdim`.
    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Var> {
        let mut shape = self.shape();
        if axis >= shape.len() {
            return Err(AdError::InvalidArgument {
                op: "sum_axis",
                msg: format!("axis {axis} out of range for shape {shape:?}"),
            });
        }
        shape[axis] = 1;
        let s = self.sum_to(&shape)?;
        if keepdim {
            Ok(s)
        } else {
            shape.remove(axis);
            s.reshape(&shape)
        }
    }

    /// Matrix product over the last two axes; leading axes must agree.
    pub fn matmul(&self, other: &Var) -> Result<Var> {
        if !self.tape.same(&other.tape) {
            return Err(AdError::TapeMismatch);
        }
        let v = linalg::matmul(&self.value(), &other.value())?;
        Ok(self.tape.push(v, Op::MatMul, vec![self.id, other.id]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Var> {
        let v = linalg::transpose(&self.value())?;
        Ok(self.tape.push(v, Op::Transpose, vec![self.id]))
    }

    pub fn concat(vars: &[Var], axis: usize) -> Result<Var> {
        let first = vars.first().ok_or_else(|| AdError::InvalidArgument {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let tape = first.tape.clone();
        let values: Vec<_> = vars.iter().map(Var::value).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(AdError::InvalidArgument {
                op: "concat",
                msg: format!("axis {axis} out of range for shape {base:?}"),
            });
        }
        let mut out_shape = base.clone();
        out_shape[axis] = 0;
        for (v, var) in values.iter().zip(vars) {
            if !tape.same(&var.tape) {
                return Err(AdError::TapeMismatch);
            }
            let s = v.shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(k, (a, b))| k == axis || a == b);
            if !compatible {
                return Err(AdError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for v in &values {
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let parents = vars.iter().map(|v| v.id).collect();
        Ok(tape.push(Tensor::from_parts(out_shape, data), Op::Concat(axis), parents))
    }

    /// Entries `start..start + len` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value();
        let shape = v.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(AdError::InvalidArgument {
                op: "slice",
                msg: format!("range {start}..{} on axis {axis} of shape {shape:?}", start + len),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        Ok(self.tape.push(
            Tensor::from_parts(out_shape, data),
            Op::Slice { axis, start },
            vec![self.id],
        ))
    }

    /// Embeds `self` into zeros of `shape` at offset `start` along `axis`.
    pub fn pad(&self, axis: usize, start: usize, shape: &[usize]) -> Result<Var> {
        let v = self.value();
        let src = v.shape();
        let ok = src.len() == shape.len()
            && axis < shape.len()
            && start + src[axis] <= shape[axis]
            && src.iter().zip(shape).enumerate().all(|(k, (a, b))| k == axis || a == b);
        if !ok {
            return Err(AdError::ShapeMismatch {
                op: "pad",
                lhs: src.to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = vec![0.0; shape.iter().product()];
        let len = src[axis];
        for o in 0..outer {
            let dst = (o * shape[axis] + start) * inner;
            data[dst..dst + len * inner]
                .copy_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
        }
        Ok(self.tape.push(
            Tensor::from_parts(shape.to_vec(), data),
            Op::Pad { axis, start },
            vec![self.id],
        ))
    }

    /// Lower Cholesky factor of each SPD matrix in `(..., d, d)`.
    pub fn cholesky(&self) -> Result<Var> {
        let v = linalg::cholesky(&self.value())?;
        Ok(self.tape.push(v, Op::Cholesky, vec![self.id]))
    }

    /// Solves `L·X = B` (`Lᵀ·X = B` when `transpose`) with `self` as `L`.
    pub fn trisolve(&self, rhs: &Var, transpose: bool) -> Result<Var> {
        if !self.tape.same(&rhs.tape) {
            return Err(AdError::TapeMismatch);
        }
        let v = linalg::triangular_solve_matrix(&self.value(), &rhs.value(), transpose)?;
        Ok(self
            .tape
            .push(v, Op::TriSolve { transpose }, vec![self.id, rhs.id]))
    }

    /// Vector right-hand side `(..., d)` version of [`Var::trisolve`].
    pub fn trisolve_vec(&self, rhs: &Var, transpose: bool) -> Result<Var> {
        let mut s = rhs.shape();
        let orig = s.clone();
        s.push(1);
        self.trisolve(&rhs.reshape(&s)?, transpose)?.reshape(&orig)
    }

    /// `log det` of each SPD matrix, shape `(...)`.
    pub fn logdet_spd(&self) -> Result<Var> {
        let v = linalg::logdet_spd(&self.value())?;
        Ok(self.tape.push(v, Op::LogDet, vec![self.id]))
    }

    pub fn inverse_spd(&self) -> Result<Var> {
        let v = linalg::inverse_spd(&self.value())?;
        Ok(self.tape.push(v, Op::InverseSpd, vec![self.id]))
    }

    /// Squared Euclidean distances between the rows of `self` `(n, d)` and
    /// `other` `(m, d)`, shape `(n, m)`.
    pub fn sq_dist(&self, other: &Var) -> Result<Var> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() != 2 || b.len() != 2 || a[1] != b[1] {
            return Err(AdError::ShapeMismatch {
                op: "sq_dist",
                lhs: a,
                rhs: b,
            });
        }
        let diff = self
            .reshape(&[a[0], 1, a[1]])?
            .sub(&other.reshape(&[1, b[0], b[1]])?)?;
        diff.square().sum_axis(2, false)
    }
}
