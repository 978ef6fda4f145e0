//! Tape-based reverse-mode automatic differentiation.
//!
//! Every primitive call appends a node holding its output value; the tape is
//! therefore already in topological order and [`Tape::grad`] walks it once in
//! reverse. Only the primitives below are differentiated directly, everything
//! else (subtraction, division, powers, ...) is composed from them.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

use super::conv::{conv2d_backward, conv2d_forward, ConvGeometry};
use super::scalar::gemm;
use super::{Scalar, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param,
    Add(usize, usize),
    Mul(usize, usize),
    MatMul(usize, usize),
    Conv2d {
        input: usize,
        kernel: usize,
        geom: ConvGeometry,
    },
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    Exp(usize),
    Log(usize),
    Log1p(usize),
    Sin(usize),
    Sum(usize),
    Reshape(usize),
    Concat(Vec<usize>),
    Slice {
        src: usize,
        start: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Records primitive operations for one forward/backward pass.
#[derive(Debug)]
pub struct Tape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
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

fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "variable recorded on a different tape");
        v.idx
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[self.idx(v)]
    }

    fn grad_flag(&self, inputs: &[usize]) -> bool {
        inputs.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Param, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn scalar(&mut self, value: T) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.node(v).value.shape()
    }

    fn binary_shapes(&self, op: &'static str, a: usize, b: usize) -> Result<Vec<usize>> {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        let (na, nb) = (self.nodes[a].value.numel(), self.nodes[b].value.numel());
        if sa == sb || nb == 1 {
            Ok(sa.to_vec())
        } else if na == 1 {
            Ok(sb.to_vec())
        } else {
            Err(Error::shape(op, format!("{sa:?} vs {sb:?}")))
        }
    }

    fn zip_with(&self, a: usize, b: usize, shape: Vec<usize>, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (da, db) = (self.nodes[a].value.data(), self.nodes[b].value.data());
        let data = match (da.len(), db.len()) {
            (x, y) if x == y => da.iter().zip(db).map(|(&p, &q)| f(p, q)).collect(),
            (1, _) => db.iter().map(|&q| f(da[0], q)).collect(),
            _ => da.iter().map(|&p| f(p, db[0])).collect(),
        };
        Tensor::new(shape, data).expect("broadcast shape")
    }

    /// Elementwise sum; either operand may be a one-element tensor.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let shape = self.binary_shapes("add", ia, ib)?;
        let value = self.zip_with(ia, ib, shape, |p, q| p + q);
        let rg = self.grad_flag(&[ia, ib]);
        Ok(self.push(value, Op::Add(ia, ib), rg))
    }

    /// Elementwise product; either operand may be a one-element tensor.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let shape = self.binary_shapes("mul", ia, ib)?;
        let value = self.zip_with(ia, ib, shape, |p, q| p * q);
        let rg = self.grad_flag(&[ia, ib]);
        Ok(self.push(value, Op::Mul(ia, ib), rg))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a), self.idx(b));
        let (sa, sb) = (self.nodes[ia].value.shape(), self.nodes[ib].value.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            self.nodes[ia].value.data(),
            false,
            self.nodes[ib].value.data(),
            false,
            T::zero(),
            &mut out,
        );
        let rg = self.grad_flag(&[ia, ib]);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul(ia, ib), rg))
    }

    /// Cross-correlation of `input` `[C, H, W]` with `kernels` `[F, C, kh, kw]`.
    pub fn conv2d(&mut self, input: Var, kernels: Var, stride: usize, padding: usize) -> Result<Var> {
        let (ii, ik) = (self.idx(input), self.idx(kernels));
        let (si, sk) = (self.nodes[ii].value.shape(), self.nodes[ik].value.shape());
        if si.len() != 3 || sk.len() != 4 || si[0] != sk[1] || stride == 0 {
            return Err(Error::shape("conv2d", format!("input {si:?}, kernels {sk:?}")));
        }
        if sk[2] > si[1] + 2 * padding || sk[3] > si[2] + 2 * padding {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {sk:?} does not fit input {si:?} with padding {padding}"),
            ));
        }
        let geom = ConvGeometry {
            channels: si[0],
            height: si[1],
            width: si[2],
            filters: sk[0],
            kh: sk[2],
            kw: sk[3],
            stride,
            padding,
        };
        let out = conv2d_forward(&geom, self.nodes[ii].value.data(), self.nodes[ik].value.data());
        let value = Tensor::new([geom.filters, geom.out_height(), geom.out_width()], out)?;
        let rg = self.grad_flag(&[ii, ik]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input: ii,
                kernel: ik,
                geom,
            },
            rg,
        ))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: fn(usize) -> Op) -> Var {
        let ia = self.idx(a);
        let value = self.nodes[ia].value.map(f);
        let rg = self.nodes[ia].requires_grad;
        self.push(value, op(ia), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid)
    }

    /// `log(1 + exp(x))`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.ln(), Op::Log)
    }

    /// `log(1 + a)`, accurate for small `a`.
    pub fn log1p(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.ln_1p(), Op::Log1p)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.sin(), Op::Sin)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let ia = self.idx(a);
        let total = self.nodes[ia].value.data().iter().copied().sum::<T>();
        let rg = self.nodes[ia].requires_grad;
        self.push(Tensor::scalar(total), Op::Sum(ia), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let ia = self.idx(a);
        let value = self.nodes[ia].value.clone().reshape(shape)?;
        let rg = self.nodes[ia].requires_grad;
        Ok(self.push(value, Op::Reshape(ia), rg))
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let idx: Vec<usize> = parts.iter().map(|&p| self.idx(p)).collect();
        let Some(&first) = idx.first() else {
            return Err(Error::shape("concat", "no inputs"));
        };
        let tail = self.nodes[first].value.shape().get(1..).unwrap_or(&[]).to_vec();
        if self.nodes[first].value.shape().is_empty() {
            return Err(Error::shape("concat", "scalar input"));
        }
        let mut lead = 0;
        let mut data = Vec::new();
        for &i in &idx {
            let s = self.nodes[i].value.shape();
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::shape("concat", format!("{s:?} vs trailing {tail:?}")));
            }
            lead += s[0];
            data.extend_from_slice(self.nodes[i].value.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let rg = self.grad_flag(&idx);
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat(idx), rg))
    }

    /// Rows `start..end` along the leading axis.
    pub fn slice(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ia = self.idx(a);
        let s = self.nodes[ia].value.shape().to_vec();
        if s.is_empty() || start >= end || end > s[0] {
            return Err(Error::shape("slice", format!("{start}..{end} of {s:?}")));
        }
        let row: usize = s[1..].iter().product();
        let data = self.nodes[ia].value.data()[start * row..end * row].to_vec();
        let mut shape = s.clone();
        shape[0] = end - start;
        let rg = self.nodes[ia].requires_grad;
        Ok(self.push(Tensor::new(shape, data)?, Op::Slice { src: ia, start }, rg))
    }

    // Composed operations.

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let k = self.scalar(c);
        self.mul(a, k)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let k = self.scalar(c);
        self.add(a, k)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -T::one())
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.neg(b)?;
        self.add(a, nb)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    /// `1 / a` for positive `a`.
    pub fn recip(&mut self, a: Var) -> Result<Var> {
        self.powf(a, -T::one())
    }

    /// `a^p` for positive `a`.
    pub fn powf(&mut self, a: Var, p: T) -> Result<Var> {
        let l = self.log(a);
        let s = self.scale(l, p)?;
        Ok(self.exp(s))
    }

    /// `a / b` for positive `b`.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let r = self.recip(b)?;
        self.mul(a, r)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let s = self.sum(a);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Reverse-mode gradients of the scalar `loss` with respect to `params`.
    ///
    /// Consumes the tape. Parameters that are leaves of this tape but do not
    /// influence `loss` receive zero gradients.
    pub fn grad(self, loss: Var, params: &[Var]) -> Result<Vec<Tensor<T>>> {
        if loss.tape != self.id || loss.idx >= self.nodes.len() {
            return Err(Error::InvalidArgument("loss is not on this tape".into()));
        }
        if self.nodes[loss.idx].value.numel() != 1 {
            return Err(Error::NonScalarLoss(self.nodes[loss.idx].value.shape().to_vec()));
        }
        for p in params {
            if p.tape != self.id || p.idx >= self.nodes.len() || !matches!(self.nodes[p.idx].op, Op::Param) {
                return Err(Error::UnreachableParameter(p.idx));
            }
        }
        let mut grads = self.backward(loss.idx);
        Ok(params
            .iter()
            .map(|p| {
                let shape = self.nodes[p.idx].value.shape().to_vec();
                match grads[p.idx].take() {
                    Some(g) => Tensor::new(shape, g).expect("gradient shape"),
                    None => Tensor::zeros(shape),
                }
            })
            .collect())
    }

    fn backward(&self, root: usize) -> Vec<Option<Vec<T>>> {
        let mut grads: Vec<Option<Vec<T>>> = vec![None; root + 1];
        grads[root] = Some(vec![T::one()]);

        fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
            match slot {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a = *a + b),
                None => *slot = Some(g),
            }
        }

        // Gradient of a broadcast operand: reduce if the operand was a scalar.
        fn reduce<T: Scalar>(g: Vec<T>, numel: usize) -> Vec<T> {
            if numel == 1 && g.len() != 1 {
                vec![g.into_iter().sum()]
            } else {
                g
            }
        }

        for i in (0..=root).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let val = |j: usize| self.nodes[j].value.data();
            let needs = |j: usize| self.nodes[j].requires_grad;
            match &node.op {
                Op::Constant => {}
                Op::Param => {
                    grads[i] = Some(g);
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    if needs(a) {
                        accumulate(&mut grads[a], reduce(g.clone(), val(a).len()));
                    }
                    if needs(b) {
                        accumulate(&mut grads[b], reduce(g, val(b).len()));
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let times = |other: &[T]| -> Vec<T> {
                        if other.len() == g.len() {
                            g.iter().zip(other).map(|(&x, &y)| x * y).collect()
                        } else {
                            g.iter().map(|&x| x * other[0]).collect()
                        }
                    };
                    if needs(a) {
                        let ga = reduce(times(val(b)), val(a).len());
                        accumulate(&mut grads[a], ga);
                    }
                    if needs(b) {
                        let gb = reduce(times(val(a)), val(b).len());
                        accumulate(&mut grads[b], gb);
                    }
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    if needs(a) {
                        let mut ga = vec![T::zero(); m * k];
                        gemm(m, n, k, &g, false, val(b), true, T::zero(), &mut ga);
                        accumulate(&mut grads[a], ga);
                    }
                    if needs(b) {
                        let mut gb = vec![T::zero(); k * n];
                        gemm(k, m, n, val(a), true, &g, false, T::zero(), &mut gb);
                        accumulate(&mut grads[b], gb);
                    }
                }
                Op::Conv2d { input, kernel, geom } => {
                    let (input, kernel) = (*input, *kernel);
                    let (gi, gk) = conv2d_backward(geom, val(input), val(kernel), &g, needs(input), needs(kernel));
                    if let Some(gi) = gi {
                        accumulate(&mut grads[input], gi);
                    }
                    if let Some(gk) = gk {
                        accumulate(&mut grads[kernel], gk);
                    }
                }
                Op::Tanh(a) => {
                    let y = node.value.data();
                    let ga = g.iter().zip(y).map(|(&g, &y)| g * (T::one() - y * y)).collect();
                    accumulate(&mut grads[*a], ga);
                }
                Op::Sigmoid(a) => {
                    let y = node.value.data();
                    let ga = g.iter().zip(y).map(|(&g, &y)| g * y * (T::one() - y)).collect();
                    accumulate(&mut grads[*a], ga);
                }
                Op::Softplus(a) => {
                    let x = val(*a);
                    let ga = g.iter().zip(x).map(|(&g, &x)| g * sigmoid(x)).collect();
                    accumulate(&mut grads[*a], ga);
                }
                Op::Exp(a) => {
                    let y = node.value.data();
                    let ga = g.iter().zip(y).map(|(&g, &y)| g * y).collect();
                    accumulate(&mut grads[*a], ga);
                }
                Op::Log(a) => {
                    let x = val(*a);
                    let ga = g.iter().zip(x).map(|(&g, &x)| g / x).collect();
                    accumulate(&mut grads[*a], ga);
                }
                Op::Log1p(a) => {
                    let x = val(*a);
                    let ga = g.iter().zip(x).map(|(&g, &x)| g / (T::one() + x)).collect();
                    accumulate(&mut grads[*a], ga);
                }
                Op::Sin(a) => {
                    let x = val(*a);
                    let ga = g.iter().zip(x).map(|(&g, &x)| g * x.cos()).collect();
                    accumulate(&mut grads[*a], ga);
                }
                Op::Sum(a) => {
                    let n = val(*a).len();
                    accumulate(&mut grads[*a], vec![g[0]; n]);
                }
                Op::Reshape(a) => {
                    accumulate(&mut grads[*a], g);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = val(p).len();
                        if needs(p) {
                            accumulate(&mut grads[p], g[offset..offset + n].to_vec());
                        }
                        offset += n;
                    }
                }
                Op::Slice { src, start } => {
                    let src_val = &self.nodes[*src].value;
                    let row: usize = src_val.shape()[1..].iter().product();
                    let mut gs = vec![T::zero(); src_val.numel()];
                    gs[start * row..start * row + g.len()].copy_from_slice(&g);
                    accumulate(&mut grads[*src], gs);
                }
            }
        }
        grads
    }
}
