//! Reverse-mode automatic differentiation over a scalar tape.
//!
//! Model code is written once against the [`Scalar`] trait. Running it with
//! `f64` gives plain evaluation; running it with [`Var`] records every
//! operation on a [`Tape`] so that [`Tape::backward`] can produce gradients.
//! Both paths perform the same floating-point operations in the same order,
//! so their forward values agree bit for bit.

use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

/// Arithmetic needed by the differentiable parts of the codec.
pub trait Scalar:
    Copy
    + fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    /// Primal value.
    fn value(self) -> f64;
    /// A constant living in the same context as `self`.
    fn lift(self, c: f64) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn abs(self) -> Self;
    fn erfc(self) -> Self;
    fn relu(self) -> Self;
    fn sigmoid(self) -> Self;
    fn softplus(self) -> Self;
    /// `max(self, c)`; the gradient is zero when the constant wins.
    fn max_const(self, c: f64) -> Self;
    /// `min(self, c)`; the gradient is zero when the constant wins.
    fn min_const(self, c: f64) -> Self;
    /// `c / self`.
    fn recip_scaled(self, c: f64) -> Self;
    /// Row-major dense layer: `out[j] = bias[j] + sum_i w[j * n + i] * x[i]`.
    fn dense(w: &[Self], bias: &[Self], x: &[Self]) -> Vec<Self>;
    /// `init + xs[0] + xs[1] + ...`, accumulated left to right.
    fn sum(init: Self, xs: &[Self]) -> Self;
}

fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_f64(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

impl Scalar for f64 {
    #[inline]
    fn value(self) -> f64 {
        self
    }
    #[inline]
    fn lift(self, c: f64) -> f64 {
        c
    }
    #[inline]
    fn exp(self) -> f64 {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> f64 {
        f64::ln(self)
    }
    #[inline]
    fn sqrt(self) -> f64 {
        f64::sqrt(self)
    }
    #[inline]
    fn abs(self) -> f64 {
        f64::abs(self)
    }
    #[inline]
    fn erfc(self) -> f64 {
        libm::erfc(self)
    }
    #[inline]
    fn relu(self) -> f64 {
        if self > 0.0 {
            self
        } else {
            0.0
        }
    }
    #[inline]
    fn sigmoid(self) -> f64 {
        sigmoid_f64(self)
    }
    #[inline]
    fn softplus(self) -> f64 {
        softplus_f64(self)
    }
    #[inline]
    fn max_const(self, c: f64) -> f64 {
        if self < c {
            c
        } else {
            self
        }
    }
    #[inline]
    fn min_const(self, c: f64) -> f64 {
        if self > c {
            c
        } else {
            self
        }
    }
    #[inline]
    fn recip_scaled(self, c: f64) -> f64 {
        c / self
    }

    fn dense(w: &[f64], bias: &[f64], x: &[f64]) -> Vec<f64> {
        let n = x.len();
        debug_assert_eq!(w.len(), n * bias.len());
        bias.iter()
            .enumerate()
            .map(|(j, &b)| {
                let row = &w[j * n..(j + 1) * n];
                let mut acc = b;
                for i in 0..n {
                    acc += row[i] * x[i];
                }
                acc
            })
            .collect()
    }

    fn sum(init: f64, xs: &[f64]) -> f64 {
        let mut acc = init;
        for &x in xs {
            acc += x;
        }
        acc
    }
}

#[derive(Debug, Clone, Copy)]
enum Node {
    Leaf,
    Unary { a: u32, da: f64 },
    Binary { a: u32, b: u32, da: f64, db: f64 },
    /// One output row of a dense layer. Weights occupy `w0..w0 + n`,
    /// inputs are listed in the arena at `x_off..x_off + n`.
    DenseRow { w0: u32, x_off: u32, n: u32, bias: u32 },
    /// Sum of the arena entries `off..off + n`.
    Sum { off: u32, n: u32 },
}

#[derive(Default)]
struct Inner {
    vals: Vec<f64>,
    nodes: Vec<Node>,
    arena: Vec<u32>,
}

impl Inner {
    #[inline]
    fn push(&mut self, val: f64, node: Node) -> u32 {
        let idx = self.vals.len() as u32;
        self.vals.push(val);
        self.nodes.push(node);
        idx
    }
}

/// Recording of one forward evaluation.
pub struct Tape {
    inner: RefCell<Inner>,
}

/// A scalar recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: u32,
    val: f64,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var(#{} = {})", self.idx, self.val)
    }
}

/// Adjoints produced by one reverse sweep.
#[derive(Debug, Clone)]
pub struct Gradients {
    grad: Vec<f64>,
}

impl Gradients {
    pub fn wrt(&self, v: Var<'_>) -> f64 {
        self.grad[v.idx as usize]
    }

    pub fn wrt_all(&self, vs: &[Var<'_>]) -> Vec<f64> {
        vs.iter().map(|v| self.wrt(*v)).collect()
    }
}

thread_local! {
    /// Buffers of dropped tapes, reused so that large recordings do not
    /// fault fresh pages in on every evaluation.
    static POOL: RefCell<Option<Inner>> = const { RefCell::new(None) };
}

impl Drop for Tape {
    fn drop(&mut self) {
        let mut inner = std::mem::take(self.inner.get_mut());
        inner.vals.clear();
        inner.nodes.clear();
        inner.arena.clear();
        let _ = POOL.try_with(|p| {
            let mut p = p.borrow_mut();
            if p.as_ref().is_none_or(|old| old.nodes.capacity() < inner.nodes.capacity()) {
                *p = Some(inner);
            }
        });
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_capacity(0)
    }

    pub fn with_capacity(nodes: usize) -> Self {
        let mut inner = POOL.try_with(|p| p.borrow_mut().take()).ok().flatten().unwrap_or_default();
        inner.vals.reserve(nodes);
        inner.nodes.reserve(nodes);
        Tape {
            inner: RefCell::new(inner),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A new independent input.
    pub fn var(&self, val: f64) -> Var<'_> {
        let idx = self.inner.borrow_mut().push(val, Node::Leaf);
        Var { tape: self, idx, val }
    }

    /// Inputs with consecutive node indices.
    pub fn vars(&self, vals: &[f64]) -> Vec<Var<'_>> {
        let mut inner = self.inner.borrow_mut();
        vals.iter()
            .map(|&val| {
                let idx = inner.push(val, Node::Leaf);
                Var { tape: self, idx, val }
            })
            .collect()
    }

    #[inline]
    fn unary(&self, a: Var<'_>, val: f64, da: f64) -> Var<'_> {
        let idx = self.inner.borrow_mut().push(val, Node::Unary { a: a.idx, da });
        Var { tape: self, idx, val }
    }

    #[inline]
    fn binary(&self, a: Var<'_>, b: Var<'_>, val: f64, da: f64, db: f64) -> Var<'_> {
        let idx = self.inner.borrow_mut().push(
            val,
            Node::Binary {
                a: a.idx,
                b: b.idx,
                da,
                db,
            },
        );
        Var { tape: self, idx, val }
    }

    /// Reverse sweep seeded with `d(output)/d(seed var) = weight` for every
    /// pair. Seeds on the same variable accumulate.
    pub fn backward(&self, seeds: &[(Var<'_>, f64)]) -> Gradients {
        let inner = self.inner.borrow();
        let n = inner.nodes.len();
        let mut grad = vec![0.0; n];
        for (v, w) in seeds {
            debug_assert!(std::ptr::eq(v.tape, self));
            grad[v.idx as usize] += w;
        }
        let vals = &inner.vals;
        let arena = &inner.arena;
        for i in (0..n).rev() {
            let g = grad[i];
            if g == 0.0 {
                continue;
            }
            match inner.nodes[i] {
                Node::Leaf => {}
                Node::Unary { a, da } => grad[a as usize] += g * da,
                Node::Binary { a, b, da, db } => {
                    grad[a as usize] += g * da;
                    grad[b as usize] += g * db;
                }
                Node::DenseRow { w0, x_off, n, bias } => {
                    grad[bias as usize] += g;
                    let xs = &arena[x_off as usize..(x_off + n) as usize];
                    for (k, &x) in xs.iter().enumerate() {
                        let w = w0 as usize + k;
                        grad[w] += g * vals[x as usize];
                        grad[x as usize] += g * vals[w];
                    }
                }
                Node::Sum { off, n } => {
                    for &x in &arena[off as usize..(off + n) as usize] {
                        grad[x as usize] += g;
                    }
                }
            }
        }
        Gradients { grad }
    }
}

impl<'t> Var<'t> {
    pub fn index(self) -> usize {
        self.idx as usize
    }

    pub fn tape(self) -> &'t Tape {
        self.tape
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    #[inline]
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.binary(self, rhs, self.val + rhs.val, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    #[inline]
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.binary(self, rhs, self.val - rhs.val, 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    #[inline]
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.tape
            .binary(self, rhs, self.val * rhs.val, rhs.val, self.val)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    #[inline]
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        let q = self.val / rhs.val;
        self.tape.binary(self, rhs, q, 1.0 / rhs.val, -q / rhs.val)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    #[inline]
    fn neg(self) -> Var<'t> {
        self.tape.unary(self, -self.val, -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    #[inline]
    fn add(self, rhs: f64) -> Var<'t> {
        self.tape.unary(self, self.val + rhs, 1.0)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    #[inline]
    fn sub(self, rhs: f64) -> Var<'t> {
        self.tape.unary(self, self.val - rhs, 1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    #[inline]
    fn mul(self, rhs: f64) -> Var<'t> {
        self.tape.unary(self, self.val * rhs, rhs)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    #[inline]
    fn div(self, rhs: f64) -> Var<'t> {
        self.tape.unary(self, self.val / rhs, 1.0 / rhs)
    }
}

impl<'t> Scalar for Var<'t> {
    #[inline]
    fn value(self) -> f64 {
        self.val
    }

    fn lift(self, c: f64) -> Self {
        let idx = self.tape.inner.borrow_mut().push(c, Node::Leaf);
        Var {
            tape: self.tape,
            idx,
            val: c,
        }
    }

    fn exp(self) -> Self {
        let e = self.val.exp();
        self.tape.unary(self, e, e)
    }

    fn ln(self) -> Self {
        self.tape.unary(self, self.val.ln(), 1.0 / self.val)
    }

    fn sqrt(self) -> Self {
        let s = self.val.sqrt();
        self.tape.unary(self, s, 0.5 / s)
    }

    fn abs(self) -> Self {
        let d = if self.val < 0.0 { -1.0 } else { 1.0 };
        self.tape.unary(self, self.val.abs(), d)
    }

    fn erfc(self) -> Self {
        let x = self.val;
        let d = -std::f64::consts::FRAC_2_SQRT_PI * (-x * x).exp();
        self.tape.unary(self, libm::erfc(x), d)
    }

    fn relu(self) -> Self {
        if self.val > 0.0 {
            self.tape.unary(self, self.val, 1.0)
        } else {
            self.tape.unary(self, 0.0, 0.0)
        }
    }

    fn sigmoid(self) -> Self {
        let s = sigmoid_f64(self.val);
        self.tape.unary(self, s, s * (1.0 - s))
    }

    fn softplus(self) -> Self {
        self.tape
            .unary(self, softplus_f64(self.val), sigmoid_f64(self.val))
    }

    fn max_const(self, c: f64) -> Self {
        if self.val < c {
            self.tape.unary(self, c, 0.0)
        } else {
            self.tape.unary(self, self.val, 1.0)
        }
    }

    fn min_const(self, c: f64) -> Self {
        if self.val > c {
            self.tape.unary(self, c, 0.0)
        } else {
            self.tape.unary(self, self.val, 1.0)
        }
    }

    fn recip_scaled(self, c: f64) -> Self {
        let q = c / self.val;
        self.tape.unary(self, q, -q / self.val)
    }

    fn dense(w: &[Self], bias: &[Self], x: &[Self]) -> Vec<Self> {
        let n = x.len();
        assert_eq!(w.len(), n * bias.len(), "dense layer shape mismatch");
        let Some(first) = w.first() else {
            return bias.to_vec();
        };
        let tape = first.tape;
        let contiguous = w
            .iter()
            .enumerate()
            .all(|(k, v)| v.idx == first.idx + k as u32);
        if !contiguous {
            // Weights that are not fresh leaves fall back to scalar ops.
            return bias
                .iter()
                .enumerate()
                .map(|(j, &b)| {
                    let mut acc = b;
                    for i in 0..n {
                        acc = acc + w[j * n + i] * x[i];
                    }
                    acc
                })
                .collect();
        }
        let mut inner = tape.inner.borrow_mut();
        let x_off = inner.arena.len() as u32;
        inner.arena.extend(x.iter().map(|v| v.idx));
        bias.iter()
            .enumerate()
            .map(|(j, &b)| {
                let row = &w[j * n..(j + 1) * n];
                let mut acc = b.val;
                for i in 0..n {
                    acc += row[i].val * x[i].val;
                }
                let idx = inner.push(
                    acc,
                    Node::DenseRow {
                        w0: row[0].idx,
                        x_off,
                        n: n as u32,
                        bias: b.idx,
                    },
                );
                Var { tape, idx, val: acc }
            })
            .collect()
    }

    fn sum(init: Self, xs: &[Self]) -> Self {
        let tape = init.tape;
        let mut acc = init.val;
        for x in xs {
            acc += x.val;
        }
        let mut inner = tape.inner.borrow_mut();
        let off = inner.arena.len() as u32;
        inner.arena.push(init.idx);
        inner.arena.extend(xs.iter().map(|v| v.idx));
        let idx = inner.push(
            acc,
            Node::Sum {
                off,
                n: xs.len() as u32 + 1,
            },
        );
        Var { tape, idx, val: acc }
    }
}

/// Central finite difference of `f` around `x` along coordinate `i`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut xp = x.to_vec();
    let mut xm = x.to_vec();
    xp[i] += h;
    xm[i] -= h;
    (f(&xp) - f(&xm)) / (2.0 * h)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn poly<S: Scalar>(x: &[S]) -> S {
        let a = x[0] * x[1] + x[2].exp() / (x[0] + 3.0);
        let b = (x[1] * x[1] + 1.0).sqrt().ln() - x[2].sigmoid() * 2.0;
        let c = (x[0] - 0.3).relu() + (x[1] * 0.5).softplus() + (x[2] * 0.7).erfc();
        a * b + c + x[0].recip_scaled(2.0) - (-x[1]).abs()
    }

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let x = tape.var(3.0);
        let y = x * x;
        let g = tape.backward(&[(y, 1.0)]);
        assert_eq!(g.wrt(x), 6.0);
    }

    #[test]
    fn scalar_ops_match_finite_differences() {
        let x0 = [0.7, -1.3, 0.4];
        let tape = Tape::new();
        let xs = tape.vars(&x0);
        let y = poly(&xs);
        assert_eq!(y.value(), poly(&x0));
        let g = tape.backward(&[(y, 1.0)]);
        for i in 0..3 {
            let fd = central_difference(|x| poly(x), &x0, i, 1e-6);
            let ad = g.wrt(xs[i]);
            assert!((fd - ad).abs() < 1e-7 * (1.0 + ad.abs()), "{i}: {fd} vs {ad}");
        }
    }

    #[test]
    fn dense_and_sum_match_scalar_path() {
        let w: Vec<f64> = (0..12).map(|k| (k as f64 * 0.37).sin()).collect();
        let b = [0.1, -0.2, 0.3];
        let x = [0.5, -1.5, 2.0, 0.25];
        let expect = f64::dense(&w, &b, &x);

        let tape = Tape::new();
        let wv = tape.vars(&w);
        let bv = tape.vars(&b);
        let xv = tape.vars(&x);
        let out = Var::dense(&wv, &bv, &xv);
        for (o, e) in out.iter().zip(&expect) {
            assert_eq!(o.value(), *e);
        }
        let total = Var::sum(out[0], &out[1..]);
        let g = tape.backward(&[(total, 1.0)]);
        // d total / d x_i = sum_j w[j][i]
        for i in 0..4 {
            let e: f64 = (0..3).map(|j| w[j * 4 + i]).sum();
            assert!((g.wrt(xv[i]) - e).abs() < 1e-12);
        }
        for j in 0..3 {
            assert_eq!(g.wrt(bv[j]), 1.0);
            for i in 0..4 {
                assert_eq!(g.wrt(wv[j * 4 + i]), x[i]);
            }
        }
    }

    #[test]
    fn dense_with_non_leaf_weights_falls_back() {
        let tape = Tape::new();
        let w = tape.vars(&[1.0, 2.0]);
        let w2: Vec<Var> = w.iter().map(|v| *v * 2.0).collect();
        let b = tape.vars(&[0.5]);
        let x = tape.vars(&[3.0, -1.0]);
        let y = Var::dense(&w2, &b, &x)[0];
        assert_eq!(y.value(), 0.5 + 2.0 * 3.0 - 4.0);
        let g = tape.backward(&[(y, 1.0)]);
        assert_eq!(g.wrt(w[0]), 6.0);
        assert_eq!(g.wrt(x[1]), 4.0);
    }

    #[test]
    fn clamps_block_gradient() {
        let tape = Tape::new();
        let x = tape.var(0.2);
        let a = x.max_const(0.5);
        let b = x.min_const(0.1);
        let g = tape.backward(&[(a, 1.0), (b, 1.0)]);
        assert_eq!(a.value(), 0.5);
        assert_eq!(b.value(), 0.1);
        assert_eq!(g.wrt(x), 0.0);
    }
}
