//! Scalar reverse-mode differentiation.
//!
//! Every numeric routine in the crate is written against the [`Real`] trait,
//! which is implemented both for plain `f64` (no bookkeeping) and for
//! [`Var`], a value recorded on a [`Tape`]. Running the same model code on
//! `Var`s and calling [`Tape::gradient`] gives exact derivatives for the
//! whitelisted operation set.
//!
//! ```
//! use hsmc_core::numcore::ad::{Real, Tape};
//!
//! let tape = Tape::new();
//! let x = tape.var(1.0);
//! let y = tape.var(2.0);
//! let f = x * x + y * y;
//! let g = tape.gradient(f, &[x, y]).unwrap();
//! assert_eq!(g, vec![2.0, 4.0]);
//! ```

use std::cell::{Cell, RefCell};
use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdError {
    #[error("operation `{op}` is not differentiable on the tape")]
    UnsupportedOp { op: &'static str },
    #[error("output variable does not belong to this tape")]
    ForeignVariable,
    #[error("non-finite value {value} encountered while {context}")]
    NonFinite { value: f64, context: &'static str },
}

/// Scalar field used by all generic numeric code.
pub trait Real:
    Copy
    + Debug
    + PartialEq
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    fn cst(v: f64) -> Self;
    fn value(self) -> f64;

    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn sigmoid(self) -> Self;
    fn softplus(self) -> Self;
    fn relu(self) -> Self;
    /// Rounds down. Not differentiable: poisons the tape when recorded.
    fn floor(self) -> Self;

    fn zero() -> Self {
        Self::cst(0.0)
    }
    fn one() -> Self {
        Self::cst(1.0)
    }
    fn square(self) -> Self {
        self * self
    }
    fn recip(self) -> Self {
        Self::one() / self
    }
    fn is_finite(self) -> bool {
        self.value().is_finite()
    }
}

#[inline]
pub fn sigmoid_f64(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus_f64(z: f64) -> f64 {
    if z > 30.0 {
        z + (-z).exp()
    } else {
        z.exp().ln_1p()
    }
}

/// Inverse of softplus, for z > 0.
pub fn softplus_inv(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else {
        z.exp_m1().ln()
    }
}

impl Real for f64 {
    #[inline]
    fn cst(v: f64) -> Self {
        v
    }
    #[inline]
    fn value(self) -> f64 {
        self
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    #[inline]
    fn sin(self) -> Self {
        f64::sin(self)
    }
    #[inline]
    fn cos(self) -> Self {
        f64::cos(self)
    }
    #[inline]
    fn sigmoid(self) -> Self {
        sigmoid_f64(self)
    }
    #[inline]
    fn softplus(self) -> Self {
        softplus_f64(self)
    }
    #[inline]
    fn relu(self) -> Self {
        self.max(0.0)
    }
    #[inline]
    fn floor(self) -> Self {
        f64::floor(self)
    }
}

const NONE: u32 = u32::MAX;

#[derive(Clone, Copy)]
struct Node {
    parents: [u32; 2],
    partials: [f64; 2],
}

/// Append-only record of scalar operations. One tape per worker thread.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    violation: Cell<Option<&'static str>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::with_capacity(1 << 16)),
            violation: Cell::new(None),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers an independent input.
    pub fn var(&self, value: f64) -> Var<'_> {
        let idx = self.push(Node {
            parents: [NONE, NONE],
            partials: [0.0, 0.0],
        });
        Var {
            tape: Some(self),
            idx,
            val: value,
        }
    }

    pub fn vars(&self, values: &[f64]) -> Vec<Var<'_>> {
        values.iter().map(|&v| self.var(v)).collect()
    }

    #[inline]
    fn push(&self, node: Node) -> u32 {
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len() as u32;
        nodes.push(node);
        idx
    }

    fn poison(&self, op: &'static str) {
        if self.violation.get().is_none() {
            self.violation.set(Some(op));
        }
    }

    /// The first non-differentiable operation recorded, if any.
    pub fn violation(&self) -> Option<&'static str> {
        self.violation.get()
    }

    /// Reverse sweep from `output`; returns d output / d input for each of `wrt`.
    pub fn gradient(&self, output: Var<'_>, wrt: &[Var<'_>]) -> Result<Vec<f64>, AdError> {
        if let Some(op) = self.violation.get() {
            return Err(AdError::UnsupportedOp { op });
        }
        if !output.val.is_finite() {
            return Err(AdError::NonFinite {
                value: output.val,
                context: "evaluating the differentiated output",
            });
        }
        let Some(out_tape) = output.tape else {
            return Ok(vec![0.0; wrt.len()]);
        };
        if !std::ptr::eq(out_tape, self) {
            return Err(AdError::ForeignVariable);
        }
        let nodes = self.nodes.borrow();
        let mut adj = vec![0.0f64; output.idx as usize + 1];
        adj[output.idx as usize] = 1.0;
        for i in (0..=output.idx as usize).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let n = &nodes[i];
            for j in 0..2 {
                let p = n.parents[j];
                if p != NONE {
                    adj[p as usize] += a * n.partials[j];
                }
            }
        }
        let mut out = Vec::with_capacity(wrt.len());
        for w in wrt {
            match w.tape {
                Some(t) if std::ptr::eq(t, self) => {
                    let g = adj.get(w.idx as usize).copied().unwrap_or(0.0);
                    if !g.is_finite() {
                        return Err(AdError::NonFinite {
                            value: g,
                            context: "accumulating adjoints",
                        });
                    }
                    out.push(g);
                }
                Some(_) => return Err(AdError::ForeignVariable),
                None => out.push(0.0),
            }
        }
        Ok(out)
    }
}

/// A scalar that is either a tape-recorded value or a constant.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: Option<&'t Tape>,
    idx: u32,
    val: f64,
}

impl Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.tape.is_some() {
            write!(f, "Var#{}({})", self.idx, self.val)
        } else {
            write!(f, "Const({})", self.val)
        }
    }
}

impl PartialEq for Var<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.val == other.val
    }
}

impl<'t> Var<'t> {
    pub fn constant(v: f64) -> Self {
        Var {
            tape: None,
            idx: NONE,
            val: v,
        }
    }

    pub fn is_recorded(&self) -> bool {
        self.tape.is_some()
    }

    #[inline]
    fn unary(self, val: f64, d: f64) -> Self {
        match self.tape {
            None => Var::constant(val),
            Some(t) => Var {
                tape: Some(t),
                idx: t.push(Node {
                    parents: [self.idx, NONE],
                    partials: [d, 0.0],
                }),
                val,
            },
        }
    }

    #[inline]
    fn binary(self, other: Self, val: f64, da: f64, db: f64) -> Self {
        match (self.tape, other.tape) {
            (None, None) => Var::constant(val),
            (Some(t), None) => Var {
                tape: Some(t),
                idx: t.push(Node {
                    parents: [self.idx, NONE],
                    partials: [da, 0.0],
                }),
                val,
            },
            (None, Some(t)) => Var {
                tape: Some(t),
                idx: t.push(Node {
                    parents: [other.idx, NONE],
                    partials: [db, 0.0],
                }),
                val,
            },
            (Some(t), Some(_)) => Var {
                tape: Some(t),
                idx: t.push(Node {
                    parents: [self.idx, other.idx],
                    partials: [da, db],
                }),
                val,
            },
        }
    }
}

impl Add for Var<'_> {
    type Output = Self;
    #[inline]
    fn add(self, rhs: Self) -> Self {
        self.binary(rhs, self.val + rhs.val, 1.0, 1.0)
    }
}

impl Sub for Var<'_> {
    type Output = Self;
    #[inline]
    fn sub(self, rhs: Self) -> Self {
        self.binary(rhs, self.val - rhs.val, 1.0, -1.0)
    }
}

impl Mul for Var<'_> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        self.binary(rhs, self.val * rhs.val, rhs.val, self.val)
    }
}

impl Div for Var<'_> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: Self) -> Self {
        let q = self.val / rhs.val;
        self.binary(rhs, q, 1.0 / rhs.val, -q / rhs.val)
    }
}

impl Neg for Var<'_> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        self.unary(-self.val, -1.0)
    }
}

impl Add<f64> for Var<'_> {
    type Output = Self;
    #[inline]
    fn add(self, rhs: f64) -> Self {
        self.unary(self.val + rhs, 1.0)
    }
}

impl Sub<f64> for Var<'_> {
    type Output = Self;
    #[inline]
    fn sub(self, rhs: f64) -> Self {
        self.unary(self.val - rhs, 1.0)
    }
}

impl Mul<f64> for Var<'_> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: f64) -> Self {
        self.unary(self.val * rhs, rhs)
    }
}

impl Div<f64> for Var<'_> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: f64) -> Self {
        self.unary(self.val / rhs, 1.0 / rhs)
    }
}

impl AddAssign for Var<'_> {
    #[inline]
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

impl SubAssign for Var<'_> {
    #[inline]
    fn sub_assign(&mut self, rhs: Self) {
        *self = *self - rhs;
    }
}

impl MulAssign for Var<'_> {
    #[inline]
    fn mul_assign(&mut self, rhs: Self) {
        *self = *self * rhs;
    }
}

impl Real for Var<'_> {
    #[inline]
    fn cst(v: f64) -> Self {
        Var::constant(v)
    }
    #[inline]
    fn value(self) -> f64 {
        self.val
    }
    #[inline]
    fn exp(self) -> Self {
        let e = self.val.exp();
        self.unary(e, e)
    }
    #[inline]
    fn ln(self) -> Self {
        self.unary(self.val.ln(), 1.0 / self.val)
    }
    #[inline]
    fn sqrt(self) -> Self {
        let s = self.val.sqrt();
        self.unary(s, 0.5 / s)
    }
    #[inline]
    fn tanh(self) -> Self {
        let t = self.val.tanh();
        self.unary(t, 1.0 - t * t)
    }
    #[inline]
    fn sin(self) -> Self {
        self.unary(self.val.sin(), self.val.cos())
    }
    #[inline]
    fn cos(self) -> Self {
        self.unary(self.val.cos(), -self.val.sin())
    }
    #[inline]
    fn sigmoid(self) -> Self {
        let s = sigmoid_f64(self.val);
        self.unary(s, s * (1.0 - s))
    }
    #[inline]
    fn softplus(self) -> Self {
        self.unary(softplus_f64(self.val), sigmoid_f64(self.val))
    }
    #[inline]
    fn relu(self) -> Self {
        if self.val > 0.0 {
            self.unary(self.val, 1.0)
        } else {
            Var::constant(0.0)
        }
    }
    fn floor(self) -> Self {
        if let Some(t) = self.tape {
            t.poison("floor");
        }
        self.unary(self.val.floor(), 0.0)
    }
}

/// Convenience: value and gradient of a scalar function given in generic form.
pub trait ScalarFn {
    fn eval<R: Real>(&self, x: &[R]) -> R;
}

pub fn value_and_grad<F: ScalarFn + ?Sized>(f: &F, x: &[f64]) -> Result<(f64, Vec<f64>), AdError> {
    let tape = Tape::new();
    let xs = tape.vars(x);
    let y = f.eval(&xs);
    let g = tape.gradient(y, &xs)?;
    Ok((y.value(), g))
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Dot;
    impl ScalarFn for Dot {
        fn eval<R: Real>(&self, x: &[R]) -> R {
            x.iter().fold(R::zero(), |acc, &v| acc + v * v)
        }
    }

    #[test]
    fn dot_self_gradient() {
        let (v, g) = value_and_grad(&Dot, &[1.0, 2.0]).unwrap();
        assert_eq!(v, 5.0);
        assert_eq!(g, vec![2.0, 4.0]);
    }

    #[test]
    fn gaussian_mode_has_zero_gradient() {
        struct LogStdNormal;
        impl ScalarFn for LogStdNormal {
            fn eval<R: Real>(&self, x: &[R]) -> R {
                let d = x.len() as f64;
                let q = x.iter().fold(R::zero(), |a, &v| a + v * v);
                q * -0.5 - 0.5 * d * (2.0 * std::f64::consts::PI).ln()
            }
        }
        let (_, g) = value_and_grad(&LogStdNormal, &[0.0, 0.0]).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn floor_poisons_tape() {
        let tape = Tape::new();
        let x = tape.var(1.5);
        let y = x.floor() * x;
        let err = tape.gradient(y, &[x]).unwrap_err();
        assert_eq!(err, AdError::UnsupportedOp { op: "floor" });
    }

    #[test]
    fn relu_kills_gradient_on_negative_side() {
        let tape = Tape::new();
        let x = tape.var(-0.3);
        let y = x.relu() + x * 2.0;
        assert_eq!(tape.gradient(y, &[x]).unwrap(), vec![2.0]);
    }

    #[test]
    fn constants_have_zero_gradient() {
        let tape = Tape::new();
        let x = tape.var(3.0);
        let c = Var::constant(2.0);
        let y = x * c + c.exp();
        let g = tape.gradient(y, &[x, c]).unwrap();
        assert_eq!(g, vec![2.0, 0.0]);
    }

    #[test]
    fn shared_subexpression_visited_once() {
        let tape = Tape::new();
        let x = tape.var(0.7);
        let s = x.sin();
        let y = s * s + s;
        let g = tape.gradient(y, &[x]).unwrap()[0];
        let expect = (2.0 * 0.7f64.sin() + 1.0) * 0.7f64.cos();
        assert!((g - expect).abs() < 1e-15);
    }
}
