//! Functor-style parameter traversal.
//!
//! Model structs are generic over their scalar type. [`ParamMap`] rebuilds a
//! struct with every trainable scalar passed through a closure, in a fixed
//! order. That single traversal gives flattening, unflattening and lifting
//! onto a tape.

use super::ad::{Real, Tape, Var};
use super::linalg::Mat;

pub trait ParamMap<R: Real> {
    type Mapped<S: Real>;
    fn map_params<S: Real>(&self, f: &mut dyn FnMut(R) -> S) -> Self::Mapped<S>;
}

impl<R: Real> ParamMap<R> for Vec<R> {
    type Mapped<S: Real> = Vec<S>;
    fn map_params<S: Real>(&self, f: &mut dyn FnMut(R) -> S) -> Vec<S> {
        self.iter().map(|&v| f(v)).collect()
    }
}

impl<R: Real> ParamMap<R> for Mat<R> {
    type Mapped<S: Real> = Mat<S>;
    fn map_params<S: Real>(&self, f: &mut dyn FnMut(R) -> S) -> Mat<S> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

pub fn flatten<R: Real, P: ParamMap<R>>(p: &P) -> Vec<R> {
    let mut out = Vec::new();
    let _ = p.map_params::<R>(&mut |v| {
        out.push(v);
        v
    });
    out
}

pub fn count<R: Real, P: ParamMap<R>>(p: &P) -> usize {
    flatten(p).len()
}

/// Rebuilds `p` with values taken in order from `values`.
///
/// Panics if `values` has the wrong length.
pub fn unflatten<R: Real, S: Real, P: ParamMap<R>>(p: &P, values: &[S]) -> P::Mapped<S> {
    let mut it = values.iter();
    let out = p.map_params::<S>(&mut |_| *it.next().expect("too few parameter values"));
    assert!(it.next().is_none(), "too many parameter values");
    out
}

pub fn to_f64<R: Real, P: ParamMap<R>>(p: &P) -> P::Mapped<f64> {
    p.map_params::<f64>(&mut |v| v.value())
}

/// Registers every parameter as a tape input.
pub fn lift<'t, P: ParamMap<f64>>(p: &P, tape: &'t Tape) -> (P::Mapped<Var<'t>>, Vec<Var<'t>>) {
    let mut inputs = Vec::new();
    let mapped = p.map_params::<Var<'t>>(&mut |v| {
        let x = tape.var(v);
        inputs.push(x);
        x
    });
    (mapped, inputs)
}

/// Embeds constant parameters (no tape inputs).
pub fn constant<'t, P: ParamMap<f64>>(p: &P) -> P::Mapped<Var<'t>> {
    p.map_params::<Var<'t>>(&mut |v| Var::constant(v))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flatten_unflatten_roundtrip() {
        let m = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let flat = flatten(&m);
        assert_eq!(flat, vec![1.0, 2.0, 3.0, 4.0]);
        let doubled: Vec<f64> = flat.iter().map(|v| v * 2.0).collect();
        let m2 = unflatten(&m, &doubled);
        assert_eq!(m2.at(1, 0), 6.0);
    }
}
