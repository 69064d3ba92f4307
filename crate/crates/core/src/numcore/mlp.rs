//! Small fully connected networks with explicit input Jacobians and
//! vector-Jacobian products, all expressed through [`Real`] ops.

use serde::{Deserialize, Serialize};

use super::ad::Real;
use super::linalg::Mat;
use super::params::ParamMap;
use super::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
    Sigmoid,
    Softplus,
}

impl Activation {
    #[inline]
    pub fn apply<R: Real>(self, z: R) -> R {
        match self {
            Activation::Identity => z,
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.relu(),
            Activation::Sigmoid => z.sigmoid(),
            Activation::Softplus => z.softplus(),
        }
    }

    /// Derivative given pre-activation `z` and output `a`.
    #[inline]
    pub fn deriv<R: Real>(self, z: R, a: R) -> R {
        match self {
            Activation::Identity => R::one(),
            Activation::Tanh => R::one() - a * a,
            Activation::Relu => R::cst(if z.value() > 0.0 { 1.0 } else { 0.0 }),
            Activation::Sigmoid => a * (R::one() - a),
            Activation::Softplus => z.sigmoid(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense<R> {
    /// out × in
    pub w: Mat<R>,
    pub b: Vec<R>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp<R> {
    pub layers: Vec<Dense<R>>,
    pub hidden: Activation,
    pub output: Activation,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct MlpTrace<R> {
    pub pre: Vec<Vec<R>>,
    /// `post[0]` is the input, `post[l + 1]` the output of layer `l`.
    pub post: Vec<Vec<R>>,
}

impl<R> MlpTrace<R> {
    pub fn output(&self) -> &[R] {
        self.post.last().expect("trace has an input")
    }
}

impl Mlp<f64> {
    /// Gaussian initialisation with std `scale / sqrt(fan_in)`, zero biases.
    pub fn random(sizes: &[usize], hidden: Activation, output: Activation, scale: f64, rng: &mut RngStream) -> Self {
        assert!(sizes.len() >= 2);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let sd = scale / (fan_in.max(1) as f64).sqrt();
                Dense {
                    w: Mat::from_fn(fan_out, fan_in, |_, _| sd * rng.normal()),
                    b: vec![0.0; fan_out],
                }
            })
            .collect();
        Mlp { layers, hidden, output }
    }
}

impl<R: Real> Mlp<R> {
    pub fn input_dim(&self) -> usize {
        self.layers[0].w.cols
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().w.rows
    }

    fn act(&self, layer: usize) -> Activation {
        if layer + 1 == self.layers.len() {
            self.output
        } else {
            self.hidden
        }
    }

    pub fn forward(&self, x: &[R]) -> Vec<R> {
        let mut h = x.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let act = self.act(l);
            let mut z = layer.w.matvec(&h);
            for (zi, &bi) in z.iter_mut().zip(&layer.b) {
                *zi = act.apply(*zi + bi);
            }
            h = z;
        }
        h
    }

    pub fn trace(&self, x: &[R]) -> MlpTrace<R> {
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post = Vec::with_capacity(self.layers.len() + 1);
        post.push(x.to_vec());
        for (l, layer) in self.layers.iter().enumerate() {
            let act = self.act(l);
            let z: Vec<R> = layer
                .w
                .matvec(post.last().unwrap())
                .into_iter()
                .zip(&layer.b)
                .map(|(v, &b)| v + b)
                .collect();
            let a: Vec<R> = z.iter().map(|&zi| act.apply(zi)).collect();
            pre.push(z);
            post.push(a);
        }
        MlpTrace { pre, post }
    }

    /// Gradient w.r.t. the input of `upstream · output`.
    pub fn vjp(&self, trace: &MlpTrace<R>, upstream: &[R]) -> Vec<R> {
        let mut g = upstream.to_vec();
        for l in (0..self.layers.len()).rev() {
            let act = self.act(l);
            for (i, gi) in g.iter_mut().enumerate() {
                *gi *= act.deriv(trace.pre[l][i], trace.post[l + 1][i]);
            }
            g = self.layers[l].w.matvec_t(&g);
        }
        g
    }

    /// d output / d input (out × in).
    pub fn jacobian(&self, trace: &MlpTrace<R>) -> Mat<R> {
        let mut j = Mat::<R>::identity(self.input_dim());
        for (l, layer) in self.layers.iter().enumerate() {
            let act = self.act(l);
            let mut next = layer.w.matmul(&j);
            for i in 0..next.rows {
                let d = act.deriv(trace.pre[l][i], trace.post[l + 1][i]);
                for c in 0..next.cols {
                    let v = next.at(i, c) * d;
                    next.set(i, c, v);
                }
            }
            j = next;
        }
        j
    }
}

impl<R: Real> ParamMap<R> for Mlp<R> {
    type Mapped<S: Real> = Mlp<S>;
    fn map_params<S: Real>(&self, f: &mut dyn FnMut(R) -> S) -> Mlp<S> {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|d| Dense {
                    w: d.w.map_params(f),
                    b: d.b.map_params(f),
                })
                .collect(),
            hidden: self.hidden,
            output: self.output,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::ad::{value_and_grad, ScalarFn};
    use crate::numcore::rng::Purpose;

    fn net(out_act: Activation) -> Mlp<f64> {
        let mut rng = RngStream::keyed(5, 0, 0, Purpose::Test);
        Mlp::random(&[3, 6, 2], Activation::Tanh, out_act, 1.0, &mut rng)
    }

    #[test]
    fn jacobian_matches_tape() {
        let m = net(Activation::Sigmoid);
        let x = [0.3, -0.2, 0.9];
        let tr = m.trace(&x);
        let jac = m.jacobian(&tr);
        for out in 0..2 {
            struct Comp<'a>(&'a Mlp<f64>, usize);
            impl ScalarFn for Comp<'_> {
                fn eval<R: Real>(&self, x: &[R]) -> R {
                    let m: Mlp<R> =
                        crate::numcore::params::unflatten(self.0, &crate::numcore::linalg::lift(&crate::numcore::params::flatten(self.0)));
                    m.forward(x)[self.1]
                }
            }
            let (_, g) = value_and_grad(&Comp(&m, out), &x).unwrap();
            for c in 0..3 {
                assert!((g[c] - jac.at(out, c)).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn vjp_is_transposed_jacobian() {
        let m = net(Activation::Softplus);
        let x = [0.1, 0.5, -0.7];
        let tr = m.trace(&x);
        let u = [0.4, -1.3];
        let v = m.vjp(&tr, &u);
        let jt = m.jacobian(&tr).matvec_t(&u);
        for (a, b) in v.iter().zip(&jt) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}
