//! Learnable position-dependent mass matrix
//! `M(x) = diag(softplus(u(x)) + δ) + V(x) V(x)ᵀ`.
//!
//! `u` and `V` are small MLPs of the latent state; `V` has `rank` columns
//! (rank one by default). All solves and determinants go through the
//! Woodbury identity and the matrix determinant lemma, so nothing larger
//! than `rank × rank` is ever factorised.

use serde::{Deserialize, Serialize};

use crate::numcore::ad::{softplus_inv, Real};
use crate::numcore::linalg::{self, Mat};
use crate::numcore::mlp::{Activation, Dense, Mlp};
use crate::numcore::params::ParamMap;
use crate::numcore::rng::RngStream;

pub const DEFAULT_JITTER: f64 = 1e-4;
pub const DEFAULT_HIDDEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricField<R> {
    /// R^D → R^D, passed through softplus to give the diagonal.
    pub diag_net: Mlp<R>,
    /// R^D → R^{D·rank}, row-major D × rank factor.
    pub factor_net: Mlp<R>,
    pub jitter: f64,
    pub rank: usize,
}

/// The metric evaluated at one point.
#[derive(Debug, Clone)]
pub struct MetricEval<R> {
    /// Positive diagonal part.
    pub d: Vec<R>,
    /// D × rank factor.
    pub v: Mat<R>,
    dinv_v: Mat<R>,
    /// Cholesky factor of the capacitance I + Vᵀ D⁻¹ V.
    cap_chol: Mat<R>,
}

/// Metric plus its first derivatives in x.
#[derive(Debug, Clone)]
pub struct MetricJet<R> {
    pub eval: MetricEval<R>,
    /// `ddiag.at(j, i)` = ∂d_j/∂x_i.
    pub ddiag: Mat<R>,
    /// `dv[i]` = ∂V/∂x_i.
    pub dv: Vec<Mat<R>>,
}

impl<R: Real> MetricEval<R> {
    pub fn new(d: Vec<R>, v: Mat<R>) -> Self {
        let n = d.len();
        assert_eq!(v.rows, n, "factor rows must match diagonal");
        let r = v.cols;
        let dinv_v = Mat::from_fn(n, r, |j, c| v.at(j, c) / d[j]);
        let mut cap = Mat::<R>::identity(r);
        for a in 0..r {
            for b in 0..=a {
                let mut s = cap.at(a, b);
                for j in 0..n {
                    s += v.at(j, a) * dinv_v.at(j, b);
                }
                cap.set(a, b, s);
                cap.set(b, a, s);
            }
        }
        let cap_chol = linalg::cholesky(&cap).expect("capacitance I + VᵀD⁻¹V is positive definite");
        MetricEval { d, v, dinv_v, cap_chol }
    }

    pub fn identity(n: usize) -> Self {
        Self::new(vec![R::one(); n], Mat::zeros(n, 0))
    }

    pub fn dim(&self) -> usize {
        self.d.len()
    }

    pub fn rank(&self) -> usize {
        self.v.cols
    }

    /// 1 + vᵀ D⁻¹ v for a rank-one metric; for higher ranks the capacitance determinant.
    pub fn capacitance_det(&self) -> R {
        (0..self.rank()).fold(R::one(), |acc, i| acc * self.cap_chol.at(i, i) * self.cap_chol.at(i, i))
    }

    pub fn dense(&self) -> Mat<R> {
        let n = self.dim();
        Mat::from_fn(n, n, |i, j| {
            let mut s = if i == j { self.d[i] } else { R::zero() };
            for c in 0..self.rank() {
                s += self.v.at(i, c) * self.v.at(j, c);
            }
            s
        })
    }

    /// M⁻¹ b via Sherman–Morrison–Woodbury.
    pub fn solve(&self, b: &[R]) -> Vec<R> {
        let dinv_b: Vec<R> = b.iter().zip(&self.d).map(|(&bi, &di)| bi / di).collect();
        if self.rank() == 0 {
            return dinv_b;
        }
        let vt_dinv_b = self.v.matvec_t(&dinv_b);
        let w = linalg::chol_solve(&self.cap_chol, &vt_dinv_b);
        let corr = self.dinv_v.matvec(&w);
        dinv_b.iter().zip(&corr).map(|(&a, &c)| a - c).collect()
    }

    /// log |M| via the matrix determinant lemma.
    pub fn logdet(&self) -> R {
        let base = self.d.iter().fold(R::zero(), |acc, &di| acc + di.ln());
        if self.rank() == 0 {
            base
        } else {
            base + linalg::chol_logdet(&self.cap_chol)
        }
    }

    /// bᵀ M⁻¹ b
    pub fn quad(&self, b: &[R]) -> R {
        linalg::dot(b, &self.solve(b))
    }

    /// M⁻¹ V (D × rank), equal to D⁻¹ V C⁻¹.
    pub fn inv_times_factor(&self) -> Mat<R> {
        let n = self.dim();
        let r = self.rank();
        let mut out = Mat::zeros(n, r);
        for j in 0..n {
            let row: Vec<R> = self.dinv_v.row(j).to_vec();
            let z = linalg::chol_solve(&self.cap_chol, &row);
            for c in 0..r {
                out.set(j, c, z[c]);
            }
        }
        out
    }

    /// Diagonal of M⁻¹.
    pub fn inv_diag(&self, inv_v: &Mat<R>) -> Vec<R> {
        (0..self.dim())
            .map(|j| {
                let mut s = self.d[j].recip();
                for c in 0..self.rank() {
                    s -= self.dinv_v.at(j, c) * inv_v.at(j, c);
                }
                s
            })
            .collect()
    }

    /// Number of standard-normal draws consumed by [`MetricEval::sample_with`].
    pub fn noise_dim(&self) -> usize {
        self.dim() + self.rank()
    }

    /// A draw from N(0, M) as sqrt(d)⊙ξ + Vη, with noise = [ξ; η].
    pub fn sample_with(&self, noise: &[f64]) -> Vec<R> {
        let n = self.dim();
        let (xi, eta) = noise.split_at(n);
        let eta: Vec<R> = eta.iter().map(|&e| R::cst(e)).collect();
        let low = if self.rank() > 0 { self.v.matvec(&eta) } else { vec![R::zero(); n] };
        (0..n).map(|j| self.d[j].sqrt() * xi[j] + low[j]).collect()
    }

    /// log N(p | 0, M)
    pub fn momentum_logpdf(&self, p: &[R]) -> R {
        let n = self.dim() as f64;
        -(self.quad(p) + self.logdet()) * 0.5 - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
    }
}

impl<R: Real> MetricJet<R> {
    pub fn constant(eval: MetricEval<R>) -> Self {
        let n = eval.dim();
        let r = eval.rank();
        MetricJet {
            eval,
            ddiag: Mat::zeros(n, n),
            dv: (0..n).map(|_| Mat::zeros(n, r)).collect(),
        }
    }

    /// Dense ∂M/∂x_i for every i.
    pub fn dense_derivatives(&self) -> Vec<Mat<R>> {
        let n = self.eval.dim();
        let r = self.eval.rank();
        (0..n)
            .map(|i| {
                Mat::from_fn(n, n, |a, b| {
                    let mut s = if a == b { self.ddiag.at(a, i) } else { R::zero() };
                    let dv = &self.dv[i];
                    for c in 0..r {
                        s += dv.at(a, c) * self.eval.v.at(b, c) + self.eval.v.at(a, c) * dv.at(b, c);
                    }
                    s
                })
            })
            .collect()
    }
}

/// Anything that can supply a metric and its x-derivatives.
pub trait MetricSource<R: Real> {
    fn dim(&self) -> usize;
    fn eval(&self, x: &[R]) -> MetricEval<R>;
    fn jet(&self, x: &[R]) -> MetricJet<R>;
    /// True when the metric does not depend on x.
    fn is_constant(&self) -> bool;
}

/// A metric that is the same everywhere.
#[derive(Debug, Clone)]
pub struct ConstantMetric<R> {
    eval: MetricEval<R>,
}

impl<R: Real> ConstantMetric<R> {
    pub fn new(eval: MetricEval<R>) -> Self {
        ConstantMetric { eval }
    }

    pub fn identity(n: usize) -> Self {
        Self::new(MetricEval::identity(n))
    }
}

impl<R: Real> MetricSource<R> for ConstantMetric<R> {
    fn dim(&self) -> usize {
        self.eval.dim()
    }
    fn eval(&self, _x: &[R]) -> MetricEval<R> {
        self.eval.clone()
    }
    fn jet(&self, _x: &[R]) -> MetricJet<R> {
        MetricJet::constant(self.eval.clone())
    }
    fn is_constant(&self) -> bool {
        true
    }
}

impl MetricField<f64> {
    /// A field whose value is exactly the identity everywhere (up to rounding).
    pub fn identity(dim: usize, hidden: usize, rank: usize, jitter: f64) -> Self {
        let zero_net = |out: usize, bias: f64| Mlp {
            layers: vec![
                Dense {
                    w: Mat::zeros(hidden, dim),
                    b: vec![0.0; hidden],
                },
                Dense {
                    w: Mat::zeros(out, hidden),
                    b: vec![bias; out],
                },
            ],
            hidden: Activation::Tanh,
            output: Activation::Identity,
        };
        MetricField {
            diag_net: zero_net(dim, softplus_inv(1.0 - jitter)),
            factor_net: zero_net(dim * rank, 0.0),
            jitter,
            rank,
        }
    }

    /// Random weights with the given scale on top of an identity-centred bias.
    pub fn random(dim: usize, hidden: usize, rank: usize, scale: f64, rng: &mut RngStream) -> Self {
        let mut diag_net = Mlp::random(&[dim, hidden, dim], Activation::Tanh, Activation::Identity, scale, rng);
        let factor_net = Mlp::random(&[dim, hidden, dim * rank], Activation::Tanh, Activation::Identity, scale, rng);
        for b in diag_net.layers[1].b.iter_mut() {
            *b = softplus_inv(1.0 - DEFAULT_JITTER);
        }
        MetricField {
            diag_net,
            factor_net,
            jitter: DEFAULT_JITTER,
            rank,
        }
    }

    pub fn default_for(dim: usize, rng: &mut RngStream) -> Self {
        Self::random(dim, DEFAULT_HIDDEN, 1, 0.1, rng)
    }
}

impl<R: Real> MetricField<R> {
    pub fn latent_dim(&self) -> usize {
        self.diag_net.input_dim()
    }

    /// M_φ(x).
    pub fn metric_eval(&self, x: &[R]) -> MetricEval<R> {
        let n = self.latent_dim();
        assert_eq!(x.len(), n, "metric input dimension");
        let u = self.diag_net.forward(x);
        let d: Vec<R> = u.iter().map(|&ui| ui.softplus() + self.jitter).collect();
        let flat = self.factor_net.forward(x);
        let v = Mat {
            rows: n,
            cols: self.rank,
            data: flat,
        };
        MetricEval::new(d, v)
    }

    /// M_φ(x) with ∂d/∂x and ∂V/∂x.
    pub fn metric_jet(&self, x: &[R]) -> MetricJet<R> {
        let n = self.latent_dim();
        let r = self.rank;
        let tu = self.diag_net.trace(x);
        let ju = self.diag_net.jacobian(&tu);
        let u = tu.output();
        let d: Vec<R> = u.iter().map(|&ui| ui.softplus() + self.jitter).collect();
        let ddiag = Mat::from_fn(n, n, |j, i| u[j].sigmoid() * ju.at(j, i));
        let tv = self.factor_net.trace(x);
        let jv = self.factor_net.jacobian(&tv);
        let v = Mat {
            rows: n,
            cols: r,
            data: tv.output().to_vec(),
        };
        let dv = (0..n).map(|i| Mat::from_fn(n, r, |j, c| jv.at(j * r + c, i))).collect();
        MetricJet {
            eval: MetricEval::new(d, v),
            ddiag,
            dv,
        }
    }

    /// Dense ∂M/∂x_i for each coordinate i.
    pub fn metric_dx(&self, x: &[R]) -> Vec<Mat<R>> {
        self.metric_jet(x).dense_derivatives()
    }
}

impl<R: Real> MetricSource<R> for MetricField<R> {
    fn dim(&self) -> usize {
        self.latent_dim()
    }
    fn eval(&self, x: &[R]) -> MetricEval<R> {
        self.metric_eval(x)
    }
    fn jet(&self, x: &[R]) -> MetricJet<R> {
        self.metric_jet(x)
    }
    fn is_constant(&self) -> bool {
        false
    }
}

impl<R: Real> ParamMap<R> for MetricField<R> {
    type Mapped<S: Real> = MetricField<S>;
    fn map_params<S: Real>(&self, f: &mut dyn FnMut(R) -> S) -> MetricField<S> {
        MetricField {
            diag_net: self.diag_net.map_params(f),
            factor_net: self.factor_net.map_params(f),
            jitter: self.jitter,
            rank: self.rank,
        }
    }
}

/// Free-function forms of the metric operations.
pub fn metric_eval<R: Real>(field: &MetricField<R>, x: &[R]) -> MetricEval<R> {
    field.metric_eval(x)
}

pub fn metric_solve<R: Real>(m: &MetricEval<R>, b: &[R]) -> Vec<R> {
    m.solve(b)
}

pub fn metric_logdet<R: Real>(m: &MetricEval<R>) -> R {
    m.logdet()
}

pub fn metric_dx<R: Real>(field: &MetricField<R>, x: &[R]) -> Vec<Mat<R>> {
    field.metric_dx(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::fd::fd_jacobian;
    use crate::numcore::rng::Purpose;

    fn field(seed: u64, scale: f64) -> MetricField<f64> {
        let mut rng = RngStream::keyed(seed, 0, 0, Purpose::Test);
        MetricField::random(3, 8, 1, scale, &mut rng)
    }

    #[test]
    fn identity_field_gives_identity() {
        let f = MetricField::identity(2, 4, 1, DEFAULT_JITTER);
        let m = f.metric_eval(&[0.3, -2.0]).dense();
        let eye = Mat::<f64>::identity(2);
        assert!(linalg::max_abs_diff(&m.data, &eye.data) < 1e-12);
        assert!(f.metric_eval(&[1.0, 1.0]).logdet().abs() < 1e-12);
    }

    #[test]
    fn rank_one_arithmetic() {
        let m = MetricEval::new(vec![1.0, 1.0], Mat::from_rows(&[vec![1.0], vec![0.0]]));
        assert_eq!(m.dense().data, vec![2.0, 0.0, 0.0, 1.0]);
        let s = m.solve(&[1.0, 1.0]);
        assert!((s[0] - 0.5).abs() < 1e-15 && (s[1] - 1.0).abs() < 1e-15);
        assert!((m.logdet() - 2f64.ln()).abs() < 1e-15);
        assert!((m.capacitance_det() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn identity_solve_is_noop() {
        let m = MetricEval::<f64>::identity(3);
        assert_eq!(m.solve(&[1.0, -2.0, 3.5]), vec![1.0, -2.0, 3.5]);
        assert_eq!(m.logdet(), 0.0);
    }

    #[test]
    fn constant_field_has_zero_derivatives() {
        let f = MetricField::identity(3, 5, 1, DEFAULT_JITTER);
        for dm in f.metric_dx(&[0.1, 0.2, 0.3]) {
            assert!(dm.data.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn one_dimensional_softplus_derivative() {
        // u(x) = x, no factor, vanishing jitter: dM/dx = sigmoid(x)
        let f = MetricField {
            diag_net: Mlp {
                layers: vec![Dense {
                    w: Mat::from_rows(&[vec![1.0]]),
                    b: vec![0.0],
                }],
                hidden: Activation::Identity,
                output: Activation::Identity,
            },
            factor_net: Mlp {
                layers: vec![Dense {
                    w: Mat::zeros(1, 1),
                    b: vec![0.0],
                }],
                hidden: Activation::Identity,
                output: Activation::Identity,
            },
            jitter: 1e-300,
            rank: 1,
        };
        for x in [-2.0, 0.0, 0.7] {
            let d = f.metric_dx(&[x])[0].at(0, 0);
            assert!((d - crate::numcore::ad::sigmoid_f64(x)).abs() < 1e-15);
        }
    }

    #[test]
    fn derivatives_match_finite_differences_and_are_symmetric() {
        let f = field(3, 1.0);
        let x = [0.2, -0.4, 0.9];
        let dms = f.metric_dx(&x);
        for (i, dm) in dms.iter().enumerate() {
            let jac = fd_jacobian(|p| f.metric_eval(p).dense().data, &x, 1e-5);
            for k in 0..9 {
                let fd = jac[k][i];
                let an = dm.data[k];
                assert!((fd - an).abs() < 1e-5 * (1.0 + an.abs()), "entry {k} coord {i}: {fd} vs {an}");
            }
            for a in 0..3 {
                for b in 0..3 {
                    assert_eq!(dm.at(a, b), dm.at(b, a));
                }
            }
        }
    }
}
