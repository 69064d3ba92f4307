//! Linear-Gaussian reference model fitted by maximising the exact Kalman
//! log-likelihood.

use serde::{Deserialize, Serialize};

use super::{Adam, OptimizerConfig};
use crate::numcore::ad::{Real, Tape};
use crate::numcore::linalg::Mat;
use crate::numcore::params::{flatten, unflatten, ParamMap};
use crate::numcore::rng::RngStream;
use crate::ssm::{kalman_filter, LgssmSpec, Sequence, SsmError};

/// `x_t = A x_{t−1} + B [1; u_t] + w`, `y_t = C x_t + d + v` with diagonal
/// noise; the leading column of B is the transition offset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearBaseline<R> {
    pub a: Mat<R>,
    pub b: Mat<R>,
    pub c: Mat<R>,
    pub d: Vec<R>,
    pub log_q: Vec<R>,
    pub log_r: Vec<R>,
    pub m0: Vec<R>,
    pub log_p0: Vec<R>,
}

impl<R: Real> ParamMap<R> for LinearBaseline<R> {
    type Mapped<S: Real> = LinearBaseline<S>;
    fn map_params<S: Real>(&self, f: &mut dyn FnMut(R) -> S) -> LinearBaseline<S> {
        LinearBaseline {
            a: self.a.map_params(f),
            b: self.b.map_params(f),
            c: self.c.map_params(f),
            d: self.d.map_params(f),
            log_q: self.log_q.map_params(f),
            log_r: self.log_r.map_params(f),
            m0: self.m0.map_params(f),
            log_p0: self.log_p0.map_params(f),
        }
    }
}

fn exp_diag<R: Real>(v: &[R]) -> Mat<R> {
    Mat::diag(&v.iter().map(|x| x.exp()).collect::<Vec<_>>())
}

fn augmented_inputs(seq: &Sequence) -> Vec<Vec<f64>> {
    (0..seq.len())
        .map(|t| {
            let mut u = vec![1.0];
            u.extend_from_slice(seq.input(t));
            u
        })
        .collect()
}

impl<R: Real> LinearBaseline<R> {
    pub fn spec(&self) -> LgssmSpec<R> {
        LgssmSpec {
            a: self.a.clone(),
            b: self.b.clone(),
            c: self.c.clone(),
            d: self.d.clone(),
            q: exp_diag(&self.log_q),
            r: exp_diag(&self.log_r),
            m0: self.m0.clone(),
            p0: exp_diag(&self.log_p0),
        }
    }

    pub fn loglik(&self, seq: &Sequence) -> Result<R, SsmError> {
        Ok(kalman_filter(&self.spec(), &seq.y, &augmented_inputs(seq))?.loglik)
    }
}

impl LinearBaseline<f64> {
    pub fn init(latent_dim: usize, obs_dim: usize, input_dim: usize, rng: &mut RngStream) -> Self {
        let (dx, dy) = (latent_dim, obs_dim);
        LinearBaseline {
            a: Mat::from_fn(dx, dx, |i, j| if i == j { 0.5 } else { 0.0 } + 0.05 * rng.normal()),
            b: Mat::zeros(dx, 1 + input_dim),
            c: Mat::from_fn(dy, dx, |_, _| 0.3 * rng.normal()),
            d: vec![0.0; dy],
            log_q: vec![(0.5f64).ln(); dx],
            log_r: vec![0.0; dy],
            m0: vec![0.0; dx],
            log_p0: vec![0.0; dx],
        }
    }

    /// One-step predictive means E[y_t | y_{<t}].
    pub fn predict(&self, seq: &Sequence) -> Result<Vec<Vec<f64>>, SsmError> {
        Ok(kalman_filter(&self.spec(), &seq.y, &augmented_inputs(seq))?.predictions)
    }

    /// Adam ascent on the mean per-step log-likelihood of `data`, full
    /// batch. Returns the objective before each step.
    pub fn fit(&mut self, data: &[Sequence], opt: &OptimizerConfig) -> Result<Vec<f64>, SsmError> {
        let steps: usize = data.iter().map(|s| s.len()).sum();
        let mut params = flatten(self);
        let mut adam = Adam::new(opt, params.len());
        let mut trace = Vec::with_capacity(opt.steps);
        for _ in 0..opt.steps {
            let tape = Tape::new();
            let vars = tape.vars(&params);
            let m: LinearBaseline<_> = unflatten(self, &vars);
            let mut total = crate::numcore::ad::Var::constant(0.0);
            for s in data {
                total += m.loglik(s)?;
            }
            let obj = total / steps as f64;
            let g = tape.gradient(obj, &vars).map_err(|e| SsmError::Invalid(e.to_string()))?;
            trace.push(obj.value());
            if g.iter().any(|v| !v.is_finite()) {
                return Err(SsmError::Invalid("non-finite baseline gradient".into()));
            }
            adam.ascend(&mut params, &g);
        }
        *self = unflatten(self, &params);
        Ok(trace)
    }
}

/// Root-mean-square error over every entry of every step from `skip` on.
pub fn one_step_rmse(predictions: &[Vec<f64>], observed: &[Vec<f64>], skip: usize) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for (p, y) in predictions.iter().zip(observed).skip(skip) {
        for (a, b) in p.iter().zip(y) {
            s += (a - b) * (a - b);
            n += 1;
        }
    }
    (s / n.max(1) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::rng::Purpose;
    use crate::ssm::{kalman_loglik, SsmModel};

    #[test]
    fn fitting_recovers_a_linear_system() {
        let mut rng = RngStream::keyed(1, 0, 0, Purpose::Test);
        let truth = LgssmSpec::random(1, 2, 0.2, 0.1, &mut rng);
        let gen = SsmModel::from_lgssm(&truth).unwrap();
        let data: Vec<Sequence> = (0..4)
            .map(|n| {
                let (_, y) = gen.simulate(10 + n, 60, &[]);
                Sequence {
                    id: format!("{n}"),
                    y,
                    u: vec![],
                }
            })
            .collect();
        let steps = 240.0;
        let oracle: f64 = data.iter().map(|s| kalman_loglik(&truth, &s.y, &[]).unwrap()).sum::<f64>() / steps;
        let mut m = LinearBaseline::init(1, 2, 0, &mut rng);
        let opt = OptimizerConfig {
            learning_rate: 0.05,
            steps: 300,
            ..Default::default()
        };
        let trace = m.fit(&data, &opt).unwrap();
        assert!(trace.last().unwrap() > &trace[0]);
        // maximum likelihood on this data is at least as good as the truth, up to optimisation slack
        assert!(*trace.last().unwrap() > oracle - 0.02, "{} vs {oracle}", trace.last().unwrap());
    }

    #[test]
    fn rmse_of_exact_prediction_is_zero() {
        let y = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        assert_eq!(one_step_rmse(&y, &y, 0), 0.0);
        assert!((one_step_rmse(&[vec![0.0, 0.0]], &[vec![3.0, 4.0]], 0) - (12.5f64).sqrt()).abs() < 1e-15);
    }
}
