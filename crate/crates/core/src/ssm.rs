//! State-space models: the generic interface filters run against, a neural
//! model (linear or MLP transition, linear or MLP decoder, Gaussian or
//! Poisson emission), the linear-Gaussian spec with its exact Kalman
//! likelihood, synthetic data generators and the JSONL dataset format.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dist::{diag_logpdf, poisson_logpmf};
use crate::numcore::ad::Real;
use crate::numcore::linalg::{self, LinalgError, Mat};
use crate::numcore::mlp::{Activation, Dense, Mlp};
use crate::numcore::params::ParamMap;
use crate::numcore::rng::{derive_seed, Purpose, RngStream};

#[derive(Debug, Error)]
pub enum SsmError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch { what: &'static str, expected: usize, got: usize },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("dataset line {line}: {source}")]
    Parse { line: usize, source: serde_json::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// What the filters need from a model. Transition and initial densities are
/// diagonal Gaussians; observations and inputs are data.
pub trait StateSpace<R: Real> {
    fn latent_dim(&self) -> usize;

    /// Mean and variance of p(x_1 | u_1).
    fn initial(&self, u: &[f64]) -> (Vec<R>, Vec<R>);

    /// Mean and variance of f(x_t | x_{t−1}, u_t, y_{t−1}).
    fn transition(&self, x_prev: &[R], u: &[f64], y_prev: &[f64]) -> (Vec<R>, Vec<R>);

    /// log g(y | x)
    fn emission_loglik(&self, x: &[R], y: &[f64]) -> R;

    /// log g(y | x) and its gradient in x.
    fn emission_loglik_grad(&self, x: &[R], y: &[f64]) -> (R, Vec<R>);

    /// E[y | x]
    fn emission_mean(&self, x: &[R]) -> Vec<R>;
}

/// log g(y|x) + log f(x | x_prev, u, y_prev).
pub fn joint_loglik<R: Real, M: StateSpace<R> + ?Sized>(model: &M, x: &[R], x_prev: &[R], u: &[f64], y: &[f64], y_prev: &[f64]) -> R {
    let (mean, var) = model.transition(x_prev, u, y_prev);
    model.emission_loglik(x, y) + diag_logpdf(x, &mean, &var)
}

/// Gradient in x of log f for a diagonal Gaussian transition.
pub fn diag_logpdf_grad<R: Real>(x: &[R], mean: &[R], var: &[R]) -> Vec<R> {
    x.iter().zip(mean).zip(var).map(|((&xi, &mi), &vi)| (mi - xi) / vi).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum EmissionFamily<R> {
    /// Independent Gaussian noise with per-output log-variance.
    Gaussian { log_var: Vec<R> },
    /// Counts with rate softplus(decoder output).
    Poisson,
}

/// Learned affine output map `lo + width ⊙ out`, so a sigmoid decoder
/// covers the interval (lo, lo + width).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputRange<R> {
    pub lo: Vec<R>,
    pub width: Vec<R>,
}

impl<R: Real> OutputRange<R> {
    pub fn unit(n: usize) -> Self {
        OutputRange {
            lo: vec![R::zero(); n],
            width: vec![R::one(); n],
        }
    }

    fn apply(&self, out: &[R]) -> Vec<R> {
        out.iter().zip(&self.lo).zip(&self.width).map(|((&o, &l), &w)| l + o * w).collect()
    }
}

/// y ~ Π(decoder(x)). The decoder is an MLP whose output is optionally
/// passed through a learned [`OutputRange`] (used with a sigmoid output).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Emission<R> {
    pub decoder: Mlp<R>,
    pub range: Option<OutputRange<R>>,
    pub family: EmissionFamily<R>,
}

impl<R: Real> Emission<R> {
    pub fn obs_dim(&self) -> usize {
        self.decoder.output_dim()
    }

    pub fn decode(&self, x: &[R]) -> Vec<R> {
        let out = self.decoder.forward(x);
        match &self.range {
            Some(r) => r.apply(&out),
            None => out,
        }
    }

    /// ∂ log g / ∂ decoder output, and log g.
    fn outer(&self, out: &[R], y: &[f64]) -> (R, Vec<R>) {
        match &self.family {
            EmissionFamily::Gaussian { log_var } => {
                let mut ll = R::zero();
                let mut g = Vec::with_capacity(out.len());
                for ((&o, &yi), &lv) in out.iter().zip(y).zip(log_var) {
                    let inv = (-lv).exp();
                    let r = -o + yi;
                    ll += r * r * inv + lv;
                    g.push(r * inv);
                }
                (-ll * 0.5 - 0.918_938_533_204_672_8 * out.len() as f64, g)
            }
            EmissionFamily::Poisson => {
                let mut ll = R::zero();
                let mut g = Vec::with_capacity(out.len());
                for (&o, &yi) in out.iter().zip(y) {
                    let rate = o.softplus();
                    ll += poisson_logpmf(yi, rate);
                    g.push((rate.recip() * yi - 1.0) * o.sigmoid());
                }
                (ll, g)
            }
        }
    }

    pub fn mean(&self, x: &[R]) -> Vec<R> {
        let out = self.decode(x);
        match self.family {
            EmissionFamily::Gaussian { .. } => out,
            EmissionFamily::Poisson => out.into_iter().map(|o| o.softplus()).collect(),
        }
    }

    pub fn loglik(&self, x: &[R], y: &[f64]) -> R {
        self.outer(&self.decode(x), y).0
    }

    pub fn loglik_grad(&self, x: &[R], y: &[f64]) -> (R, Vec<R>) {
        let tr = self.decoder.trace(x);
        let raw = tr.output();
        let out: Vec<R> = match &self.range {
            Some(r) => r.apply(raw),
            None => raw.to_vec(),
        };
        let (ll, mut up) = self.outer(&out, y);
        if let Some(r) = &self.range {
            for (u, &w) in up.iter_mut().zip(&r.width) {
                *u *= w;
            }
        }
        (ll, self.decoder.vjp(&tr, &up))
    }
}

impl<R: Real> ParamMap<R> for Emission<R> {
    type Mapped<S: Real> = Emission<S>;
    fn map_params<S: Real>(&self, f: &mut dyn FnMut(R) -> S) -> Emission<S> {
        Emission {
            decoder: self.decoder.map_params(f),
            range: self.range.as_ref().map(|r| OutputRange {
                lo: r.lo.map_params(f),
                width: r.width.map_params(f),
            }),
            family: match &self.family {
                EmissionFamily::Gaussian { log_var } => EmissionFamily::Gaussian {
                    log_var: log_var.map_params(f),
                },
                EmissionFamily::Poisson => EmissionFamily::Poisson,
            },
        }
    }
}

/// Gaussian state-space model with a neural (or linear) mean network and
/// input-independent diagonal noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SsmModel<R> {
    pub latent_dim: usize,
    pub input_dim: usize,
    pub obs_dim: usize,
    pub init_mean: Vec<R>,
    pub init_log_var: Vec<R>,
    /// Input is `[x_{t−1}, u_t]`, plus `y_{t−1}` when `condition_on_prev_obs`.
    pub transition_net: Mlp<R>,
    pub transition_log_var: Vec<R>,
    pub condition_on_prev_obs: bool,
    pub emission: Emission<R>,
}

impl<R: Real> SsmModel<R> {
    pub fn transition_input(&self, x_prev: &[R], u: &[f64], y_prev: &[f64]) -> Vec<R> {
        let mut inp = Vec::with_capacity(self.transition_net.input_dim());
        inp.extend_from_slice(x_prev);
        inp.extend(u.iter().map(|&v| R::cst(v)));
        if self.condition_on_prev_obs {
            inp.extend(y_prev.iter().map(|&v| R::cst(v)));
        }
        inp
    }

    pub fn validate(&self) -> Result<(), SsmError> {
        let expect = self.latent_dim + self.input_dim + if self.condition_on_prev_obs { self.obs_dim } else { 0 };
        let checks = [
            ("transition input", expect, self.transition_net.input_dim()),
            ("transition output", self.latent_dim, self.transition_net.output_dim()),
            ("transition variance", self.latent_dim, self.transition_log_var.len()),
            ("initial mean", self.latent_dim, self.init_mean.len()),
            ("initial variance", self.latent_dim, self.init_log_var.len()),
            ("decoder input", self.latent_dim, self.emission.decoder.input_dim()),
            ("decoder output", self.obs_dim, self.emission.obs_dim()),
        ];
        for (what, expected, got) in checks {
            if expected != got {
                return Err(SsmError::DimensionMismatch { what, expected, got });
            }
        }
        Ok(())
    }
}

impl<R: Real> StateSpace<R> for SsmModel<R> {
    fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn initial(&self, _u: &[f64]) -> (Vec<R>, Vec<R>) {
        (self.init_mean.clone(), self.init_log_var.iter().map(|&v| v.exp()).collect())
    }

    fn transition(&self, x_prev: &[R], u: &[f64], y_prev: &[f64]) -> (Vec<R>, Vec<R>) {
        let mean = self.transition_net.forward(&self.transition_input(x_prev, u, y_prev));
        (mean, self.transition_log_var.iter().map(|&v| v.exp()).collect())
    }

    fn emission_loglik(&self, x: &[R], y: &[f64]) -> R {
        self.emission.loglik(x, y)
    }

    fn emission_loglik_grad(&self, x: &[R], y: &[f64]) -> (R, Vec<R>) {
        self.emission.loglik_grad(x, y)
    }

    fn emission_mean(&self, x: &[R]) -> Vec<R> {
        self.emission.mean(x)
    }
}

impl<R: Real> ParamMap<R> for SsmModel<R> {
    type Mapped<S: Real> = SsmModel<S>;
    fn map_params<S: Real>(&self, f: &mut dyn FnMut(R) -> S) -> SsmModel<S> {
        SsmModel {
            latent_dim: self.latent_dim,
            input_dim: self.input_dim,
            obs_dim: self.obs_dim,
            init_mean: self.init_mean.map_params(f),
            init_log_var: self.init_log_var.map_params(f),
            transition_net: self.transition_net.map_params(f),
            transition_log_var: self.transition_log_var.map_params(f),
            condition_on_prev_obs: self.condition_on_prev_obs,
            emission: self.emission.map_params(f),
        }
    }
}

/// Architecture choices for a freshly initialised neural model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NeuralSpec {
    pub latent_dim: usize,
    pub input_dim: usize,
    pub obs_dim: usize,
    /// 0 gives a linear transition.
    pub transition_hidden: usize,
    /// 0 gives a linear decoder.
    pub decoder_hidden: usize,
    pub condition_on_prev_obs: bool,
    pub poisson: bool,
    pub init_scale: f64,
}

impl Default for NeuralSpec {
    fn default() -> Self {
        NeuralSpec {
            latent_dim: 10,
            input_dim: 0,
            obs_dim: 30,
            transition_hidden: 20,
            decoder_hidden: 20,
            condition_on_prev_obs: true,
            poisson: false,
            init_scale: 0.5,
        }
    }
}

impl SsmModel<f64> {
    pub fn random(spec: &NeuralSpec, rng: &mut RngStream) -> Self {
        let (dx, dy) = (spec.latent_dim, spec.obs_dim);
        let tin = dx + spec.input_dim + if spec.condition_on_prev_obs { dy } else { 0 };
        let transition_net = if spec.transition_hidden == 0 {
            Mlp::random(&[tin, dx], Activation::Identity, Activation::Identity, spec.init_scale, rng)
        } else {
            Mlp::random(
                &[tin, spec.transition_hidden, dx],
                Activation::Tanh,
                Activation::Identity,
                spec.init_scale,
                rng,
            )
        };
        let (decoder, range) = if spec.decoder_hidden == 0 {
            (
                Mlp::random(&[dx, dy], Activation::Identity, Activation::Identity, spec.init_scale, rng),
                None,
            )
        } else {
            (
                Mlp::random(
                    &[dx, spec.decoder_hidden, dy],
                    Activation::Relu,
                    Activation::Sigmoid,
                    spec.init_scale,
                    rng,
                ),
                Some(OutputRange::unit(dy)),
            )
        };
        let family = if spec.poisson {
            EmissionFamily::Poisson
        } else {
            EmissionFamily::Gaussian { log_var: vec![0.0; dy] }
        };
        SsmModel {
            latent_dim: dx,
            input_dim: spec.input_dim,
            obs_dim: dy,
            init_mean: vec![0.0; dx],
            init_log_var: vec![0.0; dx],
            transition_net,
            transition_log_var: vec![(0.5f64).ln(); dx],
            condition_on_prev_obs: spec.condition_on_prev_obs,
            emission: Emission { decoder, range, family },
        }
    }

    /// The neural-model form of a linear-Gaussian spec. Needs diagonal
    /// process, observation and initial covariances.
    pub fn from_lgssm(spec: &LgssmSpec<f64>) -> Result<Self, SsmError> {
        let diag_of = |m: &Mat<f64>, what: &str| -> Result<Vec<f64>, SsmError> {
            for i in 0..m.rows {
                for j in 0..m.cols {
                    if i != j && m.at(i, j) != 0.0 {
                        return Err(SsmError::Invalid(format!("{what} covariance must be diagonal")));
                    }
                }
            }
            Ok((0..m.rows).map(|i| m.at(i, i).ln()).collect())
        };
        let dx = spec.a.rows;
        let du = spec.b.cols;
        let w = Mat::from_fn(dx, dx + du, |i, j| if j < dx { spec.a.at(i, j) } else { spec.b.at(i, j - dx) });
        Ok(SsmModel {
            latent_dim: dx,
            input_dim: du,
            obs_dim: spec.c.rows,
            init_mean: spec.m0.clone(),
            init_log_var: diag_of(&spec.p0, "initial")?,
            transition_net: Mlp {
                layers: vec![Dense { w, b: vec![0.0; dx] }],
                hidden: Activation::Identity,
                output: Activation::Identity,
            },
            transition_log_var: diag_of(&spec.q, "process")?,
            condition_on_prev_obs: false,
            emission: Emission {
                decoder: Mlp {
                    layers: vec![Dense {
                        w: spec.c.clone(),
                        b: spec.d.clone(),
                    }],
                    hidden: Activation::Identity,
                    output: Activation::Identity,
                },
                range: None,
                family: EmissionFamily::Gaussian {
                    log_var: diag_of(&spec.r, "observation")?,
                },
            },
        })
    }

    /// Draws latents and observations of length `t`.
    pub fn simulate(&self, seed: u64, t: usize, inputs: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let empty: Vec<f64> = Vec::new();
        let u_at = |i: usize| inputs.get(i).unwrap_or(&empty).as_slice();
        let mut xs: Vec<Vec<f64>> = Vec::with_capacity(t);
        let mut ys: Vec<Vec<f64>> = Vec::with_capacity(t);
        for i in 0..t {
            let mut rng = RngStream::keyed(seed, i, 0, Purpose::Synthetic);
            let (mean, var) = if i == 0 {
                self.initial(u_at(0))
            } else {
                self.transition(&xs[i - 1], u_at(i), &ys[i - 1])
            };
            let x: Vec<f64> = mean.iter().zip(&var).map(|(m, v)| m + v.sqrt() * rng.normal()).collect();
            let out = self.emission.decode(&x);
            let mut erng = RngStream::keyed(seed, i, 0, Purpose::Emission);
            let y = match &self.emission.family {
                EmissionFamily::Gaussian { log_var } => out
                    .iter()
                    .zip(log_var)
                    .map(|(o, lv)| o + (0.5 * lv).exp() * erng.normal())
                    .collect(),
                EmissionFamily::Poisson => out
                    .iter()
                    .map(|&o| {
                        use rand_distr::Distribution;
                        let rate = crate::numcore::ad::softplus_f64(o).max(1e-12);
                        rand_distr::Poisson::new(rate).map(|d| d.sample(&mut erng)).unwrap_or(0.0)
                    })
                    .collect(),
            };
            xs.push(x);
            ys.push(y);
        }
        (xs, ys)
    }
}

/// Linear-Gaussian state-space model
/// `x_1 ~ N(m0, P0)`, `x_t = A x_{t−1} + B u_t + w`, `y_t = C x_t + d + v`,
/// `w ~ N(0, Q)`, `v ~ N(0, R)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LgssmSpec<R> {
    pub a: Mat<R>,
    pub b: Mat<R>,
    pub c: Mat<R>,
    pub d: Vec<R>,
    pub q: Mat<R>,
    pub r: Mat<R>,
    pub m0: Vec<R>,
    pub p0: Mat<R>,
}

impl LgssmSpec<f64> {
    /// Random stable system with diagonal noise covariances.
    pub fn random(dx: usize, dy: usize, q_var: f64, r_var: f64, rng: &mut RngStream) -> Self {
        let a = Mat::from_fn(dx, dx, |_, _| rng.normal());
        let a = rescale_spectral_radius(&a, 0.9);
        LgssmSpec {
            a,
            b: Mat::zeros(dx, 0),
            c: Mat::from_fn(dy, dx, |_, _| rng.normal() / (dx as f64).sqrt()),
            d: vec![0.0; dy],
            q: Mat::diag(&vec![q_var; dx]),
            r: Mat::diag(&vec![r_var; dy]),
            m0: vec![0.0; dx],
            p0: Mat::identity(dx),
        }
    }
}

/// Scales `a` so its spectral radius equals `target` (unchanged if zero).
pub fn rescale_spectral_radius(a: &Mat<f64>, target: f64) -> Mat<f64> {
    let rho = spectral_radius(a);
    if rho == 0.0 {
        return a.clone();
    }
    a.scale(target / rho)
}

pub fn spectral_radius(a: &Mat<f64>) -> f64 {
    let m = nalgebra::DMatrix::from_row_slice(a.rows, a.cols, &a.data);
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

fn sym<R: Real>(m: &Mat<R>) -> Mat<R> {
    m.symmetrize()
}

/// Exact log p(y_{1:T} | u_{1:T}) by the Kalman prediction–update recursion.
pub fn kalman_loglik<R: Real>(spec: &LgssmSpec<R>, y: &[Vec<f64>], u: &[Vec<f64>]) -> Result<R, SsmError> {
    Ok(kalman_filter(spec, y, u)?.loglik)
}

/// Exact log-likelihood and one-step predictive means E[y_t | y_{<t}].
#[derive(Debug, Clone)]
pub struct KalmanOutput<R> {
    pub loglik: R,
    pub predictions: Vec<Vec<R>>,
}

pub fn kalman_filter<R: Real>(spec: &LgssmSpec<R>, y: &[Vec<f64>], u: &[Vec<f64>]) -> Result<KalmanOutput<R>, SsmError> {
    let dy = spec.c.rows;
    let mut predictions = Vec::with_capacity(y.len());
    let empty: Vec<f64> = Vec::new();
    let mut m = spec.m0.clone();
    let mut p = spec.p0.clone();
    let mut ll = R::zero();
    let ct = spec.c.transpose();
    for (t, yt) in y.iter().enumerate() {
        if yt.len() != dy {
            return Err(SsmError::DimensionMismatch {
                what: "observation",
                expected: dy,
                got: yt.len(),
            });
        }
        if t > 0 {
            let ut = u.get(t).unwrap_or(&empty);
            let bu: Vec<R> = if spec.b.cols > 0 {
                spec.b.matvec(&linalg::lift(ut))
            } else {
                vec![R::zero(); m.len()]
            };
            m = linalg::vadd(&spec.a.matvec(&m), &bu);
            p = sym(&spec.a.matmul(&p).matmul(&spec.a.transpose()).add(&spec.q));
        }
        let pct = p.matmul(&ct);
        let s = sym(&spec.c.matmul(&pct).add(&spec.r));
        let ls = linalg::cholesky(&s)?;
        let pred = linalg::vadd(&spec.c.matvec(&m), &spec.d);
        let e: Vec<R> = yt.iter().zip(&pred).map(|(&yi, &pi)| -pi + yi).collect();
        predictions.push(pred);
        let z = linalg::solve_lower(&ls, &e);
        ll += -(linalg::sq_norm(&z) + linalg::chol_logdet(&ls)) * 0.5 - 0.918_938_533_204_672_8 * dy as f64;
        // S⁻¹ C P, so that K C P = P Cᵀ S⁻¹ C P
        let mut kt = Mat::zeros(dy, m.len());
        for i in 0..m.len() {
            let row: Vec<R> = pct.row(i).to_vec();
            let sol = linalg::chol_solve(&ls, &row);
            for j in 0..dy {
                kt.set(j, i, sol[j]);
            }
        }
        let sinv_e = linalg::chol_solve(&ls, &e);
        m = linalg::vadd(&m, &pct.matvec(&sinv_e));
        // P ← P − K C P
        p = sym(&p.sub(&pct.matmul(&kt)));
    }
    Ok(KalmanOutput { loglik: ll, predictions })
}

/// One observed sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sequence {
    pub id: String,
    pub y: Vec<Vec<f64>>,
    #[serde(default)]
    pub u: Vec<Vec<f64>>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// `u_t`, or an empty slice when there are no inputs.
    pub fn input(&self, t: usize) -> &[f64] {
        self.u.get(t).map(|v| v.as_slice()).unwrap_or(&[])
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrajectoryBatch {
    pub sequences: Vec<Sequence>,
}

impl TrajectoryBatch {
    pub fn validate(&self, obs_dim: usize, input_dim: usize) -> Result<(), SsmError> {
        for s in &self.sequences {
            if s.is_empty() {
                return Err(SsmError::Invalid(format!("sequence {} is empty", s.id)));
            }
            for y in &s.y {
                if y.len() != obs_dim {
                    return Err(SsmError::DimensionMismatch {
                        what: "observation",
                        expected: obs_dim,
                        got: y.len(),
                    });
                }
            }
            if !s.u.is_empty() && (s.u.len() != s.y.len() || s.u.iter().any(|u| u.len() != input_dim)) {
                return Err(SsmError::Invalid(format!("sequence {} has inconsistent inputs", s.id)));
            }
        }
        Ok(())
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), SsmError> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        for s in &self.sequences {
            serde_json::to_writer(&mut w, s).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self, SsmError> {
        let r = BufReader::new(std::fs::File::open(path)?);
        let mut sequences = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            sequences.push(serde_json::from_str(&line).map_err(|source| SsmError::Parse { line: i + 1, source })?);
        }
        Ok(TrajectoryBatch { sequences })
    }
}

/// Settings for the neural synthetic benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub latent_dim: usize,
    pub obs_dim: usize,
    pub length: usize,
    pub sequences: usize,
    pub hidden: usize,
    pub noise_var: f64,
    pub spectral_radius: f64,
    /// Multiplies the sigmoid decoder output.
    pub output_scale: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            latent_dim: 10,
            obs_dim: 30,
            length: 100,
            sequences: 100,
            hidden: 20,
            noise_var: 0.2,
            spectral_radius: 0.9,
            output_scale: 1.0,
        }
    }
}

/// Generated data with the model that produced it.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub batch: TrajectoryBatch,
    pub latents: Vec<Vec<Vec<f64>>>,
    pub model: SsmModel<f64>,
}

/// `x_{t+1} = A x_t + ε_t`, `y_t = g(x_t) + ξ_t` with a two-layer ReLU/sigmoid decoder.
pub fn gen_synthetic(seed: u64, cfg: &SyntheticConfig) -> SyntheticData {
    let (dx, dy) = (cfg.latent_dim, cfg.obs_dim);
    let mut prng = RngStream::keyed(seed, 0, 0, Purpose::Parameters);
    let a = Mat::from_fn(dx, dx, |_, _| prng.normal());
    let a = rescale_spectral_radius(&a, cfg.spectral_radius);
    let decoder = Mlp::random(&[dx, cfg.hidden, dy], Activation::Relu, Activation::Sigmoid, 2.0, &mut prng);
    // a zero variance is represented by the smallest positive log-variance
    let lv = if cfg.noise_var > 0.0 { cfg.noise_var.ln() } else { f64::MIN };
    let model = SsmModel {
        latent_dim: dx,
        input_dim: 0,
        obs_dim: dy,
        init_mean: vec![0.0; dx],
        init_log_var: vec![0.0; dx],
        transition_net: Mlp {
            layers: vec![Dense { w: a, b: vec![0.0; dx] }],
            hidden: Activation::Identity,
            output: Activation::Identity,
        },
        transition_log_var: vec![lv; dx],
        condition_on_prev_obs: false,
        emission: Emission {
            decoder,
            range: Some(OutputRange {
                lo: vec![0.0; dy],
                width: vec![cfg.output_scale; dy],
            }),
            family: EmissionFamily::Gaussian { log_var: vec![lv; dy] },
        },
    };
    let mut sequences = Vec::with_capacity(cfg.sequences);
    let mut latents = Vec::with_capacity(cfg.sequences);
    for n in 0..cfg.sequences {
        let (xs, ys) = model.simulate(derive_seed(seed, &[n as u64]), cfg.length, &[]);
        sequences.push(Sequence {
            id: format!("seq{n:04}"),
            y: ys,
            u: vec![],
        });
        latents.push(xs);
    }
    SyntheticData {
        batch: TrajectoryBatch { sequences },
        latents,
        model,
    }
}

/// Settings for the one-dimensional sinusoidal-transition benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SinusoidConfig {
    pub length: usize,
    pub sequences: usize,
    pub obs_dim: usize,
    pub amplitude: f64,
    pub process_var: f64,
    pub obs_var: f64,
}

impl Default for SinusoidConfig {
    fn default() -> Self {
        SinusoidConfig {
            length: 80,
            sequences: 8,
            obs_dim: 2,
            amplitude: 2.0,
            process_var: 0.2,
            obs_var: 0.02,
        }
    }
}

/// Ground truth of the sinusoid benchmark: `x_t = a·sin(x_{t−1}) + w`,
/// `y_{t,j} = tanh(c_j x_t + b_j) + v`.
pub fn sinusoid_emission(obs_dim: usize, obs_var: f64) -> Emission<f64> {
    let c: Vec<f64> = (0..obs_dim).map(|j| if j % 2 == 0 { 0.8 } else { -0.5 }).collect();
    let b: Vec<f64> = (0..obs_dim).map(|j| 0.3 * j as f64 - 0.2).collect();
    Emission {
        decoder: Mlp {
            layers: vec![Dense {
                w: Mat::from_fn(obs_dim, 1, |j, _| c[j]),
                b,
            }],
            hidden: Activation::Identity,
            output: Activation::Tanh,
        },
        range: None,
        family: EmissionFamily::Gaussian {
            log_var: vec![obs_var.ln(); obs_dim],
        },
    }
}

pub fn gen_sinusoid(seed: u64, cfg: &SinusoidConfig) -> SyntheticData {
    let emission = sinusoid_emission(cfg.obs_dim, cfg.obs_var);
    let mut sequences = Vec::with_capacity(cfg.sequences);
    let mut latents = Vec::with_capacity(cfg.sequences);
    for n in 0..cfg.sequences {
        let s = derive_seed(seed, &[n as u64]);
        let mut xs: Vec<Vec<f64>> = Vec::with_capacity(cfg.length);
        let mut ys = Vec::with_capacity(cfg.length);
        for t in 0..cfg.length {
            let mut rng = RngStream::keyed(s, t, 0, Purpose::Synthetic);
            let x = if t == 0 {
                rng.normal()
            } else {
                cfg.amplitude * xs[t - 1][0].sin() + cfg.process_var.sqrt() * rng.normal()
            };
            let out = emission.decode(&[x]);
            let mut erng = RngStream::keyed(s, t, 0, Purpose::Emission);
            ys.push(out.iter().map(|o| o + cfg.obs_var.sqrt() * erng.normal()).collect());
            xs.push(vec![x]);
        }
        sequences.push(Sequence {
            id: format!("sin{n:04}"),
            y: ys,
            u: vec![],
        });
        latents.push(xs);
    }
    // the matching neural model is only used for its emission; the transition here is a placeholder
    let model = SsmModel {
        latent_dim: 1,
        input_dim: 0,
        obs_dim: cfg.obs_dim,
        init_mean: vec![0.0],
        init_log_var: vec![0.0],
        transition_net: Mlp {
            layers: vec![Dense {
                w: Mat::zeros(1, 1),
                b: vec![0.0],
            }],
            hidden: Activation::Identity,
            output: Activation::Identity,
        },
        transition_log_var: vec![cfg.process_var.ln()],
        condition_on_prev_obs: false,
        emission,
    };
    SyntheticData {
        batch: TrajectoryBatch { sequences },
        latents,
        model,
    }
}
