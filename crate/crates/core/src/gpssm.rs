//! Sparse Gaussian-process transitions.
//!
//! Each latent dimension d has its own GP with an ARD RBF kernel, P inducing
//! inputs ζ_d and a variational posterior q(z_d) = N(μ_d, Σ_d) over the
//! inducing outputs. Integrating z_d out gives the transition moments
//!
//! ```text
//! μ̃_d  = k_{x̂ζ} K⁻¹ μ_d
//! σ̃²_d = k_{x̂x̂} − k_{x̂ζ} K⁻¹ (K − Σ_d) K⁻¹ k_{ζx̂} + σ²_{x,d}
//! ```
//!
//! with x̂ = (x_{t−1}, u_t, y_{t−1}).
//!
//! q is stored whitened: z_d = L v_d with L L' = K_{ζζ} and
//! v_d ~ N(m_d, S_d), so μ_d = L m_d and Σ_d = L S_d L'. The KL to the prior
//! then no longer involves K⁻¹, which keeps training stable when inducing
//! inputs drift close together. S_d is held as a Cholesky factor with
//! log-diagonal so that any parameter vector gives a valid covariance.
//! The factorizations of K_{ζζ} are done once per parameter value
//! ([`GpCache`]) and shared by every particle.

use serde::{Deserialize, Serialize};

use crate::dist::diag_logpdf;
use crate::hsmc::{hsmc_filter, Built, HsmcConfig, HsmcStepRecord, TapeModel};
use crate::metric::MetricSource;
use crate::numcore::ad::Real;
use crate::numcore::linalg::{self, Mat};
use crate::numcore::params::{flatten, unflatten, ParamMap};
use crate::numcore::rng::derive_seed;
use crate::numcore::rng::RngStream;
use crate::smc::{replicate, Estimate, FilterError};
use crate::ssm::{Emission, Sequence, SsmError, StateSpace, TrajectoryBatch};

/// Diagonal jitter added to inducing gram matrices.
pub const GRAM_JITTER: f64 = 1e-8;

fn default_jitter() -> f64 {
    GRAM_JITTER
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RbfHyper<R> {
    pub log_signal_var: R,
    pub log_lengthscales: Vec<R>,
}

impl<R: Real> RbfHyper<R> {
    pub fn new(signal_var: f64, lengthscales: &[f64]) -> Self {
        RbfHyper {
            log_signal_var: R::cst(signal_var.ln()),
            log_lengthscales: lengthscales.iter().map(|l| R::cst(l.ln())).collect(),
        }
    }

    pub fn signal_var(&self) -> R {
        self.log_signal_var.exp()
    }
}

/// σ_f² exp(−½ Σ_j (a_j − b_j)²/ℓ_j²).
pub fn rbf_kernel<R: Real>(a: &[R], b: &[R], h: &RbfHyper<R>) -> R {
    assert_eq!(a.len(), b.len(), "kernel inputs differ in dimension");
    assert_eq!(a.len(), h.log_lengthscales.len(), "one lengthscale per input");
    let mut s = R::zero();
    for ((&ai, &bi), &ll) in a.iter().zip(b).zip(&h.log_lengthscales) {
        let d = (ai - bi) * (-ll).exp();
        s += d * d;
    }
    (h.log_signal_var - s * 0.5).exp()
}

/// Gram matrix over the rows of `points`, with `jitter` on the diagonal.
pub fn rbf_gram<R: Real>(points: &Mat<R>, h: &RbfHyper<R>, jitter: f64) -> Mat<R> {
    let n = points.rows;
    let mut k = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = rbf_kernel(points.row(i), points.row(j), h);
            k.set(i, j, v);
            k.set(j, i, v);
        }
        k.set(i, i, k.at(i, i) + jitter);
    }
    k
}

/// k(x, ζ_i) for every row ζ_i.
pub fn rbf_cross<R: Real>(x: &[R], points: &Mat<R>, h: &RbfHyper<R>) -> Vec<R> {
    (0..points.rows).map(|i| rbf_kernel(x, points.row(i), h)).collect()
}

/// One latent dimension's GP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpDim<R> {
    /// P × input width.
    pub inducing: Mat<R>,
    /// Whitened mean m_d.
    pub white_mean: Vec<R>,
    pub chol_log_diag: Vec<R>,
    /// Strict lower triangle of the S_d factor, row by row.
    pub chol_lower: Vec<R>,
    pub hyper: RbfHyper<R>,
    pub log_noise_var: R,
}

impl<R: Real> GpDim<R> {
    pub fn num_inducing(&self) -> usize {
        self.white_mean.len()
    }

    /// Lower Cholesky factor of the whitened covariance S_d.
    pub fn white_chol(&self) -> Mat<R> {
        let p = self.num_inducing();
        let mut l = Mat::zeros(p, p);
        let mut it = self.chol_lower.iter();
        for i in 0..p {
            for j in 0..i {
                l.set(i, j, *it.next().expect("packed factor too short"));
            }
            l.set(i, i, self.chol_log_diag[i].exp());
        }
        l
    }

    /// Sets S_d from a lower Cholesky factor.
    pub fn set_white_chol(&mut self, l: &Mat<R>) {
        let p = l.rows;
        self.chol_log_diag = (0..p).map(|i| l.at(i, i).ln()).collect();
        self.chol_lower = (0..p).flat_map(|i| (0..i).map(move |j| (i, j))).map(|(i, j)| l.at(i, j)).collect();
    }

    /// (μ_d, lower Cholesky factor of Σ_d) in inducing-output space.
    pub fn posterior(&self, jitter: f64) -> Result<(Vec<R>, Mat<R>), SsmError> {
        let lk = linalg::cholesky(&rbf_gram(&self.inducing, &self.hyper, jitter))?;
        Ok((lk.matvec(&self.white_mean), lk.matmul(&self.white_chol())))
    }

    /// Sets q(z_d) from μ_d and a lower Cholesky factor of Σ_d.
    pub fn set_posterior(&mut self, mean: &[R], chol: &Mat<R>, jitter: f64) -> Result<(), SsmError> {
        let lk = linalg::cholesky(&rbf_gram(&self.inducing, &self.hyper, jitter))?;
        self.white_mean = linalg::solve_lower(&lk, mean);
        self.set_white_chol(&linalg::solve_lower_mat(&lk, chol));
        Ok(())
    }

    pub fn noise_var(&self) -> R {
        self.log_noise_var.exp()
    }
}

impl<R: Real> ParamMap<R> for GpDim<R> {
    type Mapped<S: Real> = GpDim<S>;
    fn map_params<S: Real>(&self, f: &mut dyn FnMut(R) -> S) -> GpDim<S> {
        GpDim {
            inducing: self.inducing.map_params(f),
            white_mean: self.white_mean.map_params(f),
            chol_log_diag: self.chol_log_diag.map_params(f),
            chol_lower: self.chol_lower.map_params(f),
            hyper: RbfHyper {
                log_signal_var: f(self.hyper.log_signal_var),
                log_lengthscales: self.hyper.log_lengthscales.map_params(f),
            },
            log_noise_var: f(self.log_noise_var),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseGpTransition<R> {
    pub latent_dim: usize,
    pub input_dim: usize,
    pub obs_dim: usize,
    pub condition_on_prev_obs: bool,
    pub dims: Vec<GpDim<R>>,
    #[serde(default = "default_jitter")]
    pub jitter: f64,
}

/// Transition moments for one x̂.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalMoments<R> {
    pub mean: Vec<R>,
    pub var: Vec<R>,
}

struct DimCache<R> {
    inducing: Mat<R>,
    hyper: RbfHyper<R>,
    k_chol: Mat<R>,
    white_chol: Mat<R>,
    white_mean: Vec<R>,
    noise_var: R,
}

/// Factorizations of every K_{ζζ}, shared across particles.
pub struct GpCache<R> {
    dims: Vec<DimCache<R>>,
}

impl<R: Real> GpCache<R> {
    pub fn moments(&self, xhat: &[R]) -> VariationalMoments<R> {
        let mut mean = Vec::with_capacity(self.dims.len());
        let mut var = Vec::with_capacity(self.dims.len());
        for c in &self.dims {
            let k = rbf_cross(xhat, &c.inducing, &c.hyper);
            // with a = L⁻¹k: k K⁻¹ μ = a·m and k K⁻¹ (K − Σ) K⁻¹ k = ‖a‖² − ‖L_Sᵀ a‖²
            let a = linalg::solve_lower(&c.k_chol, &k);
            mean.push(linalg::dot(&a, &c.white_mean));
            let s = c.white_chol.matvec_t(&a);
            var.push(c.hyper.signal_var() - linalg::sq_norm(&a) + linalg::sq_norm(&s) + c.noise_var);
        }
        VariationalMoments { mean, var }
    }
}

impl<R: Real> SparseGpTransition<R> {
    pub fn input_width(&self) -> usize {
        self.latent_dim + self.input_dim + if self.condition_on_prev_obs { self.obs_dim } else { 0 }
    }

    pub fn num_inducing(&self) -> usize {
        self.dims.first().map_or(0, |d| d.num_inducing())
    }

    pub fn transition_input(&self, x_prev: &[R], u: &[f64], y_prev: &[f64]) -> Vec<R> {
        let mut inp = Vec::with_capacity(self.input_width());
        inp.extend_from_slice(x_prev);
        inp.extend(u.iter().map(|&v| R::cst(v)));
        if self.condition_on_prev_obs {
            inp.extend(y_prev.iter().map(|&v| R::cst(v)));
        }
        inp
    }

    pub fn validate(&self) -> Result<(), SsmError> {
        let mismatch = |what, expected, got| Err(SsmError::DimensionMismatch { what, expected, got });
        if self.dims.len() != self.latent_dim {
            return mismatch("GP dimensions", self.latent_dim, self.dims.len());
        }
        let w = self.input_width();
        for d in &self.dims {
            let p = d.num_inducing();
            if p == 0 {
                return Err(SsmError::Invalid("a GP needs at least one inducing point".into()));
            }
            if d.inducing.rows != p || d.inducing.cols != w {
                return mismatch("inducing inputs", p * w, d.inducing.rows * d.inducing.cols);
            }
            if d.chol_log_diag.len() != p {
                return mismatch("Σ diagonal", p, d.chol_log_diag.len());
            }
            if d.chol_lower.len() != p * (p - 1) / 2 {
                return mismatch("Σ factor", p * (p - 1) / 2, d.chol_lower.len());
            }
            if d.hyper.log_lengthscales.len() != w {
                return mismatch("lengthscales", w, d.hyper.log_lengthscales.len());
            }
        }
        Ok(())
    }

    pub fn prepare(&self) -> Result<GpCache<R>, SsmError> {
        self.validate()?;
        let mut dims = Vec::with_capacity(self.dims.len());
        for d in &self.dims {
            let k_chol = linalg::cholesky(&rbf_gram(&d.inducing, &d.hyper, self.jitter))?;
            dims.push(DimCache {
                inducing: d.inducing.clone(),
                hyper: d.hyper.clone(),
                k_chol,
                white_chol: d.white_chol(),
                white_mean: d.white_mean.clone(),
                noise_var: d.noise_var(),
            });
        }
        Ok(GpCache { dims })
    }
}

impl<R: Real> ParamMap<R> for SparseGpTransition<R> {
    type Mapped<S: Real> = SparseGpTransition<S>;
    fn map_params<S: Real>(&self, f: &mut dyn FnMut(R) -> S) -> SparseGpTransition<S> {
        SparseGpTransition {
            latent_dim: self.latent_dim,
            input_dim: self.input_dim,
            obs_dim: self.obs_dim,
            condition_on_prev_obs: self.condition_on_prev_obs,
            dims: self.dims.iter().map(|d| d.map_params(f)).collect(),
            jitter: self.jitter,
        }
    }
}

/// Closed-form transition moments at x̂.
pub fn var_moments<R: Real>(gp: &SparseGpTransition<R>, xhat: &[R]) -> Result<VariationalMoments<R>, SsmError> {
    Ok(gp.prepare()?.moments(xhat))
}

/// Σ_d KL(q(z_d) ‖ N(0, K_{ζ_d ζ_d})).
pub fn gp_kl<R: Real>(gp: &SparseGpTransition<R>) -> Result<R, SsmError> {
    gp.validate()?;
    let mut kl = R::zero();
    for d in &gp.dims {
        // KL(N(m, S) ‖ N(0, I)) in whitened coordinates
        let p = d.num_inducing();
        let trace = linalg::sq_norm(&d.white_chol().data);
        let quad = linalg::sq_norm(&d.white_mean);
        let logdet_s = linalg::sum(&d.chol_log_diag) * 2.0;
        kl += (trace + quad - p as f64 - logdet_s) * 0.5;
    }
    Ok(kl)
}

/// A GP-SSM: GP transition, Gaussian initial state and a generic decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpSsm<R> {
    pub transition: SparseGpTransition<R>,
    pub init_mean: Vec<R>,
    pub init_log_var: Vec<R>,
    pub emission: Emission<R>,
}

impl<R: Real> ParamMap<R> for GpSsm<R> {
    type Mapped<S: Real> = GpSsm<S>;
    fn map_params<S: Real>(&self, f: &mut dyn FnMut(R) -> S) -> GpSsm<S> {
        GpSsm {
            transition: self.transition.map_params(f),
            init_mean: self.init_mean.map_params(f),
            init_log_var: self.init_log_var.map_params(f),
            emission: self.emission.map_params(f),
        }
    }
}

/// A [`GpSsm`] with its gram factorizations done, ready for filtering.
pub struct PreparedGpSsm<R> {
    pub model: GpSsm<R>,
    cache: GpCache<R>,
}

impl<R: Real> GpSsm<R> {
    pub fn prepare(&self) -> Result<PreparedGpSsm<R>, SsmError> {
        Ok(PreparedGpSsm {
            cache: self.transition.prepare()?,
            model: self.clone(),
        })
    }
}

impl<R: Real> PreparedGpSsm<R> {
    pub fn moments(&self, x_prev: &[R], u: &[f64], y_prev: &[f64]) -> VariationalMoments<R> {
        self.cache.moments(&self.model.transition.transition_input(x_prev, u, y_prev))
    }
}

impl<R: Real> StateSpace<R> for PreparedGpSsm<R> {
    fn latent_dim(&self) -> usize {
        self.model.transition.latent_dim
    }

    fn initial(&self, _u: &[f64]) -> (Vec<R>, Vec<R>) {
        (
            self.model.init_mean.clone(),
            self.model.init_log_var.iter().map(|&v| v.exp()).collect(),
        )
    }

    fn transition(&self, x_prev: &[R], u: &[f64], y_prev: &[f64]) -> (Vec<R>, Vec<R>) {
        let m = self.moments(x_prev, u, y_prev);
        (m.mean, m.var)
    }

    fn emission_loglik(&self, x: &[R], y: &[f64]) -> R {
        self.model.emission.loglik(x, y)
    }

    fn emission_loglik_grad(&self, x: &[R], y: &[f64]) -> (R, Vec<R>) {
        self.model.emission.loglik_grad(x, y)
    }

    fn emission_mean(&self, x: &[R]) -> Vec<R> {
        self.model.emission.mean(x)
    }
}

impl TapeModel for GpSsm<f64> {
    fn param_values(&self) -> Vec<f64> {
        flatten(self)
    }

    fn build<'a, R: Real + 'a>(&'a self, theta: &[R]) -> Result<Built<'a, R>, SsmError> {
        let m: GpSsm<R> = unflatten(self, theta);
        let penalty = gp_kl(&m.transition)?;
        Ok(Built {
            model: Box::new(m.prepare()?),
            penalty,
        })
    }
}

/// Initialisation choices for a GP-SSM.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpSpec {
    pub latent_dim: usize,
    pub input_dim: usize,
    pub obs_dim: usize,
    pub condition_on_prev_obs: bool,
    pub inducing: usize,
    pub signal_var: f64,
    pub lengthscale: f64,
    pub noise_var: f64,
    /// q(z_d) starts with covariance q_scale² K_zz (whitened S_d = q_scale² I).
    pub q_scale: f64,
    /// Spread of the latent coordinates of the initial inducing inputs.
    pub latent_spread: f64,
}

impl Default for GpSpec {
    fn default() -> Self {
        GpSpec {
            latent_dim: 1,
            input_dim: 0,
            obs_dim: 1,
            condition_on_prev_obs: false,
            inducing: 16,
            signal_var: 1.0,
            lengthscale: 1.0,
            noise_var: 0.1,
            q_scale: 0.1,
            latent_spread: 2.0,
        }
    }
}

impl GpSsm<f64> {
    /// Inducing inputs take their observed coordinates (u_t, y_{t−1}) from
    /// randomly chosen training steps; their latent coordinates, which have
    /// no data, are drawn from N(0, latent_spread²). q(z_d) starts at
    /// N(0, q_scale² K_zz).
    pub fn init(spec: &GpSpec, emission: Emission<f64>, data: Option<&TrajectoryBatch>, rng: &mut RngStream) -> Self {
        let mut tr = SparseGpTransition {
            latent_dim: spec.latent_dim,
            input_dim: spec.input_dim,
            obs_dim: spec.obs_dim,
            condition_on_prev_obs: spec.condition_on_prev_obs,
            dims: Vec::new(),
            jitter: GRAM_JITTER,
        };
        let w = tr.input_width();
        let p = spec.inducing;
        let steps: Vec<(usize, usize)> = data
            .map(|b| {
                b.sequences
                    .iter()
                    .enumerate()
                    .flat_map(|(n, s)| (1..s.len()).map(move |t| (n, t)))
                    .collect()
            })
            .unwrap_or_default();
        for _ in 0..spec.latent_dim {
            let mut inducing = Mat::zeros(p, w);
            for i in 0..p {
                for j in 0..spec.latent_dim {
                    inducing.set(i, j, spec.latent_spread * rng.normal());
                }
                let obs: Vec<f64> = match (data, steps.is_empty()) {
                    (Some(b), false) => {
                        let (n, t) = steps[rng.below(steps.len())];
                        let s = &b.sequences[n];
                        let mut v = s.input(t).to_vec();
                        if spec.condition_on_prev_obs {
                            v.extend_from_slice(&s.y[t - 1]);
                        }
                        v
                    }
                    _ => (0..w - spec.latent_dim).map(|_| rng.normal()).collect(),
                };
                for (j, v) in obs.into_iter().enumerate() {
                    inducing.set(i, spec.latent_dim + j, v);
                }
            }
            let hyper = RbfHyper::new(spec.signal_var, &vec![spec.lengthscale; w]);
            let mut dim = GpDim {
                inducing,
                white_mean: vec![0.0; p],
                chol_log_diag: vec![],
                chol_lower: vec![],
                hyper,
                log_noise_var: spec.noise_var.ln(),
            };
            dim.set_white_chol(&Mat::identity(p).scale(spec.q_scale));
            tr.dims.push(dim);
        }
        GpSsm {
            transition: tr,
            init_mean: vec![0.0; spec.latent_dim],
            init_log_var: vec![0.0; spec.latent_dim],
            emission,
        }
    }
}

/// Recomputes one particle's log-weight from its record, the transition
/// moments it was drawn from and the metric used for its momentum.
pub fn gpssm_hsmc_weight(
    rec: &HsmcStepRecord,
    moments: &VariationalMoments<f64>,
    emission: &Emission<f64>,
    metric: &dyn MetricSource<f64>,
    y: &[f64],
) -> f64 {
    let log_g = emission.loglik(&rec.xs, y);
    if rec.xs == rec.x0 && rec.ps == rec.p0 {
        return log_g;
    }
    let log_q_s = diag_logpdf(&rec.xs, &moments.mean, &moments.var);
    let log_q_0 = diag_logpdf(&rec.x0, &moments.mean, &moments.var);
    let log_n_s = metric.eval(&rec.xs).momentum_logpdf(&rec.ps);
    let log_n_0 = metric.eval(&rec.x0).momentum_logpdf(&rec.p0);
    log_g + (log_q_s - log_q_0) + (log_n_s - log_n_0)
}

/// ELBO of a batch: each replicate sums, over sequences, log Ẑ minus the KL
/// term (subtracted once per sequence).
pub fn elbo_gpssm(
    model: &GpSsm<f64>,
    metric: &(dyn MetricSource<f64> + Sync),
    batch: &[Sequence],
    cfg: &HsmcConfig,
    seed: u64,
    reps: usize,
) -> Result<(Estimate, Vec<f64>), FilterError> {
    if reps == 0 {
        return Err(FilterError::InvalidConfig("need at least one repetition".into()));
    }
    let prepared = model.prepare()?;
    let kl = gp_kl(&model.transition)?;
    let samples = replicate(seed, reps, |s| {
        let mut total = 0.0;
        for (n, seq) in batch.iter().enumerate() {
            let run = hsmc_filter(
                &prepared,
                metric as &dyn MetricSource<f64>,
                seq,
                cfg,
                derive_seed(s, &[n as u64]),
                false,
            )?;
            total += run.run.log_z - kl;
        }
        Ok(total)
    })?;
    Ok((Estimate::from_samples(&samples), samples))
}
