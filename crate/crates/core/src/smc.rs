//! Sequential Monte Carlo with log-space weights, multinomial or systematic
//! resampling at every step, and Monte Carlo ELBO estimates.
//!
//! Every random draw comes from a stream keyed by (time, particle, purpose),
//! so the Hamiltonian filter in [`crate::hsmc`] consumes exactly the same
//! transition and resampling noise as the bootstrap filter here.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dist::{categorical_sample, diag_logpdf, log_mean_exp, normalize_log_weights, DistError, ResampleScheme};
use crate::hamilton::HamiltonError;
use crate::numcore::ad::Real;
use crate::numcore::rng::{derive_seed, Purpose, RngStream};
use crate::ssm::{Sequence, StateSpace};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FilterError {
    #[error("all particle weights are zero at step {t}")]
    Degenerate { t: usize },
    #[error("invalid filter configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error(transparent)]
    Hamilton(#[from] HamiltonError),
    #[error("model: {0}")]
    Model(String),
}

impl From<crate::ssm::SsmError> for FilterError {
    fn from(e: crate::ssm::SsmError) -> Self {
        FilterError::Model(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmcConfig {
    pub particles: usize,
    pub resample: ResampleScheme,
    /// Store the per-step predictive mean of the observation.
    pub record_predictions: bool,
}

impl Default for SmcConfig {
    fn default() -> Self {
        SmcConfig {
            particles: 10,
            resample: ResampleScheme::Multinomial,
            record_predictions: false,
        }
    }
}

impl SmcConfig {
    pub fn with_particles(particles: usize) -> Self {
        SmcConfig {
            particles,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), FilterError> {
        if self.particles == 0 {
            return Err(FilterError::InvalidConfig("need at least one particle".into()));
        }
        Ok(())
    }
}

/// Serializable summary of one filter run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterResult {
    #[serde(rename = "logZ")]
    pub log_z: f64,
    pub per_step_log_mean_w: Vec<f64>,
    pub ess: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub integrator_fallbacks: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_energy_error: Option<f64>,
    /// Mean over particles of E[y_t | x_t] for freshly proposed particles,
    /// i.e. a one-step-ahead prediction of y_t from y_{1:t−1}.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub predictions: Option<Vec<Vec<f64>>>,
    /// Particle positions at the final step.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub final_particles: Vec<Vec<f64>>,
}

/// A run in the scalar type it was computed in, with its summary.
#[derive(Debug, Clone)]
pub struct FilterRun<R> {
    pub log_z: R,
    pub log_mean_w: Vec<R>,
    pub result: FilterResult,
}

/// A Gaussian proposal q(x_t | x_{t−1}, u_t, y_t, y_{t−1}); `x_prev` is
/// `None` at the first step.
pub trait Proposal<R: Real> {
    fn moments(&self, t: usize, x_prev: Option<&[R]>, u: &[f64], y: &[f64], y_prev: &[f64]) -> (Vec<R>, Vec<R>);
}

/// μ + sqrt(v) ⊙ ξ with ξ taken from the (t, k, transition) stream.
pub(crate) fn draw_diag<R: Real>(mean: &[R], var: &[R], seed: u64, t: usize, k: usize) -> Vec<R> {
    let mut rng = RngStream::keyed(seed, t, k, Purpose::Transition);
    mean.iter().zip(var).map(|(&m, &v)| m + v.sqrt() * rng.normal()).collect()
}

/// Ancestors drawn from the (t, 0, resample) stream.
pub(crate) fn resample<R: Real>(log_w: &[R], scheme: ResampleScheme, seed: u64, t: usize) -> Result<Vec<usize>, FilterError> {
    let vals: Vec<f64> = log_w.iter().map(|v| v.value()).collect();
    let w = normalize_log_weights(&vals);
    let mut rng = RngStream::keyed(seed, t, 0, Purpose::Resample);
    categorical_sample(&mut rng, &w, scheme, log_w.len()).map_err(|e| match e {
        DistError::AllZeroWeights => FilterError::Degenerate { t: t - 1 },
        other => other.into(),
    })
}

/// Step bookkeeping shared by both filters.
pub(crate) struct StepLog<R> {
    pub log_mean_w: Vec<R>,
    pub ess: Vec<f64>,
    pub predictions: Option<Vec<Vec<f64>>>,
}

impl<R: Real> StepLog<R> {
    pub fn new(record: bool) -> Self {
        StepLog {
            log_mean_w: Vec::new(),
            ess: Vec::new(),
            predictions: record.then(Vec::new),
        }
    }

    pub fn push(&mut self, t: usize, log_w: &[R]) -> Result<(), FilterError> {
        let lm = log_mean_exp(log_w);
        if !lm.value().is_finite() {
            return Err(FilterError::Degenerate { t });
        }
        let w = normalize_log_weights(&log_w.iter().map(|v| v.value()).collect::<Vec<_>>());
        self.ess.push(1.0 / w.iter().map(|v| v * v).sum::<f64>());
        self.log_mean_w.push(lm);
        Ok(())
    }

    pub fn predict<M: StateSpace<R> + ?Sized>(&mut self, model: &M, xs: &[Vec<R>]) {
        if let Some(p) = self.predictions.as_mut() {
            let mut acc: Vec<f64> = Vec::new();
            for x in xs {
                let m = model.emission_mean(x);
                if acc.is_empty() {
                    acc = vec![0.0; m.len()];
                }
                for (a, v) in acc.iter_mut().zip(&m) {
                    *a += v.value();
                }
            }
            p.push(acc.into_iter().map(|a| a / xs.len() as f64).collect());
        }
    }

    pub fn finish(self, final_particles: &[Vec<R>]) -> FilterRun<R> {
        let log_z = self.log_mean_w.iter().fold(R::zero(), |acc, &v| acc + v);
        FilterRun {
            log_z,
            result: FilterResult {
                log_z: log_z.value(),
                per_step_log_mean_w: self.log_mean_w.iter().map(|v| v.value()).collect(),
                ess: self.ess,
                integrator_fallbacks: None,
                mean_energy_error: None,
                predictions: self.predictions,
                final_particles: final_particles.iter().map(|x| x.iter().map(|v| v.value()).collect()).collect(),
            },
            log_mean_w: self.log_mean_w,
        }
    }
}

/// Particle filter. With `proposal = None` particles are drawn from the
/// model itself (bootstrap) and the weight is exactly log g(y_t | x_t).
pub fn smc_filter<R, M>(
    model: &M,
    proposal: Option<&dyn Proposal<R>>,
    seq: &Sequence,
    cfg: &SmcConfig,
    seed: u64,
) -> Result<FilterRun<R>, FilterError>
where
    R: Real,
    M: StateSpace<R> + ?Sized,
{
    cfg.validate()?;
    let k = cfg.particles;
    let mut log = StepLog::new(cfg.record_predictions);
    let mut xs: Vec<Vec<R>> = Vec::with_capacity(k);
    let mut lw: Vec<R> = Vec::with_capacity(k);
    for t in 0..seq.len() {
        let (u, y) = (seq.input(t), seq.y[t].as_slice());
        let y_prev: &[f64] = if t > 0 { &seq.y[t - 1] } else { &[] };
        let ancestors = if t == 0 { vec![] } else { resample(&lw, cfg.resample, seed, t)? };
        let mut next = Vec::with_capacity(k);
        let mut next_lw = Vec::with_capacity(k);
        for i in 0..k {
            let x_prev = ancestors.get(i).map(|&a| xs[a].as_slice());
            let (fm, fv) = match x_prev {
                None => model.initial(u),
                Some(xp) => model.transition(xp, u, y_prev),
            };
            let (x, w) = match proposal {
                None => {
                    let x = draw_diag(&fm, &fv, seed, t, i);
                    let w = model.emission_loglik(&x, y);
                    (x, w)
                }
                Some(q) => {
                    let (qm, qv) = q.moments(t, x_prev, u, y, y_prev);
                    let x = draw_diag(&qm, &qv, seed, t, i);
                    let w = model.emission_loglik(&x, y) + diag_logpdf(&x, &fm, &fv) - diag_logpdf(&x, &qm, &qv);
                    (x, w)
                }
            };
            next.push(x);
            next_lw.push(w);
        }
        log.predict(model, &next);
        log.push(t, &next_lw)?;
        xs = next;
        lw = next_lw;
    }
    Ok(log.finish(&xs))
}

/// Mean and standard error of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let se = if n > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64 / n as f64).sqrt()
        } else {
            f64::NAN
        };
        Estimate { mean, se, n }
    }
}

/// Runs `run(seed_r)` for `r` derived seeds in parallel, in fixed order.
pub fn replicate<F>(seed: u64, reps: usize, run: F) -> Result<Vec<f64>, FilterError>
where
    F: Fn(u64) -> Result<f64, FilterError> + Sync,
{
    (0..reps).into_par_iter().map(|r| run(derive_seed(seed, &[r as u64]))).collect()
}

/// Monte Carlo ELBO: mean of log Ẑ over `reps` independent runs.
pub fn elbo_smc<M>(
    model: &M,
    proposal: Option<&(dyn Proposal<f64> + Sync)>,
    seq: &Sequence,
    cfg: &SmcConfig,
    seed: u64,
    reps: usize,
) -> Result<(Estimate, Vec<f64>), FilterError>
where
    M: StateSpace<f64> + Sync + ?Sized,
{
    if reps == 0 {
        return Err(FilterError::InvalidConfig("need at least one repetition".into()));
    }
    let samples = replicate(seed, reps, |s| {
        Ok(smc_filter(model, proposal.map(|p| p as &dyn Proposal<f64>), seq, cfg, s)?.log_z)
    })?;
    Ok((Estimate::from_samples(&samples), samples))
}

/// (Σω)² / Σω²
pub fn ess(weights: &[f64]) -> Result<f64, DistError> {
    let s: f64 = weights.iter().sum();
    let s2: f64 = weights.iter().map(|w| w * w).sum();
    if weights.iter().any(|&w| !(w >= 0.0)) {
        let (index, &value) = weights.iter().enumerate().find(|(_, w)| !(**w >= 0.0)).unwrap();
        return Err(DistError::InvalidWeight { index, value });
    }
    if s <= 0.0 {
        return Err(DistError::AllZeroWeights);
    }
    Ok(s * s / s2)
}
