//! Hamiltonian SMC: particles drawn from the transition are moved by S
//! integrator steps of Riemannian HMC towards the current posterior and
//! reweighted through the flow's volume preservation,
//!
//! ```text
//! log ω = log g(y | x^S) + [log f(x^S) − log f(x⁰)] + [log N(p^S; M(x^S)) − log N(p⁰; M(x⁰))]
//! ```
//!
//! The bracketed differences are exactly zero when S = 0, so the filter then
//! reproduces the bootstrap filter bit for bit (both draw transition and
//! resampling noise from the same keyed streams).

use serde::{Deserialize, Serialize};

use crate::dist::{diag_logpdf, ResampleScheme};
use crate::hamilton::{rmhmc_transform, IntegratorConfig, IntegratorVariant, PhaseState, Potential};
use crate::metric::{ConstantMetric, MetricField, MetricSource};
use crate::numcore::ad::{AdError, Real, Tape, Var};
use crate::numcore::linalg;
use crate::numcore::params::{count, flatten, unflatten};
use crate::numcore::rng::{Purpose, RngStream};
use crate::smc::{draw_diag, replicate, resample, Estimate, FilterError, FilterRun, StepLog};
use crate::ssm::{diag_logpdf_grad, Sequence, SsmError, SsmModel, StateSpace};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HsmcConfig {
    pub particles: usize,
    pub integrator: IntegratorConfig,
    pub resample: ResampleScheme,
    pub record_predictions: bool,
    /// Reject configurations with S·ε ≥ 1.
    pub enforce_trajectory_bound: bool,
}

impl Default for HsmcConfig {
    fn default() -> Self {
        HsmcConfig {
            particles: 10,
            integrator: IntegratorConfig::default(),
            resample: ResampleScheme::Multinomial,
            record_predictions: false,
            enforce_trajectory_bound: true,
        }
    }
}

impl HsmcConfig {
    pub fn new(particles: usize, steps: usize, step_size: f64) -> Self {
        HsmcConfig {
            particles,
            integrator: IntegratorConfig {
                steps,
                step_size,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), FilterError> {
        if self.particles == 0 {
            return Err(FilterError::InvalidConfig("need at least one particle".into()));
        }
        self.integrator.validate(self.enforce_trajectory_bound)?;
        Ok(())
    }
}

/// Everything that enters one particle's weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HsmcStepRecord {
    pub ancestor: usize,
    pub x0: Vec<f64>,
    pub p0: Vec<f64>,
    pub xs: Vec<f64>,
    pub ps: Vec<f64>,
    pub log_g: f64,
    pub log_f_s: f64,
    pub log_n_s: f64,
    pub log_f_0: f64,
    pub log_n_0: f64,
    pub fallback: bool,
}

fn combine<R: Real>(log_g: R, log_f_s: R, log_n_s: R, log_f_0: R, log_n_0: R) -> R {
    log_g + (log_f_s - log_f_0) + (log_n_s - log_n_0)
}

/// The particle log-weight from its recorded terms.
pub fn hsmc_weight(rec: &HsmcStepRecord) -> f64 {
    combine(rec.log_g, rec.log_f_s, rec.log_n_s, rec.log_f_0, rec.log_n_0)
}

/// L(x) = log g(y | x) + log f(x | ·) for one particle's transition moments.
pub struct StepPotential<'a, R, M: ?Sized> {
    pub model: &'a M,
    pub mean: &'a [R],
    pub var: &'a [R],
    pub y: &'a [f64],
}

impl<R: Real, M: StateSpace<R> + ?Sized> Potential<R> for StepPotential<'_, R, M> {
    fn value_and_grad(&self, x: &[R]) -> (R, Vec<R>) {
        let (lg, gg) = self.model.emission_loglik_grad(x, self.y);
        let lf = diag_logpdf(x, self.mean, self.var);
        let gf = diag_logpdf_grad(x, self.mean, self.var);
        (lg + lf, linalg::vadd(&gg, &gf))
    }
}

/// Output of [`hsmc_filter`].
#[derive(Debug, Clone)]
pub struct HsmcRun<R> {
    pub run: FilterRun<R>,
    /// Per step (from the second on), per particle.
    pub records: Vec<Vec<HsmcStepRecord>>,
}

/// Algorithm 2. The first step is a plain bootstrap step; afterwards each
/// particle is resampled, drawn from the transition, given a momentum
/// p⁰ ~ N(0, M(x⁰)), moved S steps and weighted. A particle whose integrator
/// fails keeps its starting point (an S = 0 move) and is counted.
pub fn hsmc_filter<R, M>(
    model: &M,
    metric: &dyn MetricSource<R>,
    seq: &Sequence,
    cfg: &HsmcConfig,
    seed: u64,
    record: bool,
) -> Result<HsmcRun<R>, FilterError>
where
    R: Real,
    M: StateSpace<R> + ?Sized,
{
    cfg.validate()?;
    let k = cfg.particles;
    let icfg = &cfg.integrator;
    let mut log = StepLog::new(cfg.record_predictions);
    let mut records = Vec::new();
    let mut xs: Vec<Vec<R>> = Vec::with_capacity(k);
    let mut lw: Vec<R> = Vec::with_capacity(k);
    let mut fallbacks = 0usize;
    let mut energy_err = 0.0;
    let mut flows = 0usize;
    for t in 0..seq.len() {
        let (u, y) = (seq.input(t), seq.y[t].as_slice());
        let mut next = Vec::with_capacity(k);
        let mut next_lw = Vec::with_capacity(k);
        if t == 0 {
            let (fm, fv) = model.initial(u);
            let mut starts = Vec::with_capacity(k);
            for i in 0..k {
                let x = draw_diag(&fm, &fv, seed, t, i);
                next_lw.push(model.emission_loglik(&x, y));
                starts.push(x);
            }
            log.predict(model, &starts);
            next = starts;
        } else {
            let y_prev = seq.y[t - 1].as_slice();
            let ancestors = resample(&lw, cfg.resample, seed, t)?;
            let mut starts = Vec::with_capacity(k);
            let mut step_records = Vec::new();
            for (i, &a) in ancestors.iter().enumerate() {
                let (fm, fv) = model.transition(&xs[a], u, y_prev);
                let x0 = draw_diag(&fm, &fv, seed, t, i);
                let frozen;
                let m: &dyn MetricSource<R> = if icfg.variant == IntegratorVariant::ConstantMetric {
                    frozen = ConstantMetric::new(metric.eval(&xs[a]));
                    &frozen
                } else {
                    metric
                };
                let eval0 = m.eval(&x0);
                let noise = RngStream::keyed(seed, t, i, Purpose::Momentum).normals(eval0.noise_dim());
                let p0 = eval0.sample_with(&noise);
                let log_n_0 = eval0.momentum_logpdf(&p0);
                let log_f_0 = diag_logpdf(&x0, &fm, &fv);
                let mut fallback = false;
                let moved = if icfg.steps == 0 {
                    None
                } else {
                    let pot = StepPotential {
                        model,
                        mean: &fm,
                        var: &fv,
                        y,
                    };
                    match rmhmc_transform(&PhaseState::new(x0.clone(), p0.clone()), &pot, m, icfg) {
                        Ok(tr) => {
                            energy_err += tr.max_energy_error();
                            flows += 1;
                            Some(tr.end)
                        }
                        Err(_) => {
                            fallback = true;
                            fallbacks += 1;
                            None
                        }
                    }
                };
                let (x_s, p_s, log_f_s, log_n_s) = match moved {
                    Some(end) => {
                        let lf = diag_logpdf(&end.x, &fm, &fv);
                        let ln = m.eval(&end.x).momentum_logpdf(&end.p);
                        (end.x, end.p, lf, ln)
                    }
                    None => (x0.clone(), p0.clone(), log_f_0, log_n_0),
                };
                let log_g = model.emission_loglik(&x_s, y);
                next_lw.push(combine(log_g, log_f_s, log_n_s, log_f_0, log_n_0));
                if record {
                    step_records.push(HsmcStepRecord {
                        ancestor: a,
                        x0: linalg::to_f64(&x0),
                        p0: linalg::to_f64(&p0),
                        xs: linalg::to_f64(&x_s),
                        ps: linalg::to_f64(&p_s),
                        log_g: log_g.value(),
                        log_f_s: log_f_s.value(),
                        log_n_s: log_n_s.value(),
                        log_f_0: log_f_0.value(),
                        log_n_0: log_n_0.value(),
                        fallback,
                    });
                }
                starts.push(x0);
                next.push(x_s);
            }
            log.predict(model, &starts);
            if record {
                records.push(step_records);
            }
        }
        log.push(t, &next_lw)?;
        xs = next;
        lw = next_lw;
    }
    let mut run = log.finish(&xs);
    run.result.integrator_fallbacks = Some(fallbacks);
    run.result.mean_energy_error = Some(if flows > 0 { energy_err / flows as f64 } else { 0.0 });
    Ok(HsmcRun { run, records })
}

/// Monte Carlo estimate of the HSMC ELBO from `reps` independent runs.
pub fn elbo_hsmc<M>(
    model: &M,
    metric: &(dyn MetricSource<f64> + Sync),
    seq: &Sequence,
    cfg: &HsmcConfig,
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
        Ok(hsmc_filter(model, metric as &dyn MetricSource<f64>, seq, cfg, s, false)?.run.log_z)
    })?;
    Ok((Estimate::from_samples(&samples), samples))
}

/// A model instantiated at some parameter values, plus the per-sequence
/// penalty subtracted from log Ẑ (zero unless the model has a prior term).
pub struct Built<'a, R> {
    pub model: Box<dyn StateSpace<R> + 'a>,
    pub penalty: R,
}

/// A model whose parameters can be put on a tape.
pub trait TapeModel: Sync {
    fn param_values(&self) -> Vec<f64>;

    /// The model with parameters replaced by `theta` (in `param_values` order).
    fn build<'a, R: Real + 'a>(&'a self, theta: &[R]) -> Result<Built<'a, R>, SsmError>;
}

impl TapeModel for SsmModel<f64> {
    fn param_values(&self) -> Vec<f64> {
        flatten(self)
    }

    fn build<'a, R: Real + 'a>(&'a self, theta: &[R]) -> Result<Built<'a, R>, SsmError> {
        Ok(Built {
            model: Box::new(unflatten(self, theta)),
            penalty: R::zero(),
        })
    }
}

/// log Ẑ with its pathwise gradient w.r.t. θ and φ.
#[derive(Debug, Clone)]
pub struct HsmcGradient {
    pub objective: f64,
    pub grad_theta: Vec<f64>,
    pub grad_phi: Vec<f64>,
    pub result: crate::smc::FilterResult,
}

/// ∇ log Ẑ_HSMC by reverse mode through the unrolled flows. Ancestor
/// indices are constants, so the resampling score term is dropped.
/// The objective is log Ẑ minus the model's penalty.
pub fn grad_elbo_hsmc<T: TapeModel>(
    model: &T,
    phi: &MetricField<f64>,
    seq: &Sequence,
    cfg: &HsmcConfig,
    seed: u64,
) -> Result<HsmcGradient, GradError> {
    let tape = Tape::new();
    let theta = tape.vars(&model.param_values());
    let phi_vals = flatten(phi);
    let phi_vars = tape.vars(&phi_vals);
    let phi_t: MetricField<Var> = unflatten(phi, &phi_vars);
    let built = model.build(&theta).map_err(FilterError::from)?;
    let out = hsmc_filter(&*built.model, &phi_t, seq, cfg, seed, false)?;
    let objective = out.run.log_z - built.penalty;
    let mut wrt = theta.clone();
    wrt.extend_from_slice(&phi_vars);
    let g = tape.gradient(objective, &wrt)?;
    let (gt, gp) = g.split_at(theta.len());
    Ok(HsmcGradient {
        objective: objective.value(),
        grad_theta: gt.to_vec(),
        grad_phi: gp.to_vec(),
        result: out.run.result,
    })
}

/// The same objective in plain f64 for given parameter vectors (frozen noise
/// through `seed`); used for finite-difference checks.
pub fn hsmc_objective<T: TapeModel>(
    model: &T,
    theta: &[f64],
    phi: &MetricField<f64>,
    phi_vals: &[f64],
    seq: &Sequence,
    cfg: &HsmcConfig,
    seed: u64,
) -> Result<f64, FilterError> {
    let built = model.build(theta)?;
    let field: MetricField<f64> = unflatten(phi, phi_vals);
    let out = hsmc_filter(&*built.model, &field, seq, cfg, seed, false)?;
    Ok(out.run.log_z - built.penalty)
}

#[derive(Debug, thiserror::Error)]
pub enum GradError {
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Ad(#[from] AdError),
}

/// Number of φ parameters, for splitting flat gradients.
pub fn metric_param_count(phi: &MetricField<f64>) -> usize {
    count(phi)
}
