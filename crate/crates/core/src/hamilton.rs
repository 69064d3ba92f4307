//! Hamiltonian energies, equations of motion and leapfrog integrators on a
//! position-dependent metric, plus a Metropolis-corrected sampler.
//!
//! Three integrators are provided:
//!
//! * `GeneralizedImplicit` (default): the generalized leapfrog, with
//!   fixed-point iterations for the implicit half-step in momentum and the
//!   full step in position. Symmetric, hence reversible and volume preserving.
//! * `Explicit`: the explicit update `p̃ = p + ε/2·Û(x,p)`,
//!   `x ← x + ε M(x)⁻¹ p̃`, `p ← p̃ + ε/2·Û(x,p̃)`. Not volume preserving
//!   once M varies with x; kept for comparison. `flip_force_sign` flips the sign
//!   of both momentum updates.
//! * `ConstantMetric`: ordinary leapfrog with the metric frozen at the start
//!   position.
//!
//! All routines are generic over [`Real`] so a whole trajectory can be
//! recorded on a tape. The potential supplies `∇L` itself; nothing here
//! differentiates through a tape.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metric::{ConstantMetric, MetricEval, MetricJet, MetricSource};
use crate::numcore::ad::Real;
use crate::numcore::linalg::{self, Mat};
use crate::numcore::rng::RngStream;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HamiltonError {
    #[error("{stage} fixed point did not converge in {iterations} iterations (residual {residual:e})")]
    NoConvergence {
        stage: &'static str,
        iterations: usize,
        residual: f64,
    },
    #[error("invalid integrator configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite phase state during integration")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntegratorVariant {
    ConstantMetric,
    #[default]
    GeneralizedImplicit,
    Explicit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegratorConfig {
    pub step_size: f64,
    pub steps: usize,
    pub variant: IntegratorVariant,
    pub max_iter: usize,
    pub tol: f64,
    /// Use `p ← p − ε/2·Û` in the explicit variant.
    pub flip_force_sign: bool,
    /// Always run `max_iter` fixed-point iterations, so the map is smooth in
    /// its inputs (used when differentiating through the flow).
    pub fixed_iterations: bool,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig {
            step_size: 0.05,
            steps: 5,
            variant: IntegratorVariant::GeneralizedImplicit,
            max_iter: 6,
            tol: 1e-10,
            flip_force_sign: false,
            fixed_iterations: false,
        }
    }
}

impl IntegratorConfig {
    pub fn new(step_size: f64, steps: usize, variant: IntegratorVariant) -> Self {
        IntegratorConfig {
            step_size,
            steps,
            variant,
            ..Default::default()
        }
    }

    /// Basic validity; `trajectory_bound` additionally enforces S·ε < 1.
    pub fn validate(&self, trajectory_bound: bool) -> Result<(), HamiltonError> {
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(HamiltonError::InvalidConfig(format!(
                "step size must be positive, got {}",
                self.step_size
            )));
        }
        if self.max_iter == 0 {
            return Err(HamiltonError::InvalidConfig("max_iter must be at least 1".into()));
        }
        if trajectory_bound && self.steps as f64 * self.step_size >= 1.0 {
            return Err(HamiltonError::InvalidConfig(format!(
                "S·ε must be below 1, got {}·{} = {}",
                self.steps,
                self.step_size,
                self.steps as f64 * self.step_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseState<R> {
    pub x: Vec<R>,
    pub p: Vec<R>,
}

impl<R: Real> PhaseState<R> {
    pub fn new(x: Vec<R>, p: Vec<R>) -> Self {
        assert_eq!(x.len(), p.len(), "position and momentum dimensions differ");
        PhaseState { x, p }
    }

    pub fn negated(&self) -> Self {
        PhaseState {
            x: self.x.clone(),
            p: self.p.iter().map(|&v| -v).collect(),
        }
    }

    pub fn to_f64(&self) -> PhaseState<f64> {
        PhaseState {
            x: linalg::to_f64(&self.x),
            p: linalg::to_f64(&self.p),
        }
    }

    fn is_finite(&self) -> bool {
        self.x.iter().chain(&self.p).all(|v| v.is_finite())
    }
}

/// The log target `L(x)` and its gradient.
pub trait Potential<R: Real> {
    fn value_and_grad(&self, x: &[R]) -> (R, Vec<R>);

    fn value(&self, x: &[R]) -> R {
        self.value_and_grad(x).0
    }
}

/// Adapts a closure returning `(L, ∇L)`.
pub struct FnPotential<F>(pub F);

impl<R: Real, F: Fn(&[R]) -> (R, Vec<R>)> Potential<R> for FnPotential<F> {
    fn value_and_grad(&self, x: &[R]) -> (R, Vec<R>) {
        (self.0)(x)
    }
}

/// Zero-mean Gaussian log target `−½ xᵀ P x` with precision `P` (no normaliser).
#[derive(Debug, Clone)]
pub struct GaussianPotential {
    pub precision: Mat<f64>,
}

impl GaussianPotential {
    pub fn isotropic(n: usize) -> Self {
        GaussianPotential {
            precision: Mat::identity(n),
        }
    }
}

impl<R: Real> Potential<R> for GaussianPotential {
    fn value_and_grad(&self, x: &[R]) -> (R, Vec<R>) {
        let n = x.len();
        let mut g = vec![R::zero(); n];
        for i in 0..n {
            for j in 0..n {
                g[i] -= x[j] * self.precision.at(i, j);
            }
        }
        (linalg::dot(x, &g) * 0.5, g)
    }
}

/// Everything about a position the force needs, independent of momentum.
#[derive(Debug, Clone)]
pub struct ForceCache<R> {
    pub log_target: R,
    pub grad: Vec<R>,
    pub jet: MetricJet<R>,
    /// ½ tr(M⁻¹ ∂M/∂x_i)
    half_trace: Vec<R>,
    constant: bool,
}

impl<R: Real> ForceCache<R> {
    pub fn new<P, M>(x: &[R], pot: &P, metric: &M) -> Self
    where
        P: Potential<R> + ?Sized,
        M: MetricSource<R> + ?Sized,
    {
        let (log_target, grad) = pot.value_and_grad(x);
        let constant = metric.is_constant();
        let jet = if constant {
            MetricJet::constant(metric.eval(x))
        } else {
            metric.jet(x)
        };
        let n = x.len();
        let r = jet.eval.rank();
        let half_trace = if constant {
            vec![R::zero(); n]
        } else {
            let inv_v = jet.eval.inv_times_factor();
            let inv_diag = jet.eval.inv_diag(&inv_v);
            (0..n)
                .map(|i| {
                    let mut s = R::zero();
                    for j in 0..n {
                        s += inv_diag[j] * jet.ddiag.at(j, i);
                    }
                    let dv = &jet.dv[i];
                    let mut cross = R::zero();
                    for j in 0..n {
                        for c in 0..r {
                            cross += inv_v.at(j, c) * dv.at(j, c);
                        }
                    }
                    s * 0.5 + cross
                })
                .collect()
        };
        ForceCache {
            log_target,
            grad,
            jet,
            half_trace,
            constant,
        }
    }

    pub fn metric(&self) -> &MetricEval<R> {
        &self.jet.eval
    }

    /// −∂H/∂x at this position for momentum `p`.
    pub fn force(&self, p: &[R]) -> Vec<R> {
        if self.constant {
            return self.grad.clone();
        }
        let n = p.len();
        let m = &self.jet.eval;
        let r = m.rank();
        let q = m.solve(p);
        let qv: Vec<R> = (0..r).map(|c| (0..n).fold(R::zero(), |acc, j| acc + q[j] * m.v.at(j, c))).collect();
        (0..n)
            .map(|i| {
                let mut quad = R::zero();
                for j in 0..n {
                    quad += q[j] * q[j] * self.jet.ddiag.at(j, i);
                }
                let dv = &self.jet.dv[i];
                for c in 0..r {
                    let mut qdv = R::zero();
                    for j in 0..n {
                        qdv += q[j] * dv.at(j, c);
                    }
                    quad += qdv * qv[c] * 2.0;
                }
                self.grad[i] - self.half_trace[i] + quad * 0.5
            })
            .collect()
    }

    /// Riemannian energy `−L + ½pᵀM⁻¹p + ½log((2π)^D |M|)`.
    pub fn energy(&self, p: &[R]) -> R {
        let m = &self.jet.eval;
        -self.log_target + (m.quad(p) + m.logdet()) * 0.5 + HALF_LN_2PI * p.len() as f64
    }
}

/// Hamiltonian energy. The constant-metric form omits the log-determinant
/// normaliser.
pub fn energy<R: Real, P: Potential<R> + ?Sized>(ps: &PhaseState<R>, pot: &P, m: &MetricEval<R>, riemannian: bool) -> R {
    let kinetic = m.quad(&ps.p) * 0.5;
    let base = -pot.value(&ps.x) + kinetic;
    if riemannian {
        base + m.logdet() * 0.5 + HALF_LN_2PI * ps.x.len() as f64
    } else {
        base
    }
}

/// `ṗ = ∇L − ½tr(M⁻¹∂M) + ½pᵀM⁻¹∂M M⁻¹p`, per coordinate.
pub fn force<R, P, M>(ps: &PhaseState<R>, pot: &P, metric: &M) -> Vec<R>
where
    R: Real,
    P: Potential<R> + ?Sized,
    M: MetricSource<R> + ?Sized,
{
    ForceCache::new(&ps.x, pot, metric).force(&ps.p)
}

fn max_abs_change<R: Real>(a: &[R], b: &[R]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x.value() - y.value()).abs()).fold(0.0, f64::max)
}

fn half_kick<R: Real>(p: &[R], f: &[R], h: f64) -> Vec<R> {
    p.iter().zip(f).map(|(&pi, &fi)| pi + fi * h).collect()
}

/// Result of one step, with the cache at the end position for reuse.
struct StepOut<R> {
    ps: PhaseState<R>,
    end: ForceCache<R>,
}

fn implicit_step<R, P, M>(
    ps: &PhaseState<R>,
    start: &ForceCache<R>,
    pot: &P,
    metric: &M,
    cfg: &IntegratorConfig,
) -> Result<StepOut<R>, HamiltonError>
where
    R: Real,
    P: Potential<R> + ?Sized,
    M: MetricSource<R> + ?Sized,
{
    let h = 0.5 * cfg.step_size;
    // p½ = p + h·F(x, p½)
    let mut ph = ps.p.clone();
    let mut residual = f64::INFINITY;
    for _ in 0..cfg.max_iter {
        let next = half_kick(&ps.p, &start.force(&ph), h);
        residual = max_abs_change(&next, &ph);
        ph = next;
        if residual < cfg.tol && !cfg.fixed_iterations {
            break;
        }
    }
    if !(residual < cfg.tol) {
        return Err(HamiltonError::NoConvergence {
            stage: "momentum",
            iterations: cfg.max_iter,
            residual,
        });
    }
    // x' = x + h·[M(x)⁻¹ + M(x')⁻¹] p½
    let v0 = start.metric().solve(&ph);
    let mut xn: Vec<R> = ps.x.iter().zip(&v0).map(|(&xi, &vi)| xi + vi * cfg.step_size).collect();
    residual = f64::INFINITY;
    for _ in 0..cfg.max_iter {
        let v1 = metric.eval(&xn).solve(&ph);
        let next: Vec<R> = (0..xn.len()).map(|i| ps.x[i] + (v0[i] + v1[i]) * h).collect();
        residual = max_abs_change(&next, &xn);
        xn = next;
        if residual < cfg.tol && !cfg.fixed_iterations {
            break;
        }
    }
    if !(residual < cfg.tol) {
        return Err(HamiltonError::NoConvergence {
            stage: "position",
            iterations: cfg.max_iter,
            residual,
        });
    }
    let end = ForceCache::new(&xn, pot, metric);
    let pn = half_kick(&ph, &end.force(&ph), h);
    Ok(StepOut {
        ps: PhaseState { x: xn, p: pn },
        end,
    })
}

fn explicit_step<R, P, M>(ps: &PhaseState<R>, start: &ForceCache<R>, pot: &P, metric: &M, cfg: &IntegratorConfig) -> StepOut<R>
where
    R: Real,
    P: Potential<R> + ?Sized,
    M: MetricSource<R> + ?Sized,
{
    let h = if cfg.flip_force_sign { -0.5 } else { 0.5 } * cfg.step_size;
    let pt = half_kick(&ps.p, &start.force(&ps.p), h);
    let v = start.metric().solve(&pt);
    let xn: Vec<R> = ps.x.iter().zip(&v).map(|(&xi, &vi)| xi + vi * cfg.step_size).collect();
    let end = ForceCache::new(&xn, pot, metric);
    let pn = half_kick(&pt, &end.force(&pt), h);
    StepOut {
        ps: PhaseState { x: xn, p: pn },
        end,
    }
}

fn step_with_cache<R, P, M>(
    ps: &PhaseState<R>,
    start: &ForceCache<R>,
    pot: &P,
    metric: &M,
    cfg: &IntegratorConfig,
) -> Result<StepOut<R>, HamiltonError>
where
    R: Real,
    P: Potential<R> + ?Sized,
    M: MetricSource<R> + ?Sized,
{
    let out = match cfg.variant {
        IntegratorVariant::GeneralizedImplicit if !metric.is_constant() => implicit_step(ps, start, pot, metric, cfg)?,
        IntegratorVariant::Explicit => explicit_step(ps, start, pot, metric, cfg),
        // constant metric: the implicit and explicit schemes coincide with plain leapfrog
        _ => explicit_step(
            ps,
            start,
            pot,
            metric,
            &IntegratorConfig {
                flip_force_sign: false,
                ..*cfg
            },
        ),
    };
    if !out.ps.is_finite() {
        return Err(HamiltonError::NonFinite);
    }
    Ok(out)
}

/// One integrator step.
pub fn leapfrog_step<R, P, M>(ps: &PhaseState<R>, pot: &P, metric: &M, cfg: &IntegratorConfig) -> Result<PhaseState<R>, HamiltonError>
where
    R: Real,
    P: Potential<R> + ?Sized,
    M: MetricSource<R> + ?Sized,
{
    cfg.validate(false)?;
    if cfg.variant == IntegratorVariant::ConstantMetric && !metric.is_constant() {
        let frozen = ConstantMetric::new(metric.eval(&ps.x));
        let start = ForceCache::new(&ps.x, pot, &frozen);
        return Ok(step_with_cache(ps, &start, pot, &frozen, cfg)?.ps);
    }
    let start = ForceCache::new(&ps.x, pot, metric);
    Ok(step_with_cache(ps, &start, pot, metric, cfg)?.ps)
}

/// Output of an S-step transform.
#[derive(Debug, Clone)]
pub struct Trajectory<R> {
    pub end: PhaseState<R>,
    /// Riemannian energy before the first step and after every step.
    pub energies: Vec<f64>,
}

impl<R> Trajectory<R> {
    /// max_s |H_s − H_0|
    pub fn max_energy_error(&self) -> f64 {
        let h0 = self.energies[0];
        self.energies.iter().map(|h| (h - h0).abs()).fold(0.0, f64::max)
    }
}

/// S integrator steps from `ps0`. `S = 0` returns the input unchanged.
pub fn rmhmc_transform<R, P, M>(ps0: &PhaseState<R>, pot: &P, metric: &M, cfg: &IntegratorConfig) -> Result<Trajectory<R>, HamiltonError>
where
    R: Real,
    P: Potential<R> + ?Sized,
    M: MetricSource<R> + ?Sized,
{
    cfg.validate(false)?;
    if cfg.variant == IntegratorVariant::ConstantMetric && !metric.is_constant() {
        let frozen = ConstantMetric::new(metric.eval(&ps0.x));
        return run_steps(ps0, pot, &frozen, cfg);
    }
    run_steps(ps0, pot, metric, cfg)
}

fn run_steps<R, P, M>(ps0: &PhaseState<R>, pot: &P, metric: &M, cfg: &IntegratorConfig) -> Result<Trajectory<R>, HamiltonError>
where
    R: Real,
    P: Potential<R> + ?Sized,
    M: MetricSource<R> + ?Sized,
{
    if cfg.steps == 0 {
        return Ok(Trajectory {
            end: ps0.clone(),
            energies: vec![],
        });
    }
    let mut cache = ForceCache::new(&ps0.x, pot, metric);
    let mut energies = Vec::with_capacity(cfg.steps + 1);
    energies.push(cache.energy(&ps0.p).value());
    let mut ps = ps0.clone();
    for _ in 0..cfg.steps {
        let out = step_with_cache(&ps, &cache, pot, metric, cfg)?;
        ps = out.ps;
        cache = out.end;
        energies.push(cache.energy(&ps.p).value());
    }
    Ok(Trajectory { end: ps, energies })
}

/// A Metropolis-corrected chain.
#[derive(Debug, Clone)]
pub struct HmcChain {
    pub samples: Vec<Vec<f64>>,
    pub acceptance_rate: f64,
    pub integrator_failures: usize,
}

/// (RM)HMC with momentum refresh `p ~ N(0, M(x))` and an accept/reject step
/// on the Riemannian energy. Integrator failures count as rejections.
pub fn hmc_sample<P, M>(
    rng: &mut RngStream,
    pot: &P,
    metric: &M,
    cfg: &IntegratorConfig,
    x0: &[f64],
    n: usize,
) -> Result<HmcChain, HamiltonError>
where
    P: Potential<f64> + ?Sized,
    M: MetricSource<f64> + ?Sized,
{
    cfg.validate(false)?;
    let mut x = x0.to_vec();
    let mut samples = Vec::with_capacity(n);
    let mut accepted = 0usize;
    let mut failures = 0usize;
    for _ in 0..n {
        let cache = ForceCache::new(&x, pot, metric);
        let noise = rng.normals(cache.metric().noise_dim());
        let p = cache.metric().sample_with(&noise);
        let h0 = cache.energy(&p);
        let u = rng.uniform();
        match rmhmc_transform(&PhaseState::new(x.clone(), p), pot, metric, cfg) {
            Ok(tr) => {
                let h1 = *tr.energies.last().unwrap_or(&h0);
                if h1.is_finite() && u.ln() < h0 - h1 {
                    x = tr.end.x;
                    accepted += 1;
                }
            }
            Err(_) => failures += 1,
        }
        samples.push(x.clone());
    }
    Ok(HmcChain {
        samples,
        acceptance_rate: accepted as f64 / n.max(1) as f64,
        integrator_failures: failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metric::MetricField;
    use crate::numcore::fd::fd_gradient;
    use crate::numcore::rng::Purpose;

    fn gauss1() -> GaussianPotential {
        GaussianPotential::isotropic(1)
    }

    fn field(seed: u64, dim: usize) -> MetricField<f64> {
        let mut rng = RngStream::keyed(seed, 0, 0, Purpose::Test);
        MetricField::random(dim, 8, 1, 0.5, &mut rng)
    }

    #[test]
    fn energy_constants() {
        let ps = PhaseState::new(vec![0.0], vec![0.0]);
        let m = MetricEval::identity(1);
        assert!((energy(&ps, &gauss1(), &m, true) - 0.918_938_533_204_672_7).abs() < 1e-12);
        assert_eq!(energy(&ps, &gauss1(), &m, false), 0.0);
        let ps = PhaseState::new(vec![1.0], vec![2.0]);
        assert_eq!(energy(&ps, &gauss1(), &m, false), 2.5);
    }

    #[test]
    fn constant_metric_force_is_gradient() {
        let ps = PhaseState::new(vec![0.7, -0.2], vec![1.0, 3.0]);
        let f = force(&ps, &GaussianPotential::isotropic(2), &ConstantMetric::identity(2));
        assert_eq!(f, vec![-0.7, 0.2]);
    }

    #[test]
    fn force_is_negative_energy_gradient() {
        let phi = field(1, 3);
        let pot = GaussianPotential {
            precision: Mat::from_rows(&[vec![2.0, 0.3, 0.0], vec![0.3, 1.0, 0.1], vec![0.0, 0.1, 0.5]]),
        };
        let x = [0.3, -0.5, 0.8];
        let p = [0.4, 1.1, -0.7];
        let f = force(&PhaseState::new(x.to_vec(), p.to_vec()), &pot, &phi);
        let h_of = |xv: &[f64]| ForceCache::new(xv, &pot, &phi).energy(&p);
        let g = fd_gradient(h_of, &x, 1e-5).unwrap();
        for i in 0..3 {
            assert!((f[i] + g[i]).abs() < 1e-5 * (1.0 + f[i].abs()), "{i}: {} vs {}", f[i], -g[i]);
        }
    }

    #[test]
    fn force_without_momentum_or_potential_is_trace_term() {
        let phi = field(2, 2);
        let flat = FnPotential(|x: &[f64]| (0.0, vec![0.0; x.len()]));
        let x = [0.2, 0.1];
        let f = force(&PhaseState::new(x.to_vec(), vec![0.0, 0.0]), &flat, &phi);
        let m = phi.metric_eval(&x).dense();
        let minv = linalg::chol_inverse(&linalg::cholesky(&m).unwrap());
        for (i, dm) in phi.metric_dx(&x).iter().enumerate() {
            let tr = minv.matmul(dm).trace();
            assert!((f[i] + 0.5 * tr).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_computed_leapfrog() {
        let cfg = IntegratorConfig::new(0.1, 1, IntegratorVariant::ConstantMetric);
        let out = leapfrog_step(
            &PhaseState::new(vec![1.0], vec![0.0]),
            &gauss1(),
            &ConstantMetric::identity(1),
            &cfg,
        )
        .unwrap();
        assert!((out.x[0] - 0.995).abs() < 1e-15);
        assert!((out.p[0] + 0.099_75).abs() < 1e-15);
        for variant in [IntegratorVariant::GeneralizedImplicit, IntegratorVariant::Explicit] {
            let c = IntegratorConfig { variant, ..cfg };
            let o = leapfrog_step(&PhaseState::new(vec![1.0], vec![0.0]), &gauss1(), &ConstantMetric::identity(1), &c).unwrap();
            assert_eq!(o, out);
        }
    }

    #[test]
    fn tiny_step_is_identity() {
        let phi = field(3, 2);
        let ps = PhaseState::new(vec![0.4, -0.3], vec![0.9, 0.2]);
        let cfg = IntegratorConfig::new(1e-8, 1, IntegratorVariant::GeneralizedImplicit);
        let out = leapfrog_step(&ps, &GaussianPotential::isotropic(2), &phi, &cfg).unwrap();
        assert!(linalg::max_abs_diff(&out.x, &ps.x) < 1e-7);
        assert!(linalg::max_abs_diff(&out.p, &ps.p) < 1e-7);
    }

    #[test]
    fn reversible_for_every_variant_on_constant_metric() {
        let m = ConstantMetric::new(MetricEval::new(vec![1.5, 0.8], Mat::from_rows(&[vec![0.4], vec![-0.6]])));
        let pot = GaussianPotential {
            precision: Mat::from_rows(&[vec![1.0, 0.5], vec![0.5, 2.0]]),
        };
        let ps = PhaseState::new(vec![0.3, -1.0], vec![0.5, 0.7]);
        for variant in [
            IntegratorVariant::ConstantMetric,
            IntegratorVariant::GeneralizedImplicit,
            IntegratorVariant::Explicit,
        ] {
            let cfg = IntegratorConfig::new(0.1, 1, variant);
            let fwd = leapfrog_step(&ps, &pot, &m, &cfg).unwrap();
            let back = leapfrog_step(&fwd.negated(), &pot, &m, &cfg).unwrap().negated();
            assert!(linalg::max_abs_diff(&back.x, &ps.x) < 1e-12);
            assert!(linalg::max_abs_diff(&back.p, &ps.p) < 1e-12);
        }
    }

    #[test]
    fn implicit_reversible_on_varying_metric() {
        let phi = field(4, 3);
        let pot = GaussianPotential::isotropic(3);
        let ps = PhaseState::new(vec![0.3, -0.4, 0.2], vec![0.5, 0.7, -0.1]);
        let cfg = IntegratorConfig::new(0.05, 1, IntegratorVariant::GeneralizedImplicit);
        let fwd = leapfrog_step(&ps, &pot, &phi, &cfg).unwrap();
        let back = leapfrog_step(&fwd.negated(), &pot, &phi, &cfg).unwrap().negated();
        assert!(linalg::max_abs_diff(&back.x, &ps.x) < 1e-8);
        assert!(linalg::max_abs_diff(&back.p, &ps.p) < 1e-8);
    }

    #[test]
    fn zero_steps_and_composition() {
        let phi = field(5, 2);
        let pot = GaussianPotential::isotropic(2);
        let ps = PhaseState::new(vec![0.1, 0.2], vec![-0.3, 0.4]);
        let c0 = IntegratorConfig::new(0.05, 0, IntegratorVariant::GeneralizedImplicit);
        assert_eq!(rmhmc_transform(&ps, &pot, &phi, &c0).unwrap().end, ps);
        let c = |s| IntegratorConfig::new(0.05, s, IntegratorVariant::GeneralizedImplicit);
        let a = rmhmc_transform(&ps, &pot, &phi, &c(2)).unwrap().end;
        let ab = rmhmc_transform(&a, &pot, &phi, &c(3)).unwrap().end;
        let whole = rmhmc_transform(&ps, &pot, &phi, &c(5)).unwrap().end;
        assert_eq!(ab, whole);
    }

    #[test]
    fn energy_drift_bound() {
        let pot = GaussianPotential::isotropic(2);
        let m = ConstantMetric::identity(2);
        let ps = PhaseState::new(vec![1.0, -0.5], vec![0.3, 0.8]);
        let cfg = IntegratorConfig::new(0.05, 10, IntegratorVariant::ConstantMetric);
        let tr = rmhmc_transform(&ps, &pot, &m, &cfg).unwrap();
        let drift = (tr.energies.last().unwrap() - tr.energies[0]).abs();
        assert!(drift < 0.5 * 0.05 * 0.05 * 10.0, "{drift}");
    }

    #[test]
    fn flipped_force_sign_breaks_energy_conservation() {
        let pot = GaussianPotential::isotropic(1);
        let m = ConstantMetric::identity(1);
        let ps = PhaseState::new(vec![1.0], vec![0.0]);
        let mut cfg = IntegratorConfig::new(0.05, 10, IntegratorVariant::Explicit);
        let good = rmhmc_transform(&ps, &pot, &m, &cfg).unwrap().max_energy_error();
        cfg.flip_force_sign = true;
        let bad = rmhmc_transform(&ps, &pot, &m, &cfg).unwrap().max_energy_error();
        assert!(good < 1e-3 && bad > 0.1, "{good} {bad}");
    }

    #[test]
    fn sampler_recovers_standard_normal() {
        let mut rng = RngStream::keyed(9, 0, 0, Purpose::Hmc);
        let cfg = IntegratorConfig::new(0.2, 5, IntegratorVariant::GeneralizedImplicit);
        let chain = hmc_sample(&mut rng, &gauss1(), &ConstantMetric::identity(1), &cfg, &[0.0], 10_000).unwrap();
        let xs: Vec<f64> = chain.samples.iter().map(|s| s[0]).collect();
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
        assert!(m.abs() < 0.05, "{m}");
        assert!((v - 1.0).abs() < 0.1, "{v}");
        assert!(chain.acceptance_rate > 0.9);
    }

    #[test]
    fn huge_step_rejects_but_stays_valid() {
        let mut rng = RngStream::keyed(10, 0, 0, Purpose::Hmc);
        let cfg = IntegratorConfig::new(10.0, 5, IntegratorVariant::GeneralizedImplicit);
        let chain = hmc_sample(&mut rng, &gauss1(), &ConstantMetric::identity(1), &cfg, &[0.5], 200).unwrap();
        assert!(chain.acceptance_rate < 0.05);
        assert!(chain.samples.iter().all(|s| s[0].is_finite()));
    }

    #[test]
    fn trajectory_bound_is_checked() {
        let cfg = IntegratorConfig::new(0.2, 5, IntegratorVariant::GeneralizedImplicit);
        assert!(cfg.validate(false).is_ok());
        assert!(cfg.validate(true).is_err());
        assert!(IntegratorConfig::new(0.0, 1, IntegratorVariant::ConstantMetric)
            .validate(false)
            .is_err());
    }
}
