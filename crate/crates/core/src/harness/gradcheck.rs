use serde::{Deserialize, Serialize};

use super::ModelFamily;
use crate::gpssm::{GpSpec, GpSsm};
use crate::hsmc::{grad_elbo_hsmc, hsmc_objective, GradError, HsmcConfig, TapeModel};
use crate::metric::MetricField;
use crate::numcore::fd::{fd_gradient, scaled_relative_error};
use crate::numcore::params::flatten;
use crate::numcore::rng::{Purpose, RngStream};
use crate::ssm::{NeuralSpec, Sequence, SsmModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    pub particles: usize,
    pub steps: usize,
    pub step_size: f64,
    pub length: usize,
    pub fd_step: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            particles: 3,
            steps: 3,
            step_size: 0.1,
            length: 6,
            fd_step: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub model: ModelFamily,
    pub model_params: usize,
    pub metric_params: usize,
    pub objective: f64,
    pub max_relative_error: f64,
}

/// Reverse-mode ∇ log Ẑ_HSMC against central differences of the same
/// frozen-noise objective, on a small random model of the given family
/// (at most 50 parameters including the metric).
pub fn check_gradient(family: ModelFamily, seed: u64, cfg: &GradCheckConfig) -> Result<GradCheckReport, GradError> {
    let mut rng = RngStream::keyed(seed, 0, 0, Purpose::Parameters);
    let obs_dim = 2;
    let seq = Sequence {
        id: "check".into(),
        y: (0..cfg.length).map(|_| rng.normals(obs_dim)).collect(),
        u: vec![],
    };
    let mut hcfg = HsmcConfig::new(cfg.particles, cfg.steps, cfg.step_size);
    hcfg.integrator.fixed_iterations = true;
    match family {
        ModelFamily::Lgssm | ModelFamily::NnGssm => {
            let hidden = if family == ModelFamily::Lgssm { 0 } else { 2 };
            let spec = NeuralSpec {
                latent_dim: 2,
                obs_dim,
                transition_hidden: hidden,
                decoder_hidden: 0,
                condition_on_prev_obs: false,
                ..Default::default()
            };
            let model = SsmModel::random(&spec, &mut rng);
            let phi = MetricField::random(2, 1, 1, 0.3, &mut rng);
            run(family, &model, &phi, &seq, &hcfg, seed, cfg.fd_step)
        }
        ModelFamily::Gpssm => {
            let spec = NeuralSpec {
                latent_dim: 1,
                obs_dim,
                decoder_hidden: 0,
                ..Default::default()
            };
            let emission = SsmModel::random(&spec, &mut rng).emission;
            let gp = GpSpec {
                obs_dim,
                inducing: 3,
                ..Default::default()
            };
            let model = GpSsm::init(&gp, emission, None, &mut rng);
            let phi = MetricField::random(1, 1, 1, 0.3, &mut rng);
            run(family, &model, &phi, &seq, &hcfg, seed, cfg.fd_step)
        }
    }
}

fn run<T: TapeModel>(
    family: ModelFamily,
    model: &T,
    phi: &MetricField<f64>,
    seq: &Sequence,
    cfg: &HsmcConfig,
    seed: u64,
    h: f64,
) -> Result<GradCheckReport, GradError> {
    let g = grad_elbo_hsmc(model, phi, seq, cfg, seed)?;
    let theta = model.param_values();
    let pv = flatten(phi);
    let nt = theta.len();
    let mut all = theta;
    all.extend_from_slice(&pv);
    let fd = fd_gradient(
        |p| hsmc_objective(model, &p[..nt], phi, &p[nt..], seq, cfg, seed).unwrap_or(f64::NAN),
        &all,
        h,
    )
    .map_err(|e| GradError::Filter(crate::smc::FilterError::InvalidConfig(e.to_string())))?;
    let mut an = g.grad_theta;
    an.extend_from_slice(&g.grad_phi);
    Ok(GradCheckReport {
        model: family,
        model_params: nt,
        metric_params: pv.len(),
        objective: g.objective,
        max_relative_error: scaled_relative_error(&an, &fd),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_family_passes() {
        for family in [ModelFamily::Lgssm, ModelFamily::NnGssm, ModelFamily::Gpssm] {
            let r = check_gradient(family, 3, &GradCheckConfig::default()).unwrap();
            assert!(r.model_params + r.metric_params <= 50, "{r:?}");
            assert!(r.max_relative_error < 1e-4, "{r:?}");
        }
    }
}
