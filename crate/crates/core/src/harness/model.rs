use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{read_json, write_json, Adam, ExperimentConfig, HarnessError, ModelFamily};
use crate::gpssm::{gp_kl, GpSpec, GpSsm};
use crate::hsmc::{grad_elbo_hsmc, hsmc_filter, GradError, HsmcConfig, HsmcGradient, TapeModel};
use crate::metric::{MetricField, MetricSource};
use crate::numcore::params::unflatten;
use crate::numcore::rng::{derive_seed, Purpose, RngStream};
use crate::smc::{FilterError, FilterResult};
use crate::ssm::{Emission, EmissionFamily, NeuralSpec, Sequence, SsmModel, StateSpace, TrajectoryBatch};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Starts a Gaussian decoder from the data: the observation variance at a
/// tenth of each output's variance, so that noise alone cannot explain the
/// data at the outset, and a bounded output range at the observed range
/// widened by 10% on either side.
fn fit_emission_to_data(emission: &mut Emission<f64>, data: &TrajectoryBatch) {
    let EmissionFamily::Gaussian { log_var } = &mut emission.family else {
        return;
    };
    let dy = log_var.len();
    let mut lo = vec![f64::INFINITY; dy];
    let mut hi = vec![f64::NEG_INFINITY; dy];
    let mut sum = vec![0.0; dy];
    let mut sq = vec![0.0; dy];
    let mut n = 0usize;
    for y in data.sequences.iter().flat_map(|s| &s.y) {
        for j in 0..dy {
            lo[j] = lo[j].min(y[j]);
            hi[j] = hi[j].max(y[j]);
            sum[j] += y[j];
            sq[j] += y[j] * y[j];
        }
        n += 1;
    }
    if n < 2 {
        return;
    }
    for j in 0..dy {
        let mean = sum[j] / n as f64;
        let var = (sq[j] / n as f64 - mean * mean).max(0.0);
        if var.is_finite() && var > 0.0 {
            log_var[j] = (0.1 * var).ln();
        }
        let span = hi[j] - lo[j];
        if let Some(range) = emission.range.as_mut().filter(|_| span.is_finite() && span > 0.0) {
            range.lo[j] = lo[j] - 0.1 * span;
            range.width[j] = 1.2 * span;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", content = "params", rename_all = "kebab-case")]
pub enum ModelParams {
    Ssm(SsmModel<f64>),
    Gp(GpSsm<f64>),
}

impl ModelParams {
    /// Fresh parameters for `cfg`, with observation and input sizes taken
    /// from the data.
    pub fn init(cfg: &ExperimentConfig, data: &TrajectoryBatch) -> Result<Self, HarnessError> {
        let first = data
            .sequences
            .first()
            .ok_or_else(|| HarnessError::Mismatch("dataset has no sequences".into()))?;
        let obs_dim = first.y.first().map_or(0, |y| y.len());
        let input_dim = first.u.first().map_or(0, |u| u.len());
        let mut rng = RngStream::keyed(cfg.seed, 0, 0, Purpose::Parameters);
        let mut spec = NeuralSpec {
            obs_dim,
            input_dim,
            ..cfg.neural
        };
        Ok(match cfg.model {
            ModelFamily::Lgssm => {
                spec.transition_hidden = 0;
                spec.decoder_hidden = 0;
                spec.condition_on_prev_obs = false;
                ModelParams::Ssm(SsmModel::random(&spec, &mut rng))
            }
            ModelFamily::NnGssm => {
                let mut m = SsmModel::random(&spec, &mut rng);
                fit_emission_to_data(&mut m.emission, data);
                ModelParams::Ssm(m)
            }
            ModelFamily::Gpssm => {
                let gp = GpSpec {
                    obs_dim,
                    input_dim,
                    ..cfg.gp
                };
                spec.latent_dim = gp.latent_dim;
                let mut emission = SsmModel::random(&spec, &mut rng).emission;
                fit_emission_to_data(&mut emission, data);
                ModelParams::Gp(GpSsm::init(&gp, emission, Some(data), &mut rng))
            }
        })
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            ModelParams::Ssm(m) => m.latent_dim,
            ModelParams::Gp(g) => g.transition.latent_dim,
        }
    }

    fn dims(&self) -> (usize, usize) {
        match self {
            ModelParams::Ssm(m) => (m.obs_dim, m.input_dim),
            ModelParams::Gp(g) => (g.transition.obs_dim, g.transition.input_dim),
        }
    }

    pub fn check_data(&self, data: &TrajectoryBatch) -> Result<(), HarnessError> {
        let (dy, du) = self.dims();
        data.validate(dy, du).map_err(|e| HarnessError::Mismatch(e.to_string()))
    }

    pub fn param_values(&self) -> Vec<f64> {
        match self {
            ModelParams::Ssm(m) => m.param_values(),
            ModelParams::Gp(g) => g.param_values(),
        }
    }

    pub fn with_params(&self, v: &[f64]) -> Self {
        match self {
            ModelParams::Ssm(m) => ModelParams::Ssm(unflatten(m, v)),
            ModelParams::Gp(g) => ModelParams::Gp(unflatten(g, v)),
        }
    }

    /// Per-sequence term subtracted from log Ẑ.
    pub fn penalty(&self) -> Result<f64, FilterError> {
        match self {
            ModelParams::Ssm(_) => Ok(0.0),
            ModelParams::Gp(g) => Ok(gp_kl(&g.transition)?),
        }
    }

    pub fn gradient(&self, phi: &MetricField<f64>, seq: &Sequence, cfg: &HsmcConfig, seed: u64) -> Result<HsmcGradient, GradError> {
        match self {
            ModelParams::Ssm(m) => grad_elbo_hsmc(m, phi, seq, cfg, seed),
            ModelParams::Gp(g) => grad_elbo_hsmc(g, phi, seq, cfg, seed),
        }
    }

    /// Filters every sequence (sequence n uses seed `derive_seed(seed, [n])`).
    /// The penalty is not included.
    pub fn filter_batch(
        &self,
        metric: &(dyn MetricSource<f64> + Sync),
        seqs: &[Sequence],
        cfg: &HsmcConfig,
        seed: u64,
    ) -> Result<Vec<FilterResult>, FilterError> {
        match self {
            ModelParams::Ssm(m) => filter_all(m, metric, seqs, cfg, seed),
            ModelParams::Gp(g) => filter_all(&g.prepare()?, metric, seqs, cfg, seed),
        }
    }
}

fn filter_all<M: StateSpace<f64> + Sync>(
    model: &M,
    metric: &(dyn MetricSource<f64> + Sync),
    seqs: &[Sequence],
    cfg: &HsmcConfig,
    seed: u64,
) -> Result<Vec<FilterResult>, FilterError> {
    seqs.par_iter()
        .enumerate()
        .map(|(n, s)| {
            Ok(hsmc_filter(
                model,
                metric as &dyn MetricSource<f64>,
                s,
                cfg,
                derive_seed(seed, &[n as u64]),
                false,
            )?
            .run
            .result)
        })
        .collect()
}

/// Everything needed to resume or evaluate a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub step: usize,
    pub model: ModelParams,
    pub metric: MetricField<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<Adam>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        #[derive(Deserialize)]
        struct Version {
            format_version: u32,
        }
        let v: Version = read_json(path)?;
        if v.format_version != CHECKPOINT_VERSION {
            return Err(HarnessError::CheckpointVersion {
                found: v.format_version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let c: Checkpoint = read_json(path)?;
        if c.metric.dim() != c.model.latent_dim() {
            return Err(HarnessError::Mismatch(format!(
                "metric dimension {} differs from latent dimension {}",
                c.metric.dim(),
                c.model.latent_dim()
            )));
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn data() -> TrajectoryBatch {
        TrajectoryBatch {
            sequences: vec![Sequence {
                id: "x".into(),
                y: vec![vec![0.1, 0.2]; 4],
                u: vec![],
            }],
        }
    }

    #[test]
    fn families_initialise_from_data() {
        for family in [ModelFamily::Lgssm, ModelFamily::NnGssm, ModelFamily::Gpssm] {
            let cfg = ExperimentConfig {
                model: family,
                ..Default::default()
            };
            let m = ModelParams::init(&cfg, &data()).unwrap();
            m.check_data(&data()).unwrap();
            let v = m.param_values();
            assert_eq!(m.with_params(&v), m);
        }
    }

    #[test]
    fn checkpoint_roundtrip_and_version_check() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            model: ModelFamily::Gpssm,
            ..Default::default()
        };
        let model = ModelParams::init(&cfg, &data()).unwrap();
        let mut rng = RngStream::keyed(1, 0, 0, Purpose::Test);
        let c = Checkpoint {
            format_version: CHECKPOINT_VERSION,
            step: 3,
            metric: MetricField::random(model.latent_dim(), 4, 1, 0.1, &mut rng),
            model,
            optimizer: None,
        };
        let p = dir.path().join("c.json");
        c.save(&p).unwrap();
        assert_eq!(Checkpoint::load(&p).unwrap(), c);
        let text = std::fs::read_to_string(&p)
            .unwrap()
            .replace("\"format_version\": 1", "\"format_version\": 99");
        std::fs::write(&p, text).unwrap();
        assert!(matches!(
            Checkpoint::load(&p),
            Err(HarnessError::CheckpointVersion { found: 99, .. })
        ));
    }
}
