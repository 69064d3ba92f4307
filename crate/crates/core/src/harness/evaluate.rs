use serde::{Deserialize, Serialize};

use super::{Checkpoint, HarnessError};
use crate::dist::ResampleScheme;
use crate::hamilton::{IntegratorConfig, IntegratorVariant};
use crate::hsmc::HsmcConfig;
use crate::numcore::rng::derive_seed;
use crate::smc::Estimate;
use crate::ssm::TrajectoryBatch;

/// The (K, S) grid of a results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalGrid {
    pub particles: Vec<usize>,
    pub steps: Vec<usize>,
    pub step_size: f64,
    pub variant: IntegratorVariant,
    pub resample: ResampleScheme,
    pub reps: usize,
    pub seed: u64,
}

impl Default for EvalGrid {
    fn default() -> Self {
        EvalGrid {
            particles: vec![5, 10],
            steps: vec![5, 10],
            step_size: 0.05,
            variant: IntegratorVariant::GeneralizedImplicit,
            resample: ResampleScheme::Multinomial,
            reps: 20,
            seed: 0,
        }
    }
}

/// One (K, S) cell: per-step ELBO estimates for bootstrap SMC and HSMC.
/// Replicate r of every cell uses the same seed, so cells are paired.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCell {
    pub particles: usize,
    pub steps: usize,
    pub smc: Estimate,
    pub hsmc: Estimate,
    pub smc_samples: Vec<f64>,
    pub hsmc_samples: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTable {
    pub time_steps: usize,
    pub sequences: usize,
    pub cells: Vec<EvalCell>,
}

impl EvalTable {
    pub fn cell(&self, particles: usize, steps: usize) -> Option<&EvalCell> {
        self.cells.iter().find(|c| c.particles == particles && c.steps == steps)
    }
}

/// Per-step ELBO of every sequence together, for each replicate.
fn per_step_samples(
    ckpt: &Checkpoint,
    data: &TrajectoryBatch,
    cfg: &HsmcConfig,
    grid: &EvalGrid,
    time_steps: usize,
) -> Result<Vec<f64>, HarnessError> {
    let penalty = ckpt.model.penalty()? * data.sequences.len() as f64;
    (0..grid.reps)
        .map(|r| {
            let runs = ckpt
                .model
                .filter_batch(&ckpt.metric, &data.sequences, cfg, derive_seed(grid.seed, &[r as u64]))?;
            Ok((runs.iter().map(|f| f.log_z).sum::<f64>() - penalty) / time_steps as f64)
        })
        .collect()
}

pub fn evaluate(ckpt: &Checkpoint, data: &TrajectoryBatch, grid: &EvalGrid) -> Result<EvalTable, HarnessError> {
    if grid.reps == 0 || grid.particles.is_empty() || grid.steps.is_empty() {
        return Err(HarnessError::Config("evaluation grid is empty".into()));
    }
    ckpt.model.check_data(data)?;
    let time_steps: usize = data.sequences.iter().map(|s| s.len()).sum();
    let mut cells = Vec::new();
    for &k in &grid.particles {
        for &s in &grid.steps {
            let cfg = |steps| HsmcConfig {
                particles: k,
                integrator: IntegratorConfig {
                    steps,
                    step_size: grid.step_size,
                    variant: grid.variant,
                    ..Default::default()
                },
                resample: grid.resample,
                record_predictions: false,
                enforce_trajectory_bound: true,
            };
            let smc_samples = per_step_samples(ckpt, data, &cfg(0), grid, time_steps)?;
            let hsmc_samples = per_step_samples(ckpt, data, &cfg(s), grid, time_steps)?;
            cells.push(EvalCell {
                particles: k,
                steps: s,
                smc: Estimate::from_samples(&smc_samples),
                hsmc: Estimate::from_samples(&hsmc_samples),
                smc_samples,
                hsmc_samples,
            });
        }
    }
    Ok(EvalTable {
        time_steps,
        sequences: data.sequences.len(),
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{ExperimentConfig, ModelFamily, ModelParams, CHECKPOINT_VERSION};
    use crate::metric::MetricField;
    use crate::numcore::rng::{Purpose, RngStream};
    use crate::ssm::{gen_synthetic, NeuralSpec, SyntheticConfig};

    #[test]
    fn smc_column_ignores_steps_and_grid_is_complete() {
        let data = gen_synthetic(
            1,
            &SyntheticConfig {
                latent_dim: 2,
                obs_dim: 3,
                length: 10,
                sequences: 2,
                ..Default::default()
            },
        )
        .batch;
        let cfg = ExperimentConfig {
            model: ModelFamily::NnGssm,
            neural: NeuralSpec {
                latent_dim: 2,
                transition_hidden: 4,
                decoder_hidden: 4,
                ..Default::default()
            },
            ..Default::default()
        };
        let model = ModelParams::init(&cfg, &data).unwrap();
        let mut rng = RngStream::keyed(2, 0, 0, Purpose::Test);
        let ckpt = Checkpoint {
            format_version: CHECKPOINT_VERSION,
            step: 0,
            metric: MetricField::random(2, 4, 1, 0.1, &mut rng),
            model,
            optimizer: None,
        };
        let grid = EvalGrid {
            reps: 3,
            ..Default::default()
        };
        let t = evaluate(&ckpt, &data, &grid).unwrap();
        assert_eq!(t.cells.len(), 4);
        for k in [5, 10] {
            assert_eq!(t.cell(k, 5).unwrap().smc, t.cell(k, 10).unwrap().smc);
        }
        assert_ne!(t.cell(5, 5).unwrap().hsmc, t.cell(5, 10).unwrap().hsmc);
        assert_eq!(t.time_steps, 20);
    }
}
