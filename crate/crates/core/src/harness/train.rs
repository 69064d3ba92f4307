use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Adam, Checkpoint, ExperimentConfig, HarnessError, ModelParams, CHECKPOINT_VERSION};
use crate::metric::MetricField;
use crate::numcore::params::{flatten, unflatten};
use crate::numcore::rng::{derive_seed, Purpose, RngStream};
use crate::ssm::TrajectoryBatch;

/// One line of the metrics log. `heldout_ll_per_step` is empty on steps
/// without a held-out evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub train_elbo: f64,
    pub heldout_ll_per_step: Option<f64>,
    pub ess_mean: f64,
    pub integrator_fallbacks: usize,
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub checkpoint: Checkpoint,
    pub final_path: PathBuf,
    pub metrics_path: PathBuf,
    pub rows: Vec<MetricsRow>,
}

const HEADER: &str = "step,train_elbo,heldout_ll_per_step,ess_mean,integrator_fallbacks,wall_clock_s\n";

/// Appends rows to the metrics CSV, flushing each one so that a crashed
/// run leaves a valid prefix.
struct MetricsLog {
    file: std::fs::File,
    path: PathBuf,
}

impl MetricsLog {
    fn open(path: &Path) -> Result<Self, HarnessError> {
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| HarnessError::io(path, e))?;
        let empty = file.metadata().map_err(|e| HarnessError::io(path, e))?.len() == 0;
        if empty {
            file.write_all(HEADER.as_bytes()).map_err(|e| HarnessError::io(path, e))?;
        }
        Ok(MetricsLog {
            file,
            path: path.to_path_buf(),
        })
    }

    fn push(&mut self, row: &MetricsRow) -> Result<(), HarnessError> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        w.serialize(row)?;
        let bytes = w.into_inner().map_err(|e| HarnessError::io(&self.path, e.into_error()))?;
        self.file.write_all(&bytes).map_err(|e| HarnessError::io(&self.path, e))?;
        self.file.flush().map_err(|e| HarnessError::io(&self.path, e))
    }
}

fn load_batch(path: &Path) -> Result<TrajectoryBatch, HarnessError> {
    Ok(TrajectoryBatch::read_jsonl(path)?)
}

/// Held-out log-likelihood per time step: the ELBO estimate averaged over
/// `reps` runs with fixed seeds (so successive evaluations are paired).
fn heldout_ll(cfg: &ExperimentConfig, model: &ModelParams, metric: &MetricField<f64>, data: &TrajectoryBatch) -> Result<f64, HarnessError> {
    let hcfg = cfg.hsmc_config();
    let penalty = model.penalty()?;
    let steps: usize = data.sequences.iter().map(|s| s.len()).sum();
    let mut total = 0.0;
    for r in 0..cfg.eval_reps {
        let runs = model.filter_batch(metric, &data.sequences, &hcfg, derive_seed(cfg.seed, &[u32::MAX as u64, r as u64]))?;
        total += runs.iter().map(|f| f.log_z - penalty).sum::<f64>();
    }
    Ok(total / cfg.eval_reps as f64 / steps as f64)
}

/// Stochastic gradient ascent on the configured ELBO. Writes
/// `metrics.csv`, periodic `checkpoints/step_NNNNNN.json` and `final.json`
/// under the output directory.
pub fn train(cfg: &ExperimentConfig) -> Result<TrainSummary, HarnessError> {
    cfg.validate()?;
    let data = load_batch(&cfg.dataset)?;
    let heldout = cfg.heldout.as_deref().map(load_batch).transpose()?;
    let ckpt_dir = cfg.output_dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir).map_err(|e| HarnessError::io(&ckpt_dir, e))?;

    let n_params;
    let (mut model, mut metric, mut adam, start) = match &cfg.init_checkpoint {
        Some(p) => {
            let c = Checkpoint::load(p)?;
            n_params = c.model.param_values().len() + flatten(&c.metric).len();
            let adam = match c.optimizer {
                Some(a) if a.m.len() == n_params => a,
                _ => Adam::new(&cfg.optimizer, n_params),
            };
            (c.model, c.metric, adam, c.step)
        }
        None => {
            let model = ModelParams::init(cfg, &data)?;
            let mut rng = RngStream::keyed(cfg.seed, 0, 1, Purpose::Parameters);
            let mut metric = MetricField::random(
                model.latent_dim(),
                cfg.metric.hidden,
                cfg.metric.rank,
                cfg.metric.init_scale,
                &mut rng,
            );
            metric.jitter = cfg.metric.jitter;
            n_params = model.param_values().len() + flatten(&metric).len();
            (model, metric, Adam::new(&cfg.optimizer, n_params), 0)
        }
    };
    model.check_data(&data)?;
    if let Some(h) = &heldout {
        model.check_data(h)?;
    }

    let metrics_path = cfg.output_dir.join("metrics.csv");
    let mut log = MetricsLog::open(&metrics_path)?;
    let hcfg = cfg.hsmc_config();
    let n_seq = data.sequences.len();
    let bs = cfg.optimizer.batch_size.min(n_seq);
    let clock = Instant::now();
    let mut rows = Vec::new();
    for step in start..cfg.optimizer.steps {
        let idx: Vec<usize> = if bs == n_seq {
            (0..n_seq).collect()
        } else {
            let mut rng = RngStream::keyed(cfg.seed, step, 0, Purpose::Minibatch);
            let mut v = sample(&mut rng, n_seq, bs).into_vec();
            v.sort_unstable();
            v
        };
        let grads = idx
            .par_iter()
            .map(|&i| model.gradient(&metric, &data.sequences[i], &hcfg, derive_seed(cfg.seed, &[step as u64, i as u64])))
            .collect::<Result<Vec<_>, _>>()?;

        let nt = grads[0].grad_theta.len();
        let mut g = vec![0.0; n_params];
        let (mut elbo, mut ess, mut fallbacks) = (0.0, 0.0, 0);
        for r in &grads {
            for (a, v) in g.iter_mut().zip(r.grad_theta.iter().chain(&r.grad_phi)) {
                *a += v / bs as f64;
            }
            elbo += r.objective / bs as f64;
            ess += r.result.ess.iter().sum::<f64>() / r.result.ess.len().max(1) as f64 / bs as f64;
            fallbacks += r.result.integrator_fallbacks.unwrap_or(0);
        }
        check_finite(step, &g, nt)?;
        if !cfg.metric.learn {
            g[nt..].iter_mut().for_each(|v| *v = 0.0);
        }
        if let Some(c) = cfg.optimizer.clip_norm {
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > c {
                g.iter_mut().for_each(|v| *v *= c / norm);
            }
        }
        adam.learning_rate = cfg.optimizer.learning_rate_at(step);
        let mut params = model.param_values();
        params.extend(flatten(&metric));
        adam.ascend(&mut params, &g);
        model = model.with_params(&params[..nt]);
        metric = unflatten(&metric, &params[nt..]);

        let done = step + 1;
        let heldout_ll_per_step = match &heldout {
            Some(h) if cfg.eval_every > 0 && done % cfg.eval_every == 0 => Some(heldout_ll(cfg, &model, &metric, h)?),
            _ => None,
        };
        let row = MetricsRow {
            step: done,
            train_elbo: elbo,
            heldout_ll_per_step,
            ess_mean: ess,
            integrator_fallbacks: fallbacks,
            wall_clock_s: clock.elapsed().as_secs_f64(),
        };
        log.push(&row)?;
        rows.push(row);
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
            checkpoint(done, &model, &metric, &adam).save(&ckpt_dir.join(format!("step_{done:06}.json")))?;
        }
    }
    let final_ckpt = checkpoint(cfg.optimizer.steps.max(start), &model, &metric, &adam);
    let final_path = cfg.output_dir.join("final.json");
    final_ckpt.save(&final_path)?;
    Ok(TrainSummary {
        checkpoint: final_ckpt,
        final_path,
        metrics_path,
        rows,
    })
}

/// Names the first non-finite entry of a θ ++ φ gradient.
fn check_finite(step: usize, g: &[f64], n_theta: usize) -> Result<(), HarnessError> {
    match g.iter().position(|v| !v.is_finite()) {
        Some(i) if i < n_theta => Err(HarnessError::NonFiniteGradient {
            step,
            block: "model",
            index: i,
        }),
        Some(i) => Err(HarnessError::NonFiniteGradient {
            step,
            block: "metric",
            index: i - n_theta,
        }),
        None => Ok(()),
    }
}

fn checkpoint(step: usize, model: &ModelParams, metric: &MetricField<f64>, adam: &Adam) -> Checkpoint {
    Checkpoint {
        format_version: CHECKPOINT_VERSION,
        step,
        model: model.clone(),
        metric: metric.clone(),
        optimizer: Some(adam.clone()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{Inference, ModelFamily, OptimizerConfig};
    use crate::ssm::{gen_synthetic, NeuralSpec, SyntheticConfig};

    fn setup(dir: &Path, lr: f64, steps: usize) -> ExperimentConfig {
        let data = gen_synthetic(
            3,
            &SyntheticConfig {
                sequences: 4,
                ..small_synthetic()
            },
        );
        let path = dir.join("train.jsonl");
        data.batch.write_jsonl(&path).unwrap();
        ExperimentConfig {
            model: ModelFamily::NnGssm,
            inference: Inference::Hsmc,
            particles: 4,
            steps: 2,
            step_size: 0.05,
            neural: NeuralSpec {
                latent_dim: 2,
                transition_hidden: 4,
                decoder_hidden: 4,
                condition_on_prev_obs: false,
                ..Default::default()
            },
            metric: crate::harness::MetricConfig {
                hidden: 4,
                ..Default::default()
            },
            optimizer: OptimizerConfig {
                learning_rate: lr,
                steps,
                batch_size: 2,
                ..Default::default()
            },
            dataset: path.clone(),
            heldout: Some(path),
            output_dir: dir.join("out"),
            checkpoint_every: 2,
            eval_every: 2,
            eval_reps: 2,
            seed: 5,
            ..Default::default()
        }
    }

    fn small_synthetic() -> SyntheticConfig {
        SyntheticConfig {
            latent_dim: 2,
            obs_dim: 3,
            length: 8,
            ..Default::default()
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = setup(dir.path(), 0.0, 3);
        let s = train(&cfg).unwrap();
        let init = ModelParams::init(&cfg, &load_batch(&cfg.dataset).unwrap()).unwrap();
        assert_eq!(s.checkpoint.model, init);
        assert_eq!(s.rows.len(), 3);
        assert!(s.rows[1].heldout_ll_per_step.is_some() && s.rows[0].heldout_ll_per_step.is_none());
    }

    #[test]
    fn reproducible_apart_from_wall_clock() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ra = train(&setup(a.path(), 0.01, 4)).unwrap();
        let rb = train(&setup(b.path(), 0.01, 4)).unwrap();
        assert_eq!(ra.checkpoint, rb.checkpoint);
        let strip = |rows: &[MetricsRow]| {
            rows.iter()
                .map(|r| (r.step, r.train_elbo.to_bits(), r.heldout_ll_per_step.map(f64::to_bits)))
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&ra.rows), strip(&rb.rows));
        let ca = std::fs::read(a.path().join("out/checkpoints/step_000004.json")).unwrap();
        let cb = std::fs::read(b.path().join("out/checkpoints/step_000004.json")).unwrap();
        assert_eq!(ca, cb);
    }

    #[test]
    fn metrics_log_is_appendable_csv() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = setup(dir.path(), 0.01, 2);
        train(&cfg).unwrap();
        cfg.init_checkpoint = Some(cfg.output_dir.join("final.json"));
        cfg.optimizer.steps = 4;
        train(&cfg).unwrap();
        let mut r = csv::Reader::from_path(cfg.output_dir.join("metrics.csv")).unwrap();
        let rows: Vec<MetricsRow> = r.deserialize().collect::<Result<_, _>>().unwrap();
        assert_eq!(rows.iter().map(|r| r.step).collect::<Vec<_>>(), vec![1, 2, 3, 4]);
    }

    #[test]
    fn non_finite_gradient_names_block() {
        assert!(check_finite(0, &[1.0, 2.0, 3.0], 2).is_ok());
        let e = check_finite(7, &[1.0, 2.0, f64::NAN], 2).unwrap_err();
        assert!(matches!(
            e,
            HarnessError::NonFiniteGradient {
                step: 7,
                block: "metric",
                index: 0
            }
        ));
        let e = check_finite(1, &[f64::INFINITY, 2.0, 0.0], 2).unwrap_err();
        assert!(e.to_string().contains("model parameter 0"));
    }
}
