use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_json, HarnessError};
use crate::dist::ResampleScheme;
use crate::gpssm::GpSpec;
use crate::hamilton::{IntegratorConfig, IntegratorVariant};
use crate::hsmc::HsmcConfig;
use crate::metric::{DEFAULT_HIDDEN, DEFAULT_JITTER};
use crate::ssm::NeuralSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelFamily {
    /// Linear transition and decoder, Gaussian noise.
    Lgssm,
    NnGssm,
    Gpssm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Inference {
    Smc,
    Hsmc,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// The learning rate follows a cosine from `learning_rate` down to
    /// `final_lr_fraction · learning_rate` at the last step. 1 keeps it
    /// constant.
    pub final_lr_fraction: f64,
    /// Rescales the averaged gradient to at most this Euclidean norm.
    pub clip_norm: Option<f64>,
}

impl OptimizerConfig {
    /// Learning rate for the update made at `step` (counted from 0).
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        if self.final_lr_fraction == 1.0 || self.steps <= 1 {
            return self.learning_rate;
        }
        let progress = (step as f64 / (self.steps - 1) as f64).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.learning_rate * (self.final_lr_fraction + (1.0 - self.final_lr_fraction) * cos)
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            steps: 1000,
            batch_size: 1,
            final_lr_fraction: 1.0,
            clip_norm: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    pub hidden: usize,
    pub rank: usize,
    pub init_scale: f64,
    pub jitter: f64,
    /// Train φ along with θ.
    pub learn: bool,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            hidden: DEFAULT_HIDDEN,
            rank: 1,
            init_scale: 0.1,
            jitter: DEFAULT_JITTER,
            learn: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelFamily,
    pub inference: Inference,
    pub particles: usize,
    pub steps: usize,
    pub step_size: f64,
    pub variant: IntegratorVariant,
    pub resample: ResampleScheme,
    pub optimizer: OptimizerConfig,
    pub metric: MetricConfig,
    /// Architecture for `lgssm` and `nn-gssm` (hidden sizes are ignored for `lgssm`).
    pub neural: NeuralSpec,
    pub gp: GpSpec,
    pub seed: u64,
    pub dataset: PathBuf,
    pub heldout: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub init_checkpoint: Option<PathBuf>,
    pub checkpoint_every: usize,
    /// Held-out evaluation period in steps; 0 disables it.
    pub eval_every: usize,
    pub eval_reps: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelFamily::NnGssm,
            inference: Inference::Hsmc,
            particles: 10,
            steps: 5,
            step_size: 0.05,
            variant: IntegratorVariant::GeneralizedImplicit,
            resample: ResampleScheme::Multinomial,
            optimizer: OptimizerConfig::default(),
            metric: MetricConfig::default(),
            neural: NeuralSpec::default(),
            gp: GpSpec::default(),
            seed: 0,
            dataset: PathBuf::new(),
            heldout: None,
            output_dir: PathBuf::from("out"),
            init_checkpoint: None,
            checkpoint_every: 100,
            eval_every: 0,
            eval_reps: 4,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let cfg: ExperimentConfig = read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// S actually run: always 0 for plain SMC.
    pub fn effective_steps(&self) -> usize {
        match self.inference {
            Inference::Smc => 0,
            Inference::Hsmc => self.steps,
        }
    }

    pub fn hsmc_config(&self) -> HsmcConfig {
        HsmcConfig {
            particles: self.particles,
            integrator: IntegratorConfig {
                step_size: self.step_size,
                steps: self.effective_steps(),
                variant: self.variant,
                fixed_iterations: true,
                ..Default::default()
            },
            resample: self.resample,
            record_predictions: false,
            enforce_trajectory_bound: true,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.particles == 0 {
            return bad("particles must be at least 1".into());
        }
        if self.effective_steps() > 0 && self.steps as f64 * self.step_size >= 1.0 {
            return bad(format!(
                "steps × step_size = {} must be below 1",
                self.steps as f64 * self.step_size
            ));
        }
        if !(self.step_size > 0.0) {
            return bad("step_size must be positive".into());
        }
        let o = &self.optimizer;
        if !(o.learning_rate >= 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.epsilon > 0.0) {
            return bad("optimizer settings out of range".into());
        }
        if !(0.0..=1.0).contains(&o.final_lr_fraction) || o.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return bad("final_lr_fraction must lie in [0, 1] and clip_norm be positive".into());
        }
        if o.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.metric.rank == 0 || !(self.metric.jitter > 0.0) {
            return bad("metric rank must be at least 1 and jitter positive".into());
        }
        if self.eval_every > 0 && self.eval_reps == 0 {
            return bad("eval_reps must be at least 1".into());
        }
        for (what, p) in [
            ("dataset", Some(&self.dataset)),
            ("heldout", self.heldout.as_ref()),
            ("init_checkpoint", self.init_checkpoint.as_ref()),
        ] {
            if let Some(p) = p {
                if !p.exists() {
                    return bad(format!("{what} path {} does not exist", p.display()));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_dataset() -> (tempfile::TempDir, ExperimentConfig) {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("d.jsonl");
        std::fs::write(&data, "").unwrap();
        let cfg = ExperimentConfig {
            dataset: data,
            ..Default::default()
        };
        (dir, cfg)
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let o = OptimizerConfig {
            learning_rate: 0.1,
            steps: 101,
            final_lr_fraction: 0.2,
            ..Default::default()
        };
        assert!((o.learning_rate_at(0) - 0.1).abs() < 1e-15);
        assert!((o.learning_rate_at(50) - 0.06).abs() < 1e-12);
        assert!((o.learning_rate_at(100) - 0.02).abs() < 1e-12);
        assert_eq!(OptimizerConfig::default().learning_rate_at(500), 1e-3);
    }

    #[test]
    fn defaults_are_valid() {
        let (_d, cfg) = with_dataset();
        cfg.validate().unwrap();
        assert_eq!(cfg.optimizer.learning_rate, 1e-3);
    }

    #[test]
    fn trajectory_bound_only_for_hsmc() {
        let (_d, mut cfg) = with_dataset();
        cfg.steps = 20;
        cfg.step_size = 0.05;
        assert!(cfg.validate().is_err());
        cfg.inference = Inference::Smc;
        cfg.validate().unwrap();
        assert_eq!(cfg.hsmc_config().integrator.steps, 0);
    }

    #[test]
    fn missing_paths_rejected() {
        let (_d, mut cfg) = with_dataset();
        cfg.heldout = Some(PathBuf::from("/nonexistent/file.jsonl"));
        assert!(matches!(cfg.validate(), Err(HarnessError::Config(_))));
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = serde_json::from_str::<ExperimentConfig>(r#"{"particles": 5, "partcles": 3}"#);
        assert!(err.is_err());
        let ok: ExperimentConfig = serde_json::from_str(r#"{"model": "gpssm", "inference": "smc", "variant": "constant-metric"}"#).unwrap();
        assert_eq!(ok.model, ModelFamily::Gpssm);
        assert_eq!(ok.variant, IntegratorVariant::ConstantMetric);
    }

    #[test]
    fn json_roundtrip() {
        let (_d, cfg) = with_dataset();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentConfig>(&text).unwrap(), cfg);
    }
}
