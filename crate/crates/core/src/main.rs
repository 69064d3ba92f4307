//! `hsmc` command-line interface.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use hsmc_core::dist::ResampleScheme;
use hsmc_core::hamilton::IntegratorVariant;
use hsmc_core::harness::{
    check_gradient, evaluate, ingest_bike_csv, train, BikeLayout, BikeRules, Checkpoint, EvalGrid, ExperimentConfig, GradCheckConfig,
    HarnessError, ModelFamily,
};
use hsmc_core::hsmc::HsmcConfig;
use hsmc_core::numcore::rng::{Purpose, RngStream};
use hsmc_core::ssm::{gen_sinusoid, gen_synthetic, LgssmSpec, Sequence, SinusoidConfig, SsmModel, SyntheticConfig, TrajectoryBatch};

// the filters allocate many short vectors, which the system allocator handles slowly
#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "hsmc", version, about = "Hamiltonian sequential Monte Carlo for state-space models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DataKind {
    /// Neural-network Gaussian SSM with random weights.
    Synthetic,
    /// Random stable linear-Gaussian system.
    Lgssm,
    /// One-dimensional sinusoid transition with tanh emission.
    Sinusoid,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Smc,
    Hsmc,
}

#[derive(Clone, Copy, ValueEnum)]
enum Family {
    Lgssm,
    NnGssm,
    Gpssm,
}

#[derive(Clone, Copy, ValueEnum)]
enum Layout {
    Multivariate,
    PerStation,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset as JSONL.
    Generate {
        #[arg(long, value_enum, default_value = "synthetic")]
        kind: DataKind,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        sequences: usize,
        #[arg(long, default_value_t = 50)]
        length: usize,
        #[arg(long, default_value_t = 2)]
        latent_dim: usize,
        #[arg(long, default_value_t = 3)]
        obs_dim: usize,
    },
    /// Train from a JSON experiment configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Per-step ELBO table over a (K, S) grid.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "K", value_delimiter = ',', default_values_t = [5, 10])]
        particles: Vec<usize>,
        #[arg(long = "S", value_delimiter = ',', default_values_t = [5, 10])]
        steps: Vec<usize>,
        #[arg(long, default_value_t = 0.05)]
        step_size: f64,
        #[arg(long, default_value_t = 20)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the table here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one filter over every sequence and print log Ẑ.
    Filter {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "hsmc")]
        method: Method,
        #[arg(long = "K", default_value_t = 10)]
        particles: usize,
        #[arg(long = "S", default_value_t = 5)]
        steps: usize,
        #[arg(long, default_value_t = 0.05)]
        step_size: f64,
        #[arg(long, default_value_t = false)]
        systematic: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare reverse-mode gradients with finite differences.
    CheckGrad {
        #[arg(long, value_enum, default_value = "nn-gssm")]
        model: Family,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "S", default_value_t = 3)]
        steps: usize,
        #[arg(long = "K", default_value_t = 3)]
        particles: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Aggregate bike-share trips into hourly station demand.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 730.0)]
        min_span_days: f64,
        #[arg(long, default_value_t = 1.0)]
        min_mean_per_hour: f64,
        #[arg(long, value_enum, default_value = "multivariate")]
        layout: Layout,
        #[arg(long, default_value_t = false)]
        log_counts: bool,
    },
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    error: &'a str,
    message: String,
}

fn print_json<T: Serialize>(v: &T) -> Result<(), HarnessError> {
    let text = serde_json::to_string_pretty(v).map_err(|e| HarnessError::json(Path::new("<stdout>"), e))?;
    println!("{text}");
    Ok(())
}

fn write_out(path: &Path, batch: &TrajectoryBatch) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    Ok(batch.write_jsonl(path)?)
}

fn generate(kind: DataKind, seed: u64, out: &Path, sequences: usize, length: usize, dx: usize, dy: usize) -> Result<(), HarnessError> {
    let batch = match kind {
        DataKind::Synthetic => {
            let cfg = SyntheticConfig {
                latent_dim: dx,
                obs_dim: dy,
                length,
                sequences,
                ..Default::default()
            };
            gen_synthetic(seed, &cfg).batch
        }
        DataKind::Lgssm => {
            let mut rng = RngStream::keyed(seed, 0, 0, Purpose::Parameters);
            let spec = LgssmSpec::random(dx, dy, 0.3, 0.5, &mut rng);
            let model = SsmModel::from_lgssm(&spec)?;
            let sequences = (0..sequences)
                .map(|n| Sequence {
                    id: format!("lg{n:04}"),
                    y: model
                        .simulate(hsmc_core::numcore::rng::derive_seed(seed, &[n as u64]), length, &[])
                        .1,
                    u: vec![],
                })
                .collect();
            TrajectoryBatch { sequences }
        }
        DataKind::Sinusoid => {
            let cfg = SinusoidConfig {
                length,
                sequences,
                obs_dim: dy,
                ..Default::default()
            };
            gen_sinusoid(seed, &cfg).batch
        }
    };
    write_out(out, &batch)?;
    print_json(&serde_json::json!({ "out": out, "sequences": batch.sequences.len() }))
}

fn run(cli: Cli) -> Result<ExitCode, HarnessError> {
    match cli.command {
        Command::Generate {
            kind,
            seed,
            out,
            sequences,
            length,
            latent_dim,
            obs_dim,
        } => generate(kind, seed, &out, sequences, length, latent_dim, obs_dim)?,
        Command::Train { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let s = train(&cfg)?;
            let last = s.rows.last();
            print_json(&serde_json::json!({
                "final_checkpoint": s.final_path,
                "metrics": s.metrics_path,
                "steps": s.checkpoint.step,
                "train_elbo": last.map(|r| r.train_elbo),
            }))?;
        }
        Command::Eval {
            checkpoint,
            data,
            particles,
            steps,
            step_size,
            reps,
            seed,
            out,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let batch = TrajectoryBatch::read_jsonl(&data)?;
            let grid = EvalGrid {
                particles,
                steps,
                step_size,
                reps,
                seed,
                ..Default::default()
            };
            let table = evaluate(&ckpt, &batch, &grid)?;
            if let Some(p) = out {
                hsmc_core::harness::write_table(&p, &table)?;
            }
            print_json(&table)?;
        }
        Command::Filter {
            checkpoint,
            data,
            method,
            particles,
            steps,
            step_size,
            systematic,
            seed,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let batch = TrajectoryBatch::read_jsonl(&data)?;
            ckpt.model.check_data(&batch)?;
            let mut cfg = HsmcConfig::new(particles, if matches!(method, Method::Smc) { 0 } else { steps }, step_size);
            cfg.integrator.variant = IntegratorVariant::GeneralizedImplicit;
            if systematic {
                cfg.resample = ResampleScheme::Systematic;
            }
            let runs = ckpt.model.filter_batch(&ckpt.metric, &batch.sequences, &cfg, seed)?;
            let penalty = ckpt.model.penalty()?;
            let total: f64 = runs.iter().map(|r| r.log_z).sum();
            print_json(&serde_json::json!({
                "logZ": total,
                "penalty_per_sequence": penalty,
                "sequences": runs,
            }))?;
        }
        Command::CheckGrad {
            model,
            seed,
            steps,
            particles,
            tolerance,
        } => {
            let family = match model {
                Family::Lgssm => ModelFamily::Lgssm,
                Family::NnGssm => ModelFamily::NnGssm,
                Family::Gpssm => ModelFamily::Gpssm,
            };
            let cfg = GradCheckConfig {
                steps,
                particles,
                ..Default::default()
            };
            let r = check_gradient(family, seed, &cfg)?;
            print_json(&r)?;
            if !(r.max_relative_error < tolerance) {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Ingest {
            input,
            out,
            min_span_days,
            min_mean_per_hour,
            layout,
            log_counts,
        } => {
            let rules = BikeRules {
                min_span_days,
                min_mean_per_hour,
                layout: match layout {
                    Layout::Multivariate => BikeLayout::Multivariate,
                    Layout::PerStation => BikeLayout::PerStation,
                },
                log_counts,
            };
            let (batch, report) = ingest_bike_csv(&input, &rules)?;
            write_out(&out, &batch)?;
            print_json(&report)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            let report = ErrorReport {
                error: e.kind(),
                message: e.to_string(),
            };
            eprintln!("{}", serde_json::to_string(&report).unwrap_or_else(|_| e.to_string()));
            ExitCode::from(1)
        }
    }
}
