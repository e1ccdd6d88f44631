//! Experiment orchestration: configuration, pretraining, fine-tuning,
//! checkpoints, metrics and evaluation.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod metrics;
pub mod plot;
pub mod selftest;

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::engine::{training_loop, EngineError, TrainingHistory};
use crate::flow_model::{pretrain_flow_matching, ModelError, VelocityFieldModel};
use crate::rewards::{RewardError, RewardSuite};
use crate::rng::{derive_seed, tag};

pub use checkpoint::CheckpointError;
pub use config::{ConfigError, ExperimentConfig};

/// Environment variable capping the rollout worker count.
pub const THREADS_ENV: &str = "G2RPO_THREADS";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error("{path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, HarnessError>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Worker count from the environment, if set to a positive integer.
pub fn threads_from_env() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse().ok().filter(|&n| n > 0)
}

pub fn reward_suite(cfg: &ExperimentConfig) -> Result<RewardSuite> {
    Ok(RewardSuite::build(&cfg.rewards, &cfg.geometry())?)
}

/// Fresh model for `cfg`, initialised from the experiment seed.
pub fn initial_model(cfg: &ExperimentConfig) -> VelocityFieldModel {
    VelocityFieldModel::new(cfg.model_config(), derive_seed(cfg.seed, &[tag::MODEL_INIT]))
}

/// Flow-matching pretraining on the ring fixture; returns the model and
/// its per-step loss.
pub fn pretrain(cfg: &ExperimentConfig) -> Result<(VelocityFieldModel, Vec<f64>)> {
    let mut model = initial_model(cfg);
    let losses = pretrain_flow_matching(&mut model, &cfg.dataset(), &cfg.pretrain_config())?;
    Ok((model, losses))
}

/// Online fine-tuning of `model` in the configured sampler mode.
pub fn finetune(cfg: &ExperimentConfig, model: &mut VelocityFieldModel, threads: Option<usize>) -> Result<TrainingHistory> {
    let suite = reward_suite(cfg)?;
    let train_cfg = cfg.train_config(threads)?;
    let (train, heldout) = cfg.condition_split();
    Ok(training_loop(model, &train_cfg, suite.training(), &train, &heldout)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutputs {
    pub pretrained: PathBuf,
    pub finetuned: PathBuf,
    /// Absent when the run has no iterations.
    pub metrics: Option<PathBuf>,
}

/// Pretrain, checkpoint, fine-tune, checkpoint and export metrics into
/// `out_dir`.
pub fn run_pipeline(cfg: &ExperimentConfig, out_dir: &Path, threads: Option<usize>) -> Result<PipelineOutputs> {
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let (mut model, _) = pretrain(cfg)?;
    let pretrained = out_dir.join("pretrained.ckpt");
    checkpoint::write(&model, cfg, &pretrained)?;
    let history = finetune(cfg, &mut model, threads)?;
    let finetuned = out_dir.join("finetuned.ckpt");
    checkpoint::write(&model, cfg, &finetuned)?;
    let metrics = if history.rows.is_empty() {
        None
    } else {
        let path = out_dir.join("metrics.csv");
        metrics::write_history(&history.rows, &path).map_err(io_err(&path))?;
        Some(path)
    };
    Ok(PipelineOutputs {
        pretrained,
        finetuned,
        metrics,
    })
}
