//! Group-relative advantages and the clipped GRPO surrogate.

use log::warn;
use thiserror::Error;

use crate::autodiff::{AutodiffError, DenseArray, Tape, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GrpoError {
    #[error("advantage normalisation needs at least 2 rewards, got {0}")]
    GroupTooSmall(usize),
    #[error("advantage vectors differ in length: {expected} vs {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("nothing to mix")]
    EmptyMix,
    #[error("loss batch is empty")]
    EmptyBatch,
    #[error("invalid objective config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, GrpoError>;

/// Added to the population std before dividing.
pub const STD_GUARD: f64 = 1e-6;

/// Bound applied to `log p_new - log p_old` before exponentiating.
pub const LOG_RATIO_LIMIT: f64 = 60.0;

/// Rewards of one group under one reward model at one granularity.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardGroup {
    pub rewards: Vec<f64>,
    pub reward_id: String,
    pub granularity: usize,
}

impl RewardGroup {
    pub fn new(rewards: Vec<f64>, reward_id: impl Into<String>, granularity: usize) -> Self {
        Self {
            rewards,
            reward_id: reward_id.into(),
            granularity,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageVector(pub Vec<f64>);

impl AdvantageVector {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest entry (first one on ties).
    pub fn argmax(&self) -> Option<usize> {
        self.0
            .iter()
            .enumerate()
            .fold(None, |best: Option<(usize, f64)>, (i, &v)| match best {
                Some((_, bv)) if bv >= v => best,
                _ => Some((i, v)),
            })
            .map(|(i, _)| i)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveConfig {
    /// Ratio clip width ε.
    pub clip_eps: f64,
    /// KL weight β.
    pub kl_beta: f64,
    pub group_size: usize,
    /// Optional clamp on advantage magnitude; off by default.
    pub advantage_clamp: Option<f64>,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            clip_eps: 5.0,
            kl_beta: 0.0,
            group_size: 12,
            advantage_clamp: None,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip_eps > 0.0) {
            return Err(GrpoError::InvalidConfig(format!("clip_eps must be > 0, got {}", self.clip_eps)));
        }
        if !(self.kl_beta >= 0.0) {
            return Err(GrpoError::InvalidConfig(format!("kl_beta must be >= 0, got {}", self.kl_beta)));
        }
        if self.group_size < 2 {
            return Err(GrpoError::InvalidConfig(format!("group_size must be >= 2, got {}", self.group_size)));
        }
        if let Some(c) = self.advantage_clamp {
            if !(c > 0.0) {
                return Err(GrpoError::InvalidConfig(format!("advantage_clamp must be > 0, got {c}")));
            }
        }
        Ok(())
    }
}

/// `(R - mean) / (std + guard)` with the population std; all zeros when the
/// rewards have no spread.
pub fn normalize_with_guard(rewards: &[f64], guard: f64) -> Result<AdvantageVector> {
    let n = rewards.len();
    if n < 2 {
        return Err(GrpoError::GroupTooSmall(n));
    }
    let mean = rewards.iter().sum::<f64>() / n as f64;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    if std == 0.0 {
        return Ok(AdvantageVector(vec![0.0; n]));
    }
    Ok(AdvantageVector(rewards.iter().map(|r| (r - mean) / (std + guard)).collect()))
}

pub fn normalize_advantages(group: &RewardGroup) -> Result<AdvantageVector> {
    normalize_with_guard(&group.rewards, STD_GUARD)
}

fn sum_vectors(vectors: &[AdvantageVector]) -> Result<AdvantageVector> {
    let first = vectors.first().ok_or(GrpoError::EmptyMix)?;
    let mut out = first.0.clone();
    for v in &vectors[1..] {
        if v.len() != out.len() {
            return Err(GrpoError::LengthMismatch {
                expected: out.len(),
                actual: v.len(),
            });
        }
        out.iter_mut().zip(&v.0).for_each(|(a, b)| *a += b);
    }
    Ok(AdvantageVector(out))
}

/// Elementwise sum of per-granularity advantages; no re-normalisation.
pub fn mix_advantages(per_granularity: &[AdvantageVector]) -> Result<AdvantageVector> {
    sum_vectors(per_granularity)
}

/// Elementwise sum of per-reward-model advantages.
pub fn mix_reward_models(per_reward: &[AdvantageVector]) -> Result<AdvantageVector> {
    sum_vectors(per_reward)
}

fn clamp_log_ratio(delta: f64) -> f64 {
    if delta.abs() > LOG_RATIO_LIMIT {
        warn!("log-ratio {delta} clamped to ±{LOG_RATIO_LIMIT}");
    }
    delta.clamp(-LOG_RATIO_LIMIT, LOG_RATIO_LIMIT)
}

/// `exp(logp_new - logp_old)` with the exponent clamped to ±60.
pub fn importance_ratio(logp_new: f64, logp_old: f64) -> f64 {
    clamp_log_ratio(logp_new - logp_old).exp()
}

/// `min(r A, clip(r, 1-ε, 1+ε) A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, cfg: &ObjectiveConfig) -> f64 {
    let clipped = ratio.clamp(1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
    (ratio * advantage).min(clipped * advantage)
}

/// Per-sample estimator `exp(Δ) - Δ - 1` with `Δ = logp_old - logp_new`.
pub fn kl_penalty(logp_new: f64, logp_old: f64) -> f64 {
    let delta = logp_old - logp_new;
    delta.exp() - delta - 1.0
}

/// Diagnostics gathered while assembling the loss.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossStats {
    pub loss: f64,
    pub mean_abs_ratio_dev: f64,
    pub clip_fraction: f64,
    pub samples: usize,
}

/// Records `-mean(min(rA, clip(r)A) - β KL)` on `tape`. `logp_new` is a
/// rank-1 var of per-sample log-probabilities; the loss is differentiable
/// through it.
pub fn grpo_loss(
    tape: &mut Tape,
    logp_new: Var,
    logp_old: &[f64],
    advantages: &[f64],
    cfg: &ObjectiveConfig,
) -> Result<(Var, LossStats)> {
    let n = logp_old.len();
    if n == 0 {
        return Err(GrpoError::EmptyBatch);
    }
    if advantages.len() != n || tape.value(logp_new).len() != n {
        return Err(GrpoError::LengthMismatch {
            expected: n,
            actual: advantages.len().min(tape.value(logp_new).len()),
        });
    }
    let advantages: Vec<f64> = match cfg.advantage_clamp {
        Some(c) => advantages.iter().map(|a| a.clamp(-c, c)).collect(),
        None => advantages.to_vec(),
    };
    let old = tape.input(DenseArray::vector(logp_old.to_vec()));
    let delta = tape.sub(logp_new, old)?;
    if tape.value(delta).values().iter().any(|d| d.abs() > LOG_RATIO_LIMIT) {
        warn!("log-ratio outside ±{LOG_RATIO_LIMIT}; clamping");
    }
    let delta_c = tape.clamp(delta, -LOG_RATIO_LIMIT, LOG_RATIO_LIMIT);
    let ratio = tape.exp(delta_c);

    // For each sample the min picks one branch: the unclipped one keeps a
    // gradient through r, the clipped one is a constant.
    let ratios = tape.value(ratio).values().to_vec();
    let mut weights = Vec::with_capacity(n);
    let mut offsets = Vec::with_capacity(n);
    let mut clipped_count = 0usize;
    let mut dev = 0.0;
    for (&r, &a) in ratios.iter().zip(&advantages) {
        dev += (r - 1.0).abs();
        let clipped = r.clamp(1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps);
        if r * a <= clipped * a {
            weights.push(a);
            offsets.push(0.0);
        } else {
            clipped_count += 1;
            weights.push(0.0);
            offsets.push(clipped * a);
        }
    }
    let w = tape.input(DenseArray::vector(weights));
    let c = tape.input(DenseArray::vector(offsets));
    let weighted = tape.mul(ratio, w)?;
    let mut objective = tape.add(weighted, c)?;
    if cfg.kl_beta > 0.0 {
        // exp(-δ) + δ - 1 with δ = logp_new - logp_old
        let neg = tape.affine(delta_c, -1.0, 0.0);
        let e = tape.exp(neg);
        let lin = tape.affine(delta_c, 1.0, -1.0);
        let kl = tape.add(e, lin)?;
        let scaled = tape.affine(kl, -cfg.kl_beta, 0.0);
        objective = tape.add(objective, scaled)?;
    }
    let mean = tape.mean(objective);
    let loss = tape.affine(mean, -1.0, 0.0);
    let stats = LossStats {
        loss: tape.value(loss).item(),
        mean_abs_ratio_dev: dev / n as f64,
        clip_fraction: clipped_count as f64 / n as f64,
        samples: n,
    };
    Ok((loss, stats))
}

/// Plain evaluation of the same objective, for checks.
pub fn grpo_loss_value(logp_new: &[f64], logp_old: &[f64], advantages: &[f64], cfg: &ObjectiveConfig) -> f64 {
    let n = logp_new.len() as f64;
    let total: f64 = logp_new
        .iter()
        .zip(logp_old)
        .zip(advantages)
        .map(|((&new, &old), &a)| {
            let a = cfg.advantage_clamp.map_or(a, |c| a.clamp(-c, c));
            clipped_surrogate(importance_ratio(new, old), a, cfg) - cfg.kl_beta * kl_penalty(new, old)
        })
        .sum();
    -total / n
}
