//! Analytic reward models over the synthetic mode geometry.
//!
//! Training rewards implement [`RewardModel`]. Evaluation-only scores live
//! in [`EvalOnlyScores`], which deliberately does not implement that trait,
//! so they cannot be handed to the rollout or loss code.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use thiserror::Error;

use crate::autodiff::DenseArray;
use crate::grpo::RewardGroup;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewardError {
    #[error("unknown reward model `{0}`")]
    Unknown(String),
    #[error("duplicate reward identifier `{0}`")]
    Duplicate(String),
    #[error("condition {condition} out of range for reward `{id}`")]
    ConditionOutOfRange { id: String, condition: usize },
    #[error("reward `{id}` produced a non-finite score for condition {condition}")]
    NonFinite { id: String, condition: usize },
    #[error("cannot score an empty group")]
    EmptyGroup,
}

pub type Result<T> = std::result::Result<T, RewardError>;

pub const MODE_AFFINITY: &str = "mode_affinity";
pub const ALIGNMENT: &str = "alignment";
pub const LOG_DENSITY: &str = "log_density";
pub const SHARP_AFFINITY: &str = "sharp_affinity";

pub trait RewardModel: Send + Sync {
    fn id(&self) -> &str;
    fn score(&self, x: &[f64], condition: usize) -> Result<f64>;
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// `magnitude` times the unit vector from `center` toward the origin.
pub fn offset_toward_origin(center: &[f64], magnitude: f64) -> Vec<f64> {
    let n = norm(center);
    if n == 0.0 {
        return vec![0.0; center.len()];
    }
    center.iter().map(|c| -magnitude * c / n).collect()
}

fn checked(id: &str, condition: usize, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(RewardError::NonFinite {
            id: id.to_string(),
            condition,
        })
    }
}

/// `-‖x - τ_c‖²` with `τ_c = μ_c + δ_c`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeAffinity {
    targets: Vec<Vec<f64>>,
}

impl ModeAffinity {
    pub fn new(centers: &[Vec<f64>], offset: f64) -> Self {
        let targets = centers
            .iter()
            .map(|c| {
                let d = offset_toward_origin(c, offset);
                c.iter().zip(d).map(|(a, b)| a + b).collect()
            })
            .collect();
        Self { targets }
    }

    pub fn target(&self, condition: usize) -> &[f64] {
        &self.targets[condition]
    }
}

impl RewardModel for ModeAffinity {
    fn id(&self) -> &str {
        MODE_AFFINITY
    }

    fn score(&self, x: &[f64], condition: usize) -> Result<f64> {
        let target = self.targets.get(condition).ok_or_else(|| RewardError::ConditionOutOfRange {
            id: MODE_AFFINITY.into(),
            condition,
        })?;
        checked(MODE_AFFINITY, condition, -squared_distance(x, target))
    }
}

/// Cosine between `x` and the condition's mode direction; 0 at the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    directions: Vec<Vec<f64>>,
}

impl Alignment {
    pub fn new(centers: &[Vec<f64>]) -> Self {
        let directions = centers
            .iter()
            .map(|c| {
                let n = norm(c);
                c.iter().map(|v| if n > 0.0 { v / n } else { 0.0 }).collect()
            })
            .collect();
        Self { directions }
    }
}

impl RewardModel for Alignment {
    fn id(&self) -> &str {
        ALIGNMENT
    }

    fn score(&self, x: &[f64], condition: usize) -> Result<f64> {
        let dir = self.directions.get(condition).ok_or_else(|| RewardError::ConditionOutOfRange {
            id: ALIGNMENT.into(),
            condition,
        })?;
        let n = norm(x);
        if n == 0.0 {
            return Ok(0.0);
        }
        let dot: f64 = x.iter().zip(dir).map(|(a, b)| a * b).sum();
        checked(ALIGNMENT, condition, dot / n)
    }
}

/// Held-out metrics that never feed a training gradient.
#[derive(Debug)]
pub struct EvalOnlyScores {
    centers: Vec<Vec<f64>>,
    scale: f64,
    sharp_targets: Vec<Vec<f64>>,
    sharpness: f64,
    calls: AtomicUsize,
}

impl EvalOnlyScores {
    pub fn new(centers: &[Vec<f64>], scale: f64, sharp_offset: f64, sharpness: f64) -> Self {
        let sharp_targets = centers
            .iter()
            .map(|c| {
                let d = offset_toward_origin(c, sharp_offset);
                c.iter().zip(d).map(|(a, b)| a + b).collect()
            })
            .collect();
        Self {
            centers: centers.to_vec(),
            scale,
            sharp_targets,
            sharpness,
            calls: AtomicUsize::new(0),
        }
    }

    /// Same construction with every center and target moved by `shift`.
    pub fn translated(&self, shift: &[f64]) -> Self {
        let mv = |vs: &[Vec<f64>]| -> Vec<Vec<f64>> {
            vs.iter().map(|v| v.iter().zip(shift).map(|(a, b)| a + b).collect()).collect()
        };
        Self {
            centers: mv(&self.centers),
            scale: self.scale,
            sharp_targets: mv(&self.sharp_targets),
            sharpness: self.sharpness,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn ids() -> [&'static str; 2] {
        [LOG_DENSITY, SHARP_AFFINITY]
    }

    /// Number of evaluations so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn scores(&self, x: &[f64], condition: usize) -> Result<BTreeMap<String, f64>> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let center = self.centers.get(condition).ok_or_else(|| RewardError::ConditionOutOfRange {
            id: LOG_DENSITY.into(),
            condition,
        })?;
        let d = x.len() as f64;
        let s2 = self.scale * self.scale;
        let log_density = -squared_distance(x, center) / (2.0 * s2) - 0.5 * d * (2.0 * PI * s2).ln();
        let sharp = -self.sharpness * squared_distance(x, &self.sharp_targets[condition]);
        let mut out = BTreeMap::new();
        out.insert(LOG_DENSITY.to_string(), checked(LOG_DENSITY, condition, log_density)?);
        out.insert(SHARP_AFFINITY.to_string(), checked(SHARP_AFFINITY, condition, sharp)?);
        Ok(out)
    }
}

/// Scores every row of `xs` in order.
pub fn score_group(model: &dyn RewardModel, xs: &DenseArray, conditions: &[usize], granularity: usize) -> Result<RewardGroup> {
    if xs.rows() == 0 || conditions.is_empty() {
        return Err(RewardError::EmptyGroup);
    }
    let rewards = (0..xs.rows())
        .map(|r| model.score(xs.row(r), conditions[r]))
        .collect::<Result<Vec<_>>>()?;
    Ok(RewardGroup::new(rewards, model.id(), granularity))
}

/// Training rewards plus the disjoint evaluation-only scores.
pub struct RewardSuite {
    training: Vec<Arc<dyn RewardModel>>,
    eval_only: EvalOnlyScores,
}

impl std::fmt::Debug for RewardSuite {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RewardSuite")
            .field("training", &self.training_ids())
            .field("eval_only", &EvalOnlyScores::ids())
            .finish()
    }
}

/// Geometry shared by all reward constructions.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardGeometry {
    pub centers: Vec<Vec<f64>>,
    pub scale: f64,
    pub preference_offset: f64,
}

impl RewardSuite {
    pub fn build(ids: &[String], geometry: &RewardGeometry) -> Result<Self> {
        let mut training: Vec<Arc<dyn RewardModel>> = Vec::new();
        for id in ids {
            if training.iter().any(|m| m.id() == id) {
                return Err(RewardError::Duplicate(id.clone()));
            }
            training.push(reward_by_id(id, geometry)?);
        }
        Ok(Self {
            training,
            eval_only: EvalOnlyScores::new(&geometry.centers, geometry.scale, 0.5 * geometry.preference_offset, 4.0),
        })
    }

    pub fn training(&self) -> &[Arc<dyn RewardModel>] {
        &self.training
    }

    pub fn training_ids(&self) -> Vec<String> {
        self.training.iter().map(|m| m.id().to_string()).collect()
    }

    pub fn eval_only(&self) -> &EvalOnlyScores {
        &self.eval_only
    }
}

pub fn reward_by_id(id: &str, geometry: &RewardGeometry) -> Result<Arc<dyn RewardModel>> {
    match id {
        MODE_AFFINITY => Ok(Arc::new(ModeAffinity::new(&geometry.centers, geometry.preference_offset))),
        ALIGNMENT => Ok(Arc::new(Alignment::new(&geometry.centers))),
        other => Err(RewardError::Unknown(other.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ring() -> Vec<Vec<f64>> {
        crate::flow_model::SyntheticDataset::ring(8, 4.0, 0.15).centers().to_vec()
    }

    #[test]
    fn mode_affinity_values() {
        let m = ModeAffinity::new(&ring(), 0.5);
        let tau = m.target(0).to_vec();
        assert!((tau[0] - 3.5).abs() < 1e-12 && tau[1].abs() < 1e-12);
        assert_eq!(m.score(&tau, 0).unwrap(), 0.0);
        let off = [tau[0] + 1.0, tau[1]];
        assert!((m.score(&off, 0).unwrap() + 1.0).abs() < 1e-12);
        // rotate the residual by 60 degrees
        let (c, s) = ((PI / 3.0).cos(), (PI / 3.0).sin());
        let rotated = [tau[0] + 0.3 * c - 0.4 * s, tau[1] + 0.3 * s + 0.4 * c];
        let plain = [tau[0] + 0.3, tau[1] + 0.4];
        assert!((m.score(&rotated, 0).unwrap() - m.score(&plain, 0).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn alignment_values() {
        let centers = ring();
        let a = Alignment::new(&centers);
        let mu = &centers[2];
        assert!((a.score(mu, 2).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = mu.iter().map(|v| -v).collect();
        assert!((a.score(&neg, 2).unwrap() + 1.0).abs() < 1e-12);
        let perp = [-mu[1], mu[0]];
        assert!(a.score(&perp, 2).unwrap().abs() < 1e-12);
        assert_eq!(a.score(&[0.0, 0.0], 2).unwrap(), 0.0);
    }

    #[test]
    fn eval_only_scores_properties() {
        let centers = ring();
        let e = EvalOnlyScores::new(&centers, 0.15, 0.25, 4.0);
        let s = e.scores(&centers[3], 3).unwrap();
        let expected = -(2.0 * PI * 0.15f64.powi(2)).ln();
        assert!((s[LOG_DENSITY] - expected).abs() < 1e-12);
        assert_eq!(s, e.scores(&centers[3], 3).unwrap());
        let shift = [1.5, -2.25];
        let moved = e.translated(&shift);
        let x = [2.0, 1.0];
        let xs = [x[0] + shift[0], x[1] + shift[1]];
        let (a, b) = (e.scores(&x, 1).unwrap(), moved.scores(&xs, 1).unwrap());
        for k in EvalOnlyScores::ids() {
            assert!((a[k] - b[k]).abs() < 1e-12);
        }
        assert_eq!(e.calls(), 3);
    }

    #[test]
    fn score_group_order_and_edge_cases() {
        let m = ModeAffinity::new(&ring(), 0.5);
        let xs = DenseArray::from_rows(&[vec![1.0, 0.0], vec![0.0, 3.0], vec![-2.0, 1.0]]).unwrap();
        let g = score_group(&m, &xs, &[0, 2, 4], 1).unwrap();
        let swapped = DenseArray::from_rows(&[vec![-2.0, 1.0], vec![1.0, 0.0], vec![0.0, 3.0]]).unwrap();
        let h = score_group(&m, &swapped, &[4, 0, 2], 1).unwrap();
        assert_eq!(g.rewards, vec![h.rewards[1], h.rewards[2], h.rewards[0]]);
        let single = DenseArray::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert_eq!(score_group(&m, &single, &[0], 1).unwrap().rewards.len(), 1);
        let same = DenseArray::repeat_rows(&[0.5, 0.5], 4);
        let r = score_group(&m, &same, &[1; 4], 2).unwrap();
        assert!(r.rewards.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(score_group(&m, &DenseArray::zeros(&[0, 2]), &[], 1), Err(RewardError::EmptyGroup));
    }

    #[test]
    fn non_finite_input_is_a_failure() {
        let m = ModeAffinity::new(&ring(), 0.5);
        assert!(matches!(m.score(&[f64::NAN, 0.0], 0), Err(RewardError::NonFinite { .. })));
    }

    #[test]
    fn suite_rejects_unknown_and_duplicate_ids() {
        let geo = RewardGeometry {
            centers: ring(),
            scale: 0.15,
            preference_offset: 0.5,
        };
        let ok = RewardSuite::build(&[MODE_AFFINITY.into(), ALIGNMENT.into()], &geo).unwrap();
        assert_eq!(ok.training_ids(), vec![MODE_AFFINITY, ALIGNMENT]);
        assert_eq!(
            RewardSuite::build(&["hps".into()], &geo).unwrap_err(),
            RewardError::Unknown("hps".into())
        );
        assert!(RewardSuite::build(&[MODE_AFFINITY.into(), MODE_AFFINITY.into()], &geo).is_err());
        assert!(RewardSuite::build(&[LOG_DENSITY.into()], &geo).is_err());
    }
}
