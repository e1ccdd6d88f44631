//! Held-out evaluation across inference step counts.

use std::collections::BTreeMap;
use std::path::Path;

use crate::engine::{evaluate_policy, EngineError};
use crate::flow_model::VelocityFieldModel;
use crate::harness::config::ExperimentConfig;
use crate::harness::metrics::format_g6;
use crate::rewards::RewardSuite;

/// Mean score per reward id for each evaluated step count.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalTable {
    pub rows: Vec<(usize, BTreeMap<String, f64>)>,
}

impl EvalTable {
    pub fn score(&self, steps: usize, id: &str) -> Option<f64> {
        self.rows.iter().find(|(s, _)| *s == steps).and_then(|(_, m)| m.get(id).copied())
    }

    pub fn to_csv(&self) -> String {
        let ids: Vec<&String> = self.rows.first().map(|(_, m)| m.keys().collect()).unwrap_or_default();
        let mut out = String::from("steps");
        for id in &ids {
            out.push(',');
            out.push_str(id);
        }
        out.push('\n');
        for (steps, m) in &self.rows {
            out.push_str(&steps.to_string());
            for id in &ids {
                out.push(',');
                out.push_str(&format_g6(m[*id]));
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_csv())
    }
}

/// ODE-samples `cfg.eval_draws` held-out points per step count and reports
/// every training and evaluation-only score.
pub fn eval_varying_steps(
    model: &VelocityFieldModel,
    cfg: &ExperimentConfig,
    suite: &RewardSuite,
    step_counts: &[usize],
) -> Result<EvalTable, EngineError> {
    if let Some(&bad) = step_counts.iter().find(|&&s| s < 2) {
        return Err(EngineError::Invalid(format!("evaluation step count {bad} is below 2")));
    }
    let (_, heldout) = cfg.condition_split();
    let rows = step_counts
        .iter()
        .map(|&steps| {
            let summary = evaluate_policy(
                model,
                &heldout,
                cfg.eval_draws,
                steps,
                suite.training(),
                Some(suite.eval_only()),
                cfg.seed,
            )?;
            Ok((steps, summary.scores.into_iter().map(|(k, v)| (k, v.mean)).collect()))
        })
        .collect::<Result<Vec<_>, EngineError>>()?;
    Ok(EvalTable { rows })
}
