//! Flat `key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Lists are comma
//! separated. Optional values accept `auto` (or `none`/`all` where noted).
//! Floats are written in Rust's shortest round-trip form, so
//! `parse(serialize(cfg)) == cfg`.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::autodiff::AdamW;
use crate::engine::{
    BaselineBudget, CandidateSteps, EngineError, Granularities, SamplerMode, TrainConfig, UpdateAggregation,
};
use crate::flow_model::{ModelConfig, PretrainConfig, SyntheticDataset};
use crate::grpo::ObjectiveConfig;
use crate::rewards::{RewardGeometry, MODE_AFFINITY};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown config field `{0}`")]
    UnknownKey(String),
    #[error("config field `{key}` given twice")]
    DuplicateKey { key: String },
    #[error("config field `{key}`: cannot parse `{value}` as {expected}")]
    BadValue {
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error("config field `{field}`: {message}")]
    Invalid { field: &'static str, message: String },
    #[error("reading config {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

/// Which grid steps receive the singular stochastic step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CandidateSpec {
    /// The first `n` sampling steps, `{T, ..., T-n+1}`.
    First(usize),
    List(Vec<usize>),
}

impl CandidateSpec {
    pub fn resolve(&self, grid_steps: usize) -> std::result::Result<CandidateSteps, EngineError> {
        match self {
            Self::First(n) => CandidateSteps::leading(*n, grid_steps),
            Self::List(ks) => CandidateSteps::new(ks.clone(), grid_steps),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    // architecture
    pub data_dim: usize,
    pub num_conditions: usize,
    pub hidden: Vec<usize>,
    pub time_features: usize,
    pub condition_embedding: usize,
    // synthetic domain
    pub mode_radius: f64,
    pub mode_scale: f64,
    pub preference_offset: f64,
    pub heldout_count: usize,
    // pretraining
    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    // sampling
    pub grid_steps: usize,
    pub eta: f64,
    pub group_size: usize,
    pub candidates: CandidateSpec,
    pub granularities: Vec<usize>,
    // objective and optimiser
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub advantage_clamp: Option<f64>,
    pub lr: f64,
    pub weight_decay: f64,
    // loop
    pub iterations: usize,
    pub prompts_per_iteration: usize,
    pub rewards: Vec<String>,
    pub mode: SamplerMode,
    pub aggregation: UpdateAggregation,
    pub baseline_groups_per_prompt: Option<usize>,
    pub baseline_groups_per_update: Option<usize>,
    pub baseline_train_steps: Option<usize>,
    // evaluation
    pub eval_steps: Vec<usize>,
    pub eval_draws: usize,
    pub curve_draws: usize,
    pub wall_clock: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        Self {
            seed: 0,
            data_dim: model.data_dim,
            num_conditions: model.num_conditions,
            hidden: model.hidden,
            time_features: model.time_features,
            condition_embedding: model.condition_embedding,
            mode_radius: 4.0,
            mode_scale: 0.15,
            preference_offset: 0.5,
            heldout_count: 2,
            pretrain_steps: 3000,
            pretrain_batch: 256,
            pretrain_lr: 2e-3,
            grid_steps: 16,
            eta: 0.7,
            group_size: 12,
            candidates: CandidateSpec::First(8),
            granularities: vec![1, 2, 3],
            clip_eps: 5.0,
            kl_beta: 0.0,
            advantage_clamp: None,
            lr: 2e-6,
            weight_decay: 1e-4,
            iterations: 300,
            prompts_per_iteration: 2,
            rewards: vec![MODE_AFFINITY.to_string()],
            mode: SamplerMode::Singular,
            aggregation: UpdateAggregation::PerStep,
            baseline_groups_per_prompt: None,
            baseline_groups_per_update: None,
            baseline_train_steps: None,
            eval_steps: vec![8, 16, 32],
            eval_draws: 1024,
            curve_draws: 256,
            wall_clock: false,
        }
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn opt<T: ToString>(x: &Option<T>, none: &str) -> String {
    x.as_ref().map_or_else(|| none.to_string(), T::to_string)
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str, expected: &'static str) -> Result<T> {
    value.parse().map_err(|_| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        expected,
    })
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str, expected: &'static str) -> Result<Vec<T>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_num(key, v.trim(), expected)).collect()
}

fn parse_opt<T: std::str::FromStr>(key: &str, value: &str, none: &str, expected: &'static str) -> Result<Option<T>> {
    if value == none {
        Ok(None)
    } else {
        parse_num(key, value, expected).map(Some)
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
            expected: "true or false",
        }),
    }
}

fn parse_candidates(key: &str, value: &str) -> Result<CandidateSpec> {
    if let Some(n) = value.strip_prefix("first:") {
        return Ok(CandidateSpec::First(parse_num(key, n, "a step count")?));
    }
    if let Some(list) = value.strip_prefix("list:") {
        return Ok(CandidateSpec::List(parse_list(key, list, "a list of step indices")?));
    }
    Err(ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        expected: "first:N or list:K1,K2,...",
    })
}

impl ExperimentConfig {
    /// Canonical text form, one field per line in a fixed order.
    pub fn serialize(&self) -> String {
        let candidates = match &self.candidates {
            CandidateSpec::First(n) => format!("first:{n}"),
            CandidateSpec::List(ks) => format!("list:{}", join(ks)),
        };
        let fields: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("data_dim", self.data_dim.to_string()),
            ("num_conditions", self.num_conditions.to_string()),
            ("hidden", join(&self.hidden)),
            ("time_features", self.time_features.to_string()),
            ("condition_embedding", self.condition_embedding.to_string()),
            ("mode_radius", self.mode_radius.to_string()),
            ("mode_scale", self.mode_scale.to_string()),
            ("preference_offset", self.preference_offset.to_string()),
            ("heldout_count", self.heldout_count.to_string()),
            ("pretrain_steps", self.pretrain_steps.to_string()),
            ("pretrain_batch", self.pretrain_batch.to_string()),
            ("pretrain_lr", self.pretrain_lr.to_string()),
            ("grid_steps", self.grid_steps.to_string()),
            ("eta", self.eta.to_string()),
            ("group_size", self.group_size.to_string()),
            ("candidates", candidates),
            ("granularities", join(&self.granularities)),
            ("clip_eps", self.clip_eps.to_string()),
            ("kl_beta", self.kl_beta.to_string()),
            ("advantage_clamp", opt(&self.advantage_clamp, "none")),
            ("lr", self.lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("iterations", self.iterations.to_string()),
            ("prompts_per_iteration", self.prompts_per_iteration.to_string()),
            ("rewards", self.rewards.join(",")),
            ("mode", self.mode.to_string()),
            ("aggregation", self.aggregation.to_string()),
            ("baseline_groups_per_prompt", opt(&self.baseline_groups_per_prompt, "auto")),
            ("baseline_groups_per_update", opt(&self.baseline_groups_per_update, "auto")),
            ("baseline_train_steps", opt(&self.baseline_train_steps, "all")),
            ("eval_steps", join(&self.eval_steps)),
            ("eval_draws", self.eval_draws.to_string()),
            ("curve_draws", self.curve_draws.to_string()),
            ("wall_clock", self.wall_clock.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in fields {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Parses `text` on top of the defaults; unspecified fields keep their
    /// default values.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::DuplicateKey { key: key.to_string() });
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Sets one field from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        const INT: &str = "a non-negative integer";
        const REAL: &str = "a real number";
        match key {
            "seed" => self.seed = parse_num(key, value, INT)?,
            "data_dim" => self.data_dim = parse_num(key, value, INT)?,
            "num_conditions" => self.num_conditions = parse_num(key, value, INT)?,
            "hidden" => self.hidden = parse_list(key, value, "a list of layer widths")?,
            "time_features" => self.time_features = parse_num(key, value, INT)?,
            "condition_embedding" => self.condition_embedding = parse_num(key, value, INT)?,
            "mode_radius" => self.mode_radius = parse_num(key, value, REAL)?,
            "mode_scale" => self.mode_scale = parse_num(key, value, REAL)?,
            "preference_offset" => self.preference_offset = parse_num(key, value, REAL)?,
            "heldout_count" => self.heldout_count = parse_num(key, value, INT)?,
            "pretrain_steps" => self.pretrain_steps = parse_num(key, value, INT)?,
            "pretrain_batch" => self.pretrain_batch = parse_num(key, value, INT)?,
            "pretrain_lr" => self.pretrain_lr = parse_num(key, value, REAL)?,
            "grid_steps" => self.grid_steps = parse_num(key, value, INT)?,
            "eta" => self.eta = parse_num(key, value, REAL)?,
            "group_size" => self.group_size = parse_num(key, value, INT)?,
            "candidates" => self.candidates = parse_candidates(key, value)?,
            "granularities" => self.granularities = parse_list(key, value, "a list of positive integers")?,
            "clip_eps" => self.clip_eps = parse_num(key, value, REAL)?,
            "kl_beta" => self.kl_beta = parse_num(key, value, REAL)?,
            "advantage_clamp" => self.advantage_clamp = parse_opt(key, value, "none", REAL)?,
            "lr" => self.lr = parse_num(key, value, REAL)?,
            "weight_decay" => self.weight_decay = parse_num(key, value, REAL)?,
            "iterations" => self.iterations = parse_num(key, value, INT)?,
            "prompts_per_iteration" => self.prompts_per_iteration = parse_num(key, value, INT)?,
            "rewards" => {
                self.rewards = value
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .filter(|s| !s.is_empty())
                    .collect()
            }
            "mode" => {
                self.mode = value.parse().map_err(|_| ConfigError::BadValue {
                    key: key.to_string(),
                    value: value.to_string(),
                    expected: "singular or broadcast",
                })?
            }
            "aggregation" => {
                self.aggregation = value.parse().map_err(|_| ConfigError::BadValue {
                    key: key.to_string(),
                    value: value.to_string(),
                    expected: "per_step or per_prompt",
                })?
            }
            "baseline_groups_per_prompt" => self.baseline_groups_per_prompt = parse_opt(key, value, "auto", INT)?,
            "baseline_groups_per_update" => self.baseline_groups_per_update = parse_opt(key, value, "auto", INT)?,
            "baseline_train_steps" => self.baseline_train_steps = parse_opt(key, value, "all", INT)?,
            "eval_steps" => self.eval_steps = parse_list(key, value, "a list of step counts")?,
            "eval_draws" => self.eval_draws = parse_num(key, value, INT)?,
            "curve_draws" => self.curve_draws = parse_num(key, value, INT)?,
            "wall_clock" => self.wall_clock = parse_bool(key, value)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        fn bad(field: &'static str, message: impl Into<String>) -> Result<()> {
            Err(ConfigError::Invalid {
                field,
                message: message.into(),
            })
        }
        let positive = [
            ("data_dim", self.data_dim),
            ("num_conditions", self.num_conditions),
            ("grid_steps", self.grid_steps),
            ("prompts_per_iteration", self.prompts_per_iteration),
            ("eval_draws", self.eval_draws),
            ("curve_draws", self.curve_draws),
            ("pretrain_batch", self.pretrain_batch),
        ];
        for (field, v) in positive {
            if v == 0 {
                return bad(field, "must be >= 1");
            }
        }
        if self.data_dim != 2 {
            return bad("data_dim", "the ring fixture is two-dimensional");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden", "needs at least one layer and positive widths");
        }
        if self.time_features % 2 != 0 {
            return bad("time_features", "must be even (sin/cos pairs)");
        }
        if self.heldout_count == 0 || self.heldout_count >= self.num_conditions {
            return bad("heldout_count", "must leave at least one condition on each side");
        }
        if !(self.mode_scale > 0.0) || !(self.mode_radius > 0.0) {
            return bad("mode_scale", "mode radius and scale must be positive");
        }
        if !(self.pretrain_lr > 0.0) {
            return bad("pretrain_lr", "must be > 0");
        }
        if !(self.lr > 0.0) {
            return bad("lr", "must be > 0");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be >= 0");
        }
        if !(self.eta >= 0.0) {
            return bad("eta", "must be >= 0");
        }
        if self.rewards.is_empty() {
            return bad("rewards", "at least one training reward is required");
        }
        if self.eval_steps.is_empty() || self.eval_steps.iter().any(|&s| s < 2) {
            return bad("eval_steps", "every evaluation step count must be >= 2");
        }
        if let Err(e) = self.candidates.resolve(self.grid_steps) {
            return bad("candidates", e.to_string());
        }
        if let Err(e) = Granularities::new(self.granularities.clone()) {
            return bad("granularities", e.to_string());
        }
        if !(self.clip_eps > 0.0) {
            return bad("clip_eps", "must be > 0");
        }
        if !(self.kl_beta >= 0.0) {
            return bad("kl_beta", "must be >= 0");
        }
        if self.group_size < 2 {
            return bad("group_size", "a group needs at least two samples");
        }
        if self.advantage_clamp.is_some_and(|c| !(c > 0.0)) {
            return bad("advantage_clamp", "must be > 0 or none");
        }
        if let Some(n) = self.baseline_train_steps {
            if n == 0 || n > self.grid_steps {
                return bad("baseline_train_steps", format!("must lie in [1, {}]", self.grid_steps));
            }
        }
        if self.baseline_groups_per_prompt == Some(0) {
            return bad("baseline_groups_per_prompt", "must be >= 1 or auto");
        }
        if self.baseline_groups_per_update == Some(0) {
            return bad("baseline_groups_per_update", "must be >= 1 or auto");
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            data_dim: self.data_dim,
            num_conditions: self.num_conditions,
            hidden: self.hidden.clone(),
            time_features: self.time_features,
            condition_embedding: self.condition_embedding,
        }
    }

    pub fn dataset(&self) -> SyntheticDataset {
        SyntheticDataset::ring(self.num_conditions, self.mode_radius, self.mode_scale)
    }

    pub fn geometry(&self) -> RewardGeometry {
        RewardGeometry {
            centers: self.dataset().centers().to_vec(),
            scale: self.mode_scale,
            preference_offset: self.preference_offset,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            steps: self.pretrain_steps,
            batch: self.pretrain_batch,
            lr: self.pretrain_lr,
            weight_decay: 0.0,
            seed: crate::rng::derive_seed(self.seed, &[crate::rng::tag::PRETRAIN]),
        }
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            clip_eps: self.clip_eps,
            kl_beta: self.kl_beta,
            group_size: self.group_size,
            advantage_clamp: self.advantage_clamp,
        }
    }

    pub fn train_config(&self, threads: Option<usize>) -> std::result::Result<TrainConfig, EngineError> {
        Ok(TrainConfig {
            mode: self.mode,
            grid_steps: self.grid_steps,
            eta: self.eta,
            candidates: self.candidates.resolve(self.grid_steps)?,
            granularities: Granularities::new(self.granularities.clone())?,
            objective: self.objective(),
            optimizer: AdamW::new(self.lr, self.weight_decay),
            iterations: self.iterations,
            prompts_per_iteration: self.prompts_per_iteration,
            aggregation: self.aggregation,
            baseline: BaselineBudget {
                groups_per_prompt: self.baseline_groups_per_prompt,
                groups_per_update: self.baseline_groups_per_update,
                train_steps: self.baseline_train_steps,
            },
            curve_draws: self.curve_draws,
            seed: self.seed,
            threads,
            record_wall_clock: self.wall_clock,
        })
    }

    /// `(train, held_out)` condition indices. The held-out set holds the
    /// `heldout_count` indices with the smallest FNV-1a hash.
    pub fn condition_split(&self) -> (Vec<usize>, Vec<usize>) {
        let mut order: Vec<usize> = (0..self.num_conditions).collect();
        order.sort_by_key(|&c| (fnv1a(&(c as u64).to_le_bytes()), c));
        let mut heldout = order[..self.heldout_count].to_vec();
        heldout.sort_unstable();
        let train = (0..self.num_conditions).filter(|c| !heldout.contains(c)).collect();
        (train, heldout)
    }

    /// Canonical text of the fields that determine parameter shapes.
    pub fn architecture_text(&self) -> String {
        format!(
            "data_dim = {}\nnum_conditions = {}\nhidden = {}\ntime_features = {}\ncondition_embedding = {}\n",
            self.data_dim,
            self.num_conditions,
            join(&self.hidden),
            self.time_features,
            self.condition_embedding
        )
    }

    pub fn architecture_digest(&self) -> u64 {
        fnv1a(self.architecture_text().as_bytes())
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::parse(&cfg.serialize()).unwrap(), cfg);
    }

    #[test]
    fn defaults_match_reference_setting() {
        let c = ExperimentConfig::default();
        assert_eq!((c.grid_steps, c.group_size, c.iterations), (16, 12, 300));
        assert_eq!(c.eta, 0.7);
        assert_eq!(c.candidates, CandidateSpec::First(8));
        assert_eq!(c.granularities, vec![1, 2, 3]);
        assert_eq!((c.clip_eps, c.kl_beta), (5.0, 0.0));
        assert_eq!((c.lr, c.weight_decay), (2e-6, 1e-4));
    }

    #[test]
    fn errors_name_the_field() {
        let e = ExperimentConfig::parse("eta = fast").unwrap_err().to_string();
        assert!(e.contains("`eta`"), "{e}");
        let e = ExperimentConfig::parse("colour = red").unwrap_err().to_string();
        assert!(e.contains("`colour`"), "{e}");
        let e = ExperimentConfig::parse("granularities = 1,1").unwrap_err().to_string();
        assert!(e.contains("`granularities`"), "{e}");
        assert!(ExperimentConfig::parse("seed 3").is_err());
        assert!(ExperimentConfig::parse("seed = 1\nseed = 2").is_err());
    }

    #[test]
    fn split_is_two_of_eight_and_disjoint() {
        let (train, held) = ExperimentConfig::default().condition_split();
        assert_eq!(held.len(), 2);
        assert_eq!(train.len(), 6);
        assert!(held.iter().all(|c| !train.contains(c)));
        // computed independently from the FNV-1a definition
        let mut sorted = held.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![4, 5]);
    }

    #[test]
    fn fnv_reference_vector() {
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
    }
}
