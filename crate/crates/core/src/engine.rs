//! Singular stochastic rollouts, multi-granularity advantages, the
//! full-trajectory SDE baseline and the online training loop.
//!
//! A singular rollout is deterministic everywhere except one grid step `k`:
//! the group shares the ODE prefix `x_T -> x_k`, branches once with `G`
//! noise draws, and every branch is then integrated to `t = 0` at each
//! granularity `λ`. Advantages are normalised per granularity and per reward
//! model, then summed.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use log::{debug, warn};
use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::autodiff::{AdamW, AutodiffError, DenseArray, Tape, Var};
use crate::flow_model::{ModelError, VelocityField, VelocityFieldModel};
use crate::grpo::{self, AdvantageVector, GrpoError, LossStats, ObjectiveConfig};
use crate::rewards::{score_group, EvalOnlyScores, RewardError, RewardModel};
use crate::rng::{self, tag};
use crate::samplers::{
    self, grid_plan, logprob_coefficients, ode_integrate, sde_transitions, standard_normal, NoiseSchedule,
    OdeStep, SamplerError, SdeCoefficients, TimeGrid, TransitionRecord,
};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid setting: {0}")]
    Invalid(String),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Grpo(#[from] GrpoError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, EngineError>;

fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(EngineError::Invalid(msg.into()))
}

/// Grid indices `k` at which a singular stochastic step is trained.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateSteps(Vec<usize>);

impl CandidateSteps {
    pub fn new(steps: Vec<usize>, grid_steps: usize) -> Result<Self> {
        if steps.is_empty() {
            return invalid("candidate step set is empty");
        }
        let mut seen = BTreeSet::new();
        for &k in &steps {
            if k == 0 || k > grid_steps {
                return invalid(format!("candidate step {k} outside [1, {grid_steps}]"));
            }
            if !seen.insert(k) {
                return invalid(format!("candidate step {k} listed twice"));
            }
        }
        Ok(Self(steps))
    }

    /// `{T, T-1, ..., T-count+1}`.
    pub fn leading(count: usize, grid_steps: usize) -> Result<Self> {
        if count > grid_steps {
            return invalid(format!("cannot take {count} leading steps of a {grid_steps}-step grid"));
        }
        Self::new((0..count).map(|i| grid_steps - i).collect(), grid_steps)
    }

    pub fn steps(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Coarsening factors `Λ` for the post-branch rollouts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Granularities(Vec<usize>);

impl Granularities {
    pub fn new(values: Vec<usize>) -> Result<Self> {
        if values.is_empty() {
            return invalid("granularity set is empty");
        }
        let mut seen = BTreeSet::new();
        for &l in &values {
            if l == 0 {
                return invalid("granularity must be >= 1");
            }
            if !seen.insert(l) {
                return invalid(format!("granularity {l} listed twice"));
            }
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerMode {
    Singular,
    FullSdeBroadcast,
}

impl fmt::Display for SamplerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Singular => "singular",
            Self::FullSdeBroadcast => "broadcast",
        })
    }
}

impl FromStr for SamplerMode {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "singular" => Ok(Self::Singular),
            "broadcast" => Ok(Self::FullSdeBroadcast),
            other => invalid(format!("unknown sampler mode `{other}` (expected singular or broadcast)")),
        }
    }
}

/// ODE plan from `t_{k-1}` to 0 in steps of `λ/T`, the last one truncated.
pub fn granularity_schedule(k: usize, lambda: usize, grid: &TimeGrid) -> Result<Vec<OdeStep>> {
    if k == 0 || k > grid.steps() {
        return invalid(format!("step index {k} outside [1, {}]", grid.steps()));
    }
    if lambda == 0 {
        return invalid("granularity must be >= 1");
    }
    Ok(grid_plan(grid, k - 1, lambda))
}

/// What a rollout needs besides the policy and the rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutSettings {
    pub grid: TimeGrid,
    pub schedule: NoiseSchedule,
    pub group_size: usize,
    pub granularities: Granularities,
}

impl RolloutSettings {
    pub fn new(grid_steps: usize, eta: f64, group_size: usize, granularities: Granularities) -> Result<Self> {
        let grid = TimeGrid::new(grid_steps)?;
        if !(eta >= 0.0) || !eta.is_finite() {
            return invalid(format!("eta must be finite and >= 0, got {eta}"));
        }
        if group_size < 2 {
            return invalid(format!("group size must be >= 2, got {group_size}"));
        }
        Ok(Self {
            grid,
            schedule: NoiseSchedule::for_grid(eta, &grid),
            group_size,
            granularities,
        })
    }
}

fn row_batch(x: &[f64]) -> DenseArray {
    DenseArray::new(vec![1, x.len()], x.to_vec()).expect("row shape")
}

fn stack_rows(records: &[TransitionRecord], d: usize) -> DenseArray {
    let values = records.iter().flat_map(|r| r.destination.iter().copied()).collect();
    DenseArray::new(vec![records.len(), d], values).expect("stacked shape")
}

fn check_rewards(rewards: &[Arc<dyn RewardModel>]) -> Result<()> {
    if rewards.is_empty() {
        return invalid("at least one training reward model is required");
    }
    Ok(())
}

/// Deterministic prefix from `x_T` at `t = 1` down to grid index `k`.
pub fn ode_prefix<F: VelocityField + ?Sized>(
    policy: &F,
    x_init: &[f64],
    condition: usize,
    k: usize,
    grid: &TimeGrid,
) -> Result<Vec<f64>> {
    let plan: Vec<OdeStep> = grid_plan(grid, grid.steps(), 1).into_iter().take(grid.steps() - k).collect();
    Ok(ode_integrate(policy, &row_batch(x_init), &[condition], &plan)?.into_values())
}

/// One group sharing the prefix up to `x_k` and branching at step `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch {
    pub condition: usize,
    pub initial_noise: Vec<f64>,
    pub step: usize,
    pub t: f64,
    pub dt: f64,
    pub shared_state: Vec<f64>,
    pub shared_velocity: Vec<f64>,
    pub coefficients: SdeCoefficients,
    pub branch_noise: DenseArray,
    pub transitions: Vec<TransitionRecord>,
    /// `[G, d]` states `x_{k-1}`.
    pub branches: DenseArray,
    /// Empty when the step is deterministic (`η = 0`).
    pub logp_old: Vec<f64>,
    /// Granularities in the order they were rolled out.
    pub granularities: Vec<usize>,
    /// `terminals[j]` is `[G, d]` at granularity `granularities[j]`.
    pub terminals: Vec<DenseArray>,
    /// `rewards[j][m]`: reward model `m` at granularity `j`.
    pub rewards: Vec<Vec<grpo::RewardGroup>>,
    /// Per-granularity advantages after summing over reward models.
    pub granularity_advantages: Vec<AdvantageVector>,
    pub mixed: AdvantageVector,
    pub reward_calls: usize,
}

impl RolloutBatch {
    pub fn is_stochastic(&self) -> bool {
        self.coefficients.std > 0.0
    }
}

fn group_advantages(groups: &[grpo::RewardGroup]) -> Result<AdvantageVector> {
    let per_reward = groups.iter().map(grpo::normalize_advantages).collect::<grpo::Result<Vec<_>>>()?;
    Ok(grpo::mix_reward_models(&per_reward)?)
}

/// Singular rollout with caller-supplied `[G, d]` branch noise.
pub fn singular_rollout_with_noise<F: VelocityField + ?Sized>(
    policy: &F,
    x_init: &[f64],
    condition: usize,
    k: usize,
    settings: &RolloutSettings,
    rewards: &[Arc<dyn RewardModel>],
    branch_noise: &DenseArray,
) -> Result<RolloutBatch> {
    let grid = &settings.grid;
    let g = settings.group_size;
    let d = x_init.len();
    if k == 0 || k > grid.steps() {
        return invalid(format!("step index {k} outside [1, {}]", grid.steps()));
    }
    if branch_noise.shape() != [g, d] {
        return invalid(format!("branch noise must be [{g}, {d}], got {:?}", branch_noise.shape()));
    }
    check_rewards(rewards)?;

    let x_k = ode_prefix(policy, x_init, condition, k, grid)?;
    let (t, dt) = (grid.time(k), grid.step_size());
    let coefficients = SdeCoefficients::new(&settings.schedule, t, dt)?;
    let v_k = policy.velocity_batch(&row_batch(&x_k), &[t], &[condition])?;
    if !v_k.is_finite() {
        return Err(SamplerError::NonFiniteVelocity { t }.into());
    }
    let transitions = sde_transitions(
        &DenseArray::repeat_rows(&x_k, g),
        &DenseArray::repeat_rows(v_k.values(), g),
        t,
        dt,
        &settings.schedule,
        branch_noise,
    )?;
    let branches = stack_rows(&transitions, d);
    let logp_old: Vec<f64> = transitions.iter().filter_map(|r| r.logprob).collect();

    let conds = vec![condition; g];
    let lambdas = settings.granularities.values().to_vec();
    let mut terminals = Vec::with_capacity(lambdas.len());
    let mut reward_groups = Vec::with_capacity(lambdas.len());
    let mut granularity_advantages = Vec::with_capacity(lambdas.len());
    for &lambda in &lambdas {
        let plan = granularity_schedule(k, lambda, grid)?;
        let x0 = ode_integrate(policy, &branches, &conds, &plan)?;
        let groups = rewards
            .iter()
            .map(|m| score_group(m.as_ref(), &x0, &conds, lambda))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        granularity_advantages.push(group_advantages(&groups)?);
        reward_groups.push(groups);
        terminals.push(x0);
    }
    let mixed = grpo::mix_advantages(&granularity_advantages)?;
    Ok(RolloutBatch {
        condition,
        initial_noise: x_init.to_vec(),
        step: k,
        t,
        dt,
        shared_state: x_k,
        shared_velocity: v_k.into_values(),
        coefficients,
        branch_noise: branch_noise.clone(),
        transitions,
        branches,
        logp_old,
        granularities: lambdas.clone(),
        terminals,
        rewards: reward_groups,
        granularity_advantages,
        mixed,
        reward_calls: lambdas.len() * rewards.len() * g,
    })
}

/// Singular rollout drawing the branch noise from `rng`.
pub fn singular_rollout<F: VelocityField + ?Sized, R: Rng + ?Sized>(
    policy: &F,
    x_init: &[f64],
    condition: usize,
    k: usize,
    settings: &RolloutSettings,
    rewards: &[Arc<dyn RewardModel>],
    rng: &mut R,
) -> Result<RolloutBatch> {
    let noise = standard_normal(rng, settings.group_size, x_init.len());
    singular_rollout_with_noise(policy, x_init, condition, k, settings, rewards, &noise)
}

/// `G` trajectories that are stochastic at every grid step, sharing `x_T`.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineBatch {
    pub condition: usize,
    pub initial_noise: Vec<f64>,
    /// `steps[s][g]`: transition `s` (from `t = 1` downward) of trajectory `g`.
    pub steps: Vec<Vec<TransitionRecord>>,
    /// Transition coefficients of each step, shared by the group.
    pub coefficients: Vec<SdeCoefficients>,
    pub terminals: DenseArray,
    pub rewards: Vec<grpo::RewardGroup>,
    pub advantages: AdvantageVector,
    /// Number of leading steps that enter the loss.
    pub train_steps: usize,
    pub reward_calls: usize,
}

impl BaselineBatch {
    pub fn group_size(&self) -> usize {
        self.terminals.rows()
    }

    pub fn is_stochastic(&self) -> bool {
        self.steps
            .iter()
            .take(self.train_steps)
            .all(|s| s.iter().all(TransitionRecord::is_stochastic))
    }

    /// `[g][s]`: trajectory `g`'s advantage at every trained step.
    pub fn step_advantages(&self) -> Vec<Vec<f64>> {
        self.advantages.values().iter().map(|&a| vec![a; self.train_steps]).collect()
    }
}

pub fn baseline_full_sde_rollout<F: VelocityField + ?Sized, R: Rng + ?Sized>(
    policy: &F,
    x_init: &[f64],
    condition: usize,
    settings: &RolloutSettings,
    rewards: &[Arc<dyn RewardModel>],
    train_steps: Option<usize>,
    rng: &mut R,
) -> Result<BaselineBatch> {
    check_rewards(rewards)?;
    let g = settings.group_size;
    let total = settings.grid.steps();
    let train_steps = train_steps.unwrap_or(total);
    if train_steps == 0 || train_steps > total {
        return invalid(format!("baseline train steps {train_steps} outside [1, {total}]"));
    }
    let conds = vec![condition; g];
    let (steps, terminals) = samplers::sde_trajectories(
        policy,
        &DenseArray::repeat_rows(x_init, g),
        &conds,
        &settings.grid,
        &settings.schedule,
        rng,
    )?;
    let groups = rewards
        .iter()
        .map(|m| score_group(m.as_ref(), &terminals, &conds, 1))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let advantages = group_advantages(&groups)?;
    let coefficients = steps
        .iter()
        .map(|s| SdeCoefficients::new(&settings.schedule, s[0].t_from, settings.grid.step_size()))
        .collect::<samplers::Result<Vec<_>>>()?;
    Ok(BaselineBatch {
        condition,
        initial_noise: x_init.to_vec(),
        steps,
        coefficients,
        terminals,
        rewards: groups,
        advantages,
        train_steps,
        reward_calls: rewards.len() * g,
    })
}

/// Inputs of one GRPO loss term recorded on a tape.
pub struct LossInputs {
    pub logp_new: Var,
    pub logp_old: Vec<f64>,
    pub advantages: Vec<f64>,
}

/// The only mode-specific part of a policy update: rebuilding `log p_new`
/// for the stored transitions under the current parameters.
pub trait TrainableBatch: Sync {
    /// Records `log p_new` on `tape`, or returns `None` when the batch has
    /// no stochastic transition to score.
    fn assemble(&self, policy: &VelocityFieldModel, tape: &mut Tape) -> Result<Option<LossInputs>>;

    fn reward_calls(&self) -> usize;
}

/// `Σ_d (dest - mean)² · scale + shift` with `mean = v·neg_b + x·a`, in the
/// same operation order as [`SdeCoefficients::mean`] and
/// [`samplers::transition_logprob`].
fn taped_logprob(
    tape: &mut Tape,
    v: Var,
    neg_b: DenseArray,
    x_times_a: DenseArray,
    destinations: DenseArray,
    scale: DenseArray,
    shift: DenseArray,
) -> Result<Var> {
    let neg_b = tape.input(neg_b);
    let xa = tape.input(x_times_a);
    let dest = tape.input(destinations);
    let vb = tape.mul(v, neg_b)?;
    let mean = tape.add(vb, xa)?;
    let diff = tape.sub(dest, mean)?;
    let sq = tape.square(diff);
    let ss = tape.sum_last(sq)?;
    let scale = tape.input(scale);
    let shift = tape.input(shift);
    let scaled = tape.mul(ss, scale)?;
    Ok(tape.add(scaled, shift)?)
}

impl TrainableBatch for RolloutBatch {
    fn assemble(&self, policy: &VelocityFieldModel, tape: &mut Tape) -> Result<Option<LossInputs>> {
        if !self.is_stochastic() {
            return Ok(None);
        }
        let d = self.shared_state.len();
        let g = self.branches.rows();
        let c = self.coefficients;
        // one forward pass serves the whole group
        let x = tape.input(row_batch(&self.shared_state));
        let v = policy.forward(tape, x, &[self.t], &[self.condition])?;
        let xa = self.shared_state.iter().map(|&xi| xi * c.a).collect();
        let (scale, shift) = logprob_coefficients(c.std, d);
        let logp = taped_logprob(
            tape,
            v,
            DenseArray::filled(&[1, d], c.neg_b),
            DenseArray::new(vec![1, d], xa)?,
            self.branches.clone(),
            DenseArray::filled(&[g], scale),
            DenseArray::filled(&[g], shift),
        )?;
        Ok(Some(LossInputs {
            logp_new: logp,
            logp_old: self.logp_old.clone(),
            advantages: self.mixed.values().to_vec(),
        }))
    }

    fn reward_calls(&self) -> usize {
        self.reward_calls
    }
}

impl TrainableBatch for BaselineBatch {
    fn assemble(&self, policy: &VelocityFieldModel, tape: &mut Tape) -> Result<Option<LossInputs>> {
        if !self.is_stochastic() {
            return Ok(None);
        }
        let n = self.train_steps;
        let g = self.group_size();
        let d = self.terminals.cols();
        let coefs = &self.coefficients[..n];
        let times: Vec<f64> = self.steps[..n].iter().map(|s| s[0].t_from).collect();
        let conds = vec![self.condition; n];
        let mut neg_b = Vec::with_capacity(n * d);
        let mut scales = Vec::with_capacity(n);
        let mut shifts = Vec::with_capacity(n);
        for c in coefs {
            neg_b.extend(std::iter::repeat_n(c.neg_b, d));
            let (scale, shift) = logprob_coefficients(c.std, d);
            scales.push(scale);
            shifts.push(shift);
        }
        let mut parts = Vec::with_capacity(g);
        let mut logp_old = Vec::with_capacity(g * n);
        let mut advantages = Vec::with_capacity(g * n);
        for (traj, adv) in self.step_advantages().into_iter().enumerate() {
            let mut xs = Vec::with_capacity(n * d);
            let mut xa = Vec::with_capacity(n * d);
            let mut dests = Vec::with_capacity(n * d);
            for (s, c) in coefs.iter().enumerate() {
                let r = &self.steps[s][traj];
                xs.extend_from_slice(&r.source);
                xa.extend(r.source.iter().map(|&xi| xi * c.a));
                dests.extend_from_slice(&r.destination);
                logp_old.push(r.logprob.expect("stochastic step"));
            }
            advantages.extend(adv);
            // one forward pass per trajectory covers all of its steps
            let x = tape.input(DenseArray::new(vec![n, d], xs)?);
            let v = policy.forward(tape, x, &times, &conds)?;
            let logp = taped_logprob(
                tape,
                v,
                DenseArray::new(vec![n, d], neg_b.clone())?,
                DenseArray::new(vec![n, d], xa)?,
                DenseArray::new(vec![n, d], dests)?,
                DenseArray::vector(scales.clone()),
                DenseArray::vector(shifts.clone()),
            )?;
            parts.push(tape.reshape(logp, &[1, n])?);
        }
        let joined = tape.concat(&parts)?;
        let logp_new = tape.reshape(joined, &[g * n])?;
        Ok(Some(LossInputs {
            logp_new,
            logp_old,
            advantages,
        }))
    }

    fn reward_calls(&self) -> usize {
        self.reward_calls
    }
}

/// Outcome of one optimiser update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub stats: LossStats,
    /// False when the update was skipped (no stochastic transition, or a
    /// non-finite loss or gradient).
    pub applied: bool,
}

/// One AdamW update from the averaged GRPO loss of `batches`. The stored
/// `logp_old` of each batch plays the role of the frozen sampling policy.
pub fn train_step(
    policy: &mut VelocityFieldModel,
    batches: &[&dyn TrainableBatch],
    cfg: &ObjectiveConfig,
    optimizer: &AdamW,
) -> Result<StepOutcome> {
    if batches.is_empty() {
        return invalid("train_step needs at least one batch");
    }
    policy.params_mut().zero_gradients();
    let weight = 1.0 / batches.len() as f64;
    let mut total = LossStats::default();
    let mut terms = 0usize;
    for batch in batches {
        let mut tape = Tape::new();
        let Some(inputs) = batch.assemble(policy, &mut tape)? else {
            continue;
        };
        let (loss, stats) = grpo::grpo_loss(&mut tape, inputs.logp_new, &inputs.logp_old, &inputs.advantages, cfg)?;
        if !stats.loss.is_finite() {
            warn!("non-finite loss {}; skipping update", stats.loss);
            policy.params_mut().zero_gradients();
            return Ok(StepOutcome { stats, applied: false });
        }
        let scaled = tape.affine(loss, weight, 0.0);
        tape.backward(scaled, policy.params_mut())?;
        total.loss += stats.loss * weight;
        total.mean_abs_ratio_dev += stats.mean_abs_ratio_dev * stats.samples as f64;
        total.clip_fraction += stats.clip_fraction * stats.samples as f64;
        total.samples += stats.samples;
        terms += 1;
    }
    if terms == 0 {
        return Ok(StepOutcome {
            stats: total,
            applied: false,
        });
    }
    let n = total.samples as f64;
    total.mean_abs_ratio_dev /= n;
    total.clip_fraction /= n;
    // rescale in case some batches contributed nothing
    let seen = terms as f64 * weight;
    total.loss /= seen;
    if seen != 1.0 {
        policy.params_mut().scale_gradients(1.0 / seen);
    }
    if policy.params().flat_gradients().iter().any(|g| !g.is_finite()) {
        warn!("non-finite gradient; skipping update");
        policy.params_mut().zero_gradients();
        return Ok(StepOutcome {
            stats: total,
            applied: false,
        });
    }
    optimizer.step(policy.params_mut())?;
    Ok(StepOutcome {
        stats: total,
        applied: true,
    })
}

/// How singular rollouts of one prompt are grouped into updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateAggregation {
    /// One optimiser step per candidate step `k`.
    PerStep,
    /// One optimiser step per prompt over all `k`.
    PerPrompt,
}

impl fmt::Display for UpdateAggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::PerStep => "per_step",
            Self::PerPrompt => "per_prompt",
        })
    }
}

impl FromStr for UpdateAggregation {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_step" => Ok(Self::PerStep),
            "per_prompt" => Ok(Self::PerPrompt),
            other => invalid(format!("unknown update aggregation `{other}` (expected per_step or per_prompt)")),
        }
    }
}

/// Baseline budget. `None` fields default to a match with the singular
/// mode: `|M|·|Λ|` groups per prompt, `|Λ|` groups per update, so reward
/// calls and optimiser steps agree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BaselineBudget {
    pub groups_per_prompt: Option<usize>,
    pub groups_per_update: Option<usize>,
    pub train_steps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: SamplerMode,
    pub grid_steps: usize,
    pub eta: f64,
    pub candidates: CandidateSteps,
    pub granularities: Granularities,
    pub objective: ObjectiveConfig,
    pub optimizer: AdamW,
    pub iterations: usize,
    pub prompts_per_iteration: usize,
    pub aggregation: UpdateAggregation,
    pub baseline: BaselineBudget,
    /// Held-out ODE draws behind each metrics row.
    pub curve_draws: usize,
    pub seed: u64,
    /// Rollout workers; `None` lets the pool decide.
    pub threads: Option<usize>,
    pub record_wall_clock: bool,
}

impl TrainConfig {
    pub fn rollout_settings(&self) -> Result<RolloutSettings> {
        RolloutSettings::new(self.grid_steps, self.eta, self.objective.group_size, self.granularities.clone())
    }

    pub fn baseline_groups_per_prompt(&self) -> usize {
        self.baseline
            .groups_per_prompt
            .unwrap_or(self.candidates.len() * self.granularities.len())
    }

    pub fn baseline_groups_per_update(&self) -> usize {
        self.baseline.groups_per_update.unwrap_or(self.granularities.len())
    }

    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        self.rollout_settings()?;
        for &k in self.candidates.steps() {
            if k > self.grid_steps {
                return invalid(format!("candidate step {k} outside [1, {}]", self.grid_steps));
            }
        }
        if self.prompts_per_iteration == 0 {
            return invalid("prompts_per_iteration must be >= 1");
        }
        if self.curve_draws == 0 {
            return invalid("curve_draws must be >= 1");
        }
        if self.baseline_groups_per_prompt() == 0 || self.baseline_groups_per_update() == 0 {
            return invalid("baseline group counts must be >= 1");
        }
        Ok(())
    }
}

/// Summary statistics of a batch of evaluation samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

/// Terminal samples and their scores from deterministic sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub samples: DenseArray,
    pub conditions: Vec<usize>,
    pub scores: BTreeMap<String, MeanStd>,
}

const EVAL_CHUNK: usize = 128;

/// ODE-samples `draws` points with conditions cycled over `conditions` on a
/// `steps`-step grid and scores them. The noise depends only on `seed`.
pub fn evaluate_policy<F: VelocityField + ?Sized>(
    policy: &F,
    conditions: &[usize],
    draws: usize,
    steps: usize,
    rewards: &[Arc<dyn RewardModel>],
    eval_only: Option<&EvalOnlyScores>,
    seed: u64,
) -> Result<EvalSummary> {
    if conditions.is_empty() || draws == 0 {
        return invalid("evaluation needs at least one condition and one draw");
    }
    let grid = TimeGrid::new(steps)?;
    let d = policy.data_dim();
    let noise = standard_normal(&mut rng::stream(seed, &[tag::EVAL]), draws, d);
    let conds: Vec<usize> = (0..draws).map(|i| conditions[i % conditions.len()]).collect();
    let plan = grid_plan(&grid, steps, 1);
    // rows are independent, so chunking does not change any value
    let chunks: Vec<DenseArray> = (0..draws.div_ceil(EVAL_CHUNK))
        .into_par_iter()
        .map(|c| {
            let lo = c * EVAL_CHUNK;
            let hi = (lo + EVAL_CHUNK).min(draws);
            let x = DenseArray::new(vec![hi - lo, d], noise.values()[lo * d..hi * d].to_vec())?;
            Ok(ode_integrate(policy, &x, &conds[lo..hi], &plan)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let values: Vec<f64> = chunks.into_iter().flat_map(DenseArray::into_values).collect();
    let samples = DenseArray::new(vec![draws, d], values)?;
    let mut scores = BTreeMap::new();
    for m in rewards {
        let group = score_group(m.as_ref(), &samples, &conds, steps)?;
        scores.insert(m.id().to_string(), MeanStd::of(&group.rewards));
    }
    if let Some(extra) = eval_only {
        let mut columns: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for (r, &c) in conds.iter().enumerate() {
            for (id, v) in extra.scores(samples.row(r), c)? {
                columns.entry(id).or_default().push(v);
            }
        }
        for (id, vs) in columns {
            scores.insert(id, MeanStd::of(&vs));
        }
    }
    Ok(EvalSummary {
        samples,
        conditions: conds,
        scores,
    })
}

/// One row of the training history.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub iteration: usize,
    /// Held-out terminal reward statistics per training reward model.
    pub rewards: BTreeMap<String, MeanStd>,
    pub loss: f64,
    pub ratio_dev: f64,
    pub clip_frac: f64,
    /// Cumulative training reward-model calls.
    pub rm_calls: u64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingHistory {
    /// Row 0 is the held-out evaluation before any update; rows `1..=E`
    /// follow each iteration. Empty when `E = 0`.
    pub rows: Vec<MetricsRow>,
    pub optimizer_steps: usize,
    pub skipped_updates: usize,
}

/// Rollouts of one prompt in one iteration.
#[derive(Debug, Clone, PartialEq)]
pub enum PromptRollouts {
    Singular(Vec<RolloutBatch>),
    Baseline(Vec<BaselineBatch>),
}

impl PromptRollouts {
    pub fn reward_calls(&self) -> usize {
        match self {
            Self::Singular(bs) => bs.iter().map(|b| b.reward_calls).sum(),
            Self::Baseline(bs) => bs.iter().map(|b| b.reward_calls).sum(),
        }
    }

    /// Batches grouped into optimiser updates.
    pub fn update_groups(&self, cfg: &TrainConfig) -> Vec<Vec<&dyn TrainableBatch>> {
        match self {
            Self::Singular(bs) => match cfg.aggregation {
                UpdateAggregation::PerStep => bs.iter().map(|b| vec![b as &dyn TrainableBatch]).collect(),
                UpdateAggregation::PerPrompt => vec![bs.iter().map(|b| b as &dyn TrainableBatch).collect()],
            },
            Self::Baseline(bs) => bs
                .chunks(cfg.baseline_groups_per_update())
                .map(|c| c.iter().map(|b| b as &dyn TrainableBatch).collect())
                .collect(),
        }
    }
}

/// Conditions for iteration `e`, drawn uniformly from `train_conditions`.
pub fn iteration_conditions(seed: u64, iteration: usize, count: usize, train_conditions: &[usize]) -> Vec<usize> {
    let mut r = rng::stream(seed, &[tag::CONDITIONS, iteration as u64]);
    (0..count)
        .map(|_| train_conditions[r.random_range(0..train_conditions.len())])
        .collect()
}

fn initial_noise(seed: u64, path: &[u64], d: usize) -> Vec<f64> {
    let mut full = vec![tag::INIT_NOISE];
    full.extend_from_slice(path);
    standard_normal(&mut rng::stream(seed, &full), 1, d).into_values()
}

/// Sampling phase of iteration `e` under the current (frozen) policy.
/// Every `(prompt, k)` or `(prompt, group)` task draws from its own stream.
pub fn collect_rollouts(
    policy: &VelocityFieldModel,
    cfg: &TrainConfig,
    rewards: &[Arc<dyn RewardModel>],
    train_conditions: &[usize],
    iteration: usize,
) -> Result<Vec<PromptRollouts>> {
    let settings = cfg.rollout_settings()?;
    let d = policy.data_dim();
    let e = iteration as u64;
    let conditions = iteration_conditions(cfg.seed, iteration, cfg.prompts_per_iteration, train_conditions);
    match cfg.mode {
        SamplerMode::Singular => {
            let tasks: Vec<(usize, usize)> = (0..conditions.len())
                .flat_map(|p| cfg.candidates.steps().iter().map(move |&k| (p, k)))
                .collect();
            let batches = tasks
                .par_iter()
                .map(|&(p, k)| {
                    let x_init = initial_noise(cfg.seed, &[e, p as u64], d);
                    let mut r = rng::stream(cfg.seed, &[tag::BRANCH_NOISE, e, p as u64, k as u64]);
                    singular_rollout(policy, &x_init, conditions[p], k, &settings, rewards, &mut r)
                })
                .collect::<Result<Vec<_>>>()?;
            let per_prompt = cfg.candidates.len();
            Ok(batches
                .chunks(per_prompt)
                .map(|c| PromptRollouts::Singular(c.to_vec()))
                .collect())
        }
        SamplerMode::FullSdeBroadcast => {
            let groups = cfg.baseline_groups_per_prompt();
            let tasks: Vec<(usize, usize)> = (0..conditions.len()).flat_map(|p| (0..groups).map(move |g| (p, g))).collect();
            let batches = tasks
                .par_iter()
                .map(|&(p, g)| {
                    let x_init = initial_noise(cfg.seed, &[e, p as u64, g as u64], d);
                    let mut r = rng::stream(cfg.seed, &[tag::TRAJECTORY_NOISE, e, p as u64, g as u64]);
                    baseline_full_sde_rollout(policy, &x_init, conditions[p], &settings, rewards, cfg.baseline.train_steps, &mut r)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(batches.chunks(groups).map(|c| PromptRollouts::Baseline(c.to_vec())).collect())
        }
    }
}

fn build_pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        b = b.num_threads(n.max(1));
    }
    b.build().map_err(|e| EngineError::Invalid(format!("thread pool: {e}")))
}

fn eval_row(
    policy: &VelocityFieldModel,
    cfg: &TrainConfig,
    rewards: &[Arc<dyn RewardModel>],
    heldout: &[usize],
) -> Result<BTreeMap<String, MeanStd>> {
    Ok(evaluate_policy(policy, heldout, cfg.curve_draws, cfg.grid_steps, rewards, None, cfg.seed)?.scores)
}

/// Online fine-tuning. Each iteration samples with the current policy
/// (which is the frozen old policy for every update of that iteration),
/// then applies the updates in order and evaluates on `heldout`.
pub fn training_loop(
    policy: &mut VelocityFieldModel,
    cfg: &TrainConfig,
    rewards: &[Arc<dyn RewardModel>],
    train_conditions: &[usize],
    heldout: &[usize],
) -> Result<TrainingHistory> {
    cfg.validate()?;
    check_rewards(rewards)?;
    if train_conditions.is_empty() || heldout.is_empty() {
        return invalid("training and held-out condition sets must be non-empty");
    }
    let mut history = TrainingHistory::default();
    if cfg.iterations == 0 {
        return Ok(history);
    }
    let pool = build_pool(cfg.threads)?;
    pool.install(|| {
        let start = Instant::now();
        let seconds = |s: &Instant| if cfg.record_wall_clock { s.elapsed().as_secs_f64() } else { 0.0 };
        history.rows.push(MetricsRow {
            iteration: 0,
            rewards: eval_row(policy, cfg, rewards, heldout)?,
            loss: 0.0,
            ratio_dev: 0.0,
            clip_frac: 0.0,
            rm_calls: 0,
            seconds: seconds(&start),
        });
        let mut rm_calls = 0u64;
        for iteration in 1..=cfg.iterations {
            let prompts = collect_rollouts(policy, cfg, rewards, train_conditions, iteration)?;
            let mut loss = 0.0;
            let mut dev = 0.0;
            let mut clip = 0.0;
            let mut samples = 0usize;
            let mut updates = 0usize;
            for prompt in &prompts {
                rm_calls += prompt.reward_calls() as u64;
                for group in prompt.update_groups(cfg) {
                    let out = train_step(policy, &group, &cfg.objective, &cfg.optimizer)?;
                    if out.applied {
                        history.optimizer_steps += 1;
                        updates += 1;
                        loss += out.stats.loss;
                        dev += out.stats.mean_abs_ratio_dev * out.stats.samples as f64;
                        clip += out.stats.clip_fraction * out.stats.samples as f64;
                        samples += out.stats.samples;
                    } else {
                        history.skipped_updates += 1;
                    }
                }
            }
            let row = MetricsRow {
                iteration,
                rewards: eval_row(policy, cfg, rewards, heldout)?,
                loss: if updates > 0 { loss / updates as f64 } else { 0.0 },
                ratio_dev: if samples > 0 { dev / samples as f64 } else { 0.0 },
                clip_frac: if samples > 0 { clip / samples as f64 } else { 0.0 },
                rm_calls,
                seconds: seconds(&start),
            };
            debug!("iteration {iteration}: loss {:.4e}, rewards {:?}", row.loss, row.rewards);
            history.rows.push(row);
        }
        Ok(history)
    })
}
