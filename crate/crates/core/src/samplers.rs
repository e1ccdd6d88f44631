//! Reverse-time ODE and Euler–Maruyama SDE sampling on a uniform time grid.
//!
//! A reverse step moves from `t` to `t - Δ` with `Δ > 0`. The stochastic
//! step uses
//!
//! ```text
//! mean = x - [v + σ²/(2 t_c) (x + (1 - t_c) v)] Δ
//! x'   = mean + σ √Δ ε
//! ```
//!
//! with `σ = η √(t_c / (1 - t_c))` and `t_c = min(t, t_max)`. The mean is
//! evaluated as `v·(-b) + x·a`, and every caller that recomputes it (the
//! training path included) uses the same expression so values agree bitwise.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::autodiff::{sum_of_squares, AutodiffError, DenseArray};
use crate::flow_model::{ModelError, VelocityField};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("non-finite velocity at t = {t}")]
    NonFiniteVelocity { t: f64 },
    #[error("invalid step from t = {t} with size {dt}")]
    InvalidStep { t: f64, dt: f64 },
    #[error("stochastic step requested at t = {0} where σ vanishes")]
    SingularTime(f64),
    #[error("transition std must be positive, got {0}")]
    NonPositiveStd(f64),
    #[error("time grid needs at least one step")]
    EmptyGrid,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, SamplerError>;

/// Uniform grid `t_i = i / T`, traversed from `t_T = 1` down to `t_0 = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    steps: usize,
    t_max: f64,
}

impl TimeGrid {
    pub fn new(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(SamplerError::EmptyGrid);
        }
        Ok(Self {
            steps,
            t_max: 1.0 - 1.0 / (2.0 * steps as f64),
        })
    }

    /// Overrides the clamp bound used for σ and drift evaluation.
    pub fn with_clamp(mut self, t_max: f64) -> Self {
        self.t_max = t_max;
        self
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn step_size(&self) -> f64 {
        1.0 / self.steps as f64
    }

    pub fn time(&self, index: usize) -> f64 {
        index as f64 / self.steps as f64
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }
}

/// `σ(t) = η √(t_c / (1 - t_c))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSchedule {
    eta: f64,
    t_max: f64,
}

impl NoiseSchedule {
    /// Schedule not bound to a grid; clamps at `0.999`.
    pub fn new(eta: f64) -> Self {
        assert!(eta >= 0.0, "noise level must be non-negative");
        Self { eta, t_max: 0.999 }
    }

    pub fn for_grid(eta: f64, grid: &TimeGrid) -> Self {
        Self {
            t_max: grid.t_max(),
            ..Self::new(eta)
        }
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn clamp(&self, t: f64) -> f64 {
        t.min(self.t_max)
    }

    pub fn sigma(&self, t: f64) -> f64 {
        if self.eta == 0.0 {
            return 0.0;
        }
        let tc = self.clamp(t);
        self.eta * (tc / (1.0 - tc)).sqrt()
    }
}

/// Per-step coefficients of the stochastic transition:
/// `mean = v·neg_b + x·a`, `std = σ √Δ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdeCoefficients {
    pub a: f64,
    pub neg_b: f64,
    pub std: f64,
}

impl SdeCoefficients {
    pub fn new(schedule: &NoiseSchedule, t: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0) || t - dt < -1e-12 {
            return Err(SamplerError::InvalidStep { t, dt });
        }
        let tc = schedule.clamp(t);
        if schedule.eta() > 0.0 && tc <= 0.0 {
            return Err(SamplerError::SingularTime(t));
        }
        let sigma = schedule.sigma(t);
        let drift = if sigma == 0.0 { 0.0 } else { sigma * sigma / (2.0 * tc) };
        Ok(Self {
            a: 1.0 - drift * dt,
            neg_b: -((1.0 + drift * (1.0 - tc)) * dt),
            std: sigma * dt.sqrt(),
        })
    }

    pub fn mean(&self, x: &[f64], v: &[f64]) -> Vec<f64> {
        x.iter().zip(v).map(|(&xi, &vi)| vi * self.neg_b + xi * self.a).collect()
    }
}

/// `(scale, shift)` such that `log p = scale · Σ(x - m)² + shift` for an
/// isotropic Gaussian with the given std in `dim` dimensions.
pub fn logprob_coefficients(std: f64, dim: usize) -> (f64, f64) {
    let scale = -0.5 / (std * std);
    let shift = -(dim as f64) * (std.ln() + 0.5 * (2.0 * PI).ln());
    (scale, shift)
}

/// Log-density of `destination` under `N(mean, std² I)`.
pub fn transition_logprob(destination: &[f64], mean: &[f64], std: f64) -> Result<f64> {
    if !(std > 0.0) {
        return Err(SamplerError::NonPositiveStd(std));
    }
    let (scale, shift) = logprob_coefficients(std, destination.len());
    let ss = sum_of_squares(destination.iter().zip(mean).map(|(x, m)| x - m));
    Ok(ss * scale + shift)
}

/// One reverse step of a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionRecord {
    pub t_from: f64,
    pub t_to: f64,
    pub source: Vec<f64>,
    pub destination: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: f64,
    /// Present only for stochastic steps.
    pub logprob: Option<f64>,
}

impl TransitionRecord {
    pub fn is_stochastic(&self) -> bool {
        self.logprob.is_some()
    }
}

/// A single rollout with its ordered transitions.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub condition: usize,
    pub initial: Vec<f64>,
    pub transitions: Vec<TransitionRecord>,
    pub terminal: Vec<f64>,
}

/// One ODE step in a plan: integrate from `t` to `t - dt`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdeStep {
    pub t: f64,
    pub dt: f64,
}

/// Steps of `stride` grid cells from index `start` down to 0; the last step
/// is truncated so the plan lands exactly on `t = 0`.
pub fn grid_plan(grid: &TimeGrid, start: usize, stride: usize) -> Vec<OdeStep> {
    assert!(stride >= 1, "stride must be positive");
    let mut plan = Vec::new();
    let mut i = start.min(grid.steps());
    while i > 0 {
        let next = i.saturating_sub(stride);
        plan.push(OdeStep {
            t: grid.time(i),
            dt: (i - next) as f64 / grid.steps() as f64,
        });
        i = next;
    }
    plan
}

/// Uniform steps of `step` from `t_start`, truncating the last one at 0.
pub fn uniform_plan(t_start: f64, step: f64) -> Result<Vec<OdeStep>> {
    if !(t_start > 0.0 && t_start <= 1.0) || !(step > 0.0) {
        return Err(SamplerError::InvalidStep { t: t_start, dt: step });
    }
    let n = ((t_start / step) - 1e-9).ceil().max(1.0) as usize;
    Ok((0..n)
        .map(|i| {
            let t = t_start - i as f64 * step;
            let dt = if i + 1 == n { t } else { step };
            OdeStep { t, dt }
        })
        .collect())
}

fn velocities<F: VelocityField + ?Sized>(field: &F, x: &DenseArray, t: f64, conditions: &[usize]) -> Result<DenseArray> {
    let times = vec![t; x.rows()];
    let v = field.velocity_batch(x, &times, conditions)?;
    if !v.is_finite() {
        return Err(SamplerError::NonFiniteVelocity { t });
    }
    Ok(v)
}

/// Reverse-time Euler step `x - v(x, t, c) Δ` on a batch `[n, d]`.
pub fn ode_step<F: VelocityField + ?Sized>(
    field: &F,
    x: &DenseArray,
    t: f64,
    dt: f64,
    conditions: &[usize],
) -> Result<DenseArray> {
    if !(dt > 0.0) || t - dt < -1e-12 {
        return Err(SamplerError::InvalidStep { t, dt });
    }
    let v = velocities(field, x, t, conditions)?;
    let values = x.values().iter().zip(v.values()).map(|(&xi, &vi)| xi - vi * dt).collect();
    Ok(DenseArray::new(x.shape().to_vec(), values)?)
}

/// Stochastic transition given an already evaluated velocity row-batch.
pub fn sde_transitions(
    x: &DenseArray,
    v: &DenseArray,
    t: f64,
    dt: f64,
    schedule: &NoiseSchedule,
    noise: &DenseArray,
) -> Result<Vec<TransitionRecord>> {
    let coef = SdeCoefficients::new(schedule, t, dt)?;
    (0..x.rows())
        .map(|r| {
            let mean = coef.mean(x.row(r), v.row(r));
            let (destination, logprob) = if coef.std > 0.0 {
                let dest: Vec<f64> = mean.iter().zip(noise.row(r)).map(|(m, e)| m + coef.std * e).collect();
                let lp = transition_logprob(&dest, &mean, coef.std)?;
                (dest, Some(lp))
            } else {
                (mean.clone(), None)
            };
            Ok(TransitionRecord {
                t_from: t,
                t_to: t - dt,
                source: x.row(r).to_vec(),
                destination,
                mean,
                std: coef.std,
                logprob,
            })
        })
        .collect()
}

/// Euler–Maruyama step on a batch; `noise` holds standard-normal draws.
pub fn sde_step<F: VelocityField + ?Sized>(
    field: &F,
    x: &DenseArray,
    t: f64,
    dt: f64,
    conditions: &[usize],
    schedule: &NoiseSchedule,
    noise: &DenseArray,
) -> Result<Vec<TransitionRecord>> {
    // validate before spending a forward pass
    SdeCoefficients::new(schedule, t, dt)?;
    let v = velocities(field, x, t, conditions)?;
    sde_transitions(x, &v, t, dt, schedule, noise)
}

/// Runs a plan of ODE steps on a batch without recording transitions.
pub fn ode_integrate<F: VelocityField + ?Sized>(
    field: &F,
    x: &DenseArray,
    conditions: &[usize],
    plan: &[OdeStep],
) -> Result<DenseArray> {
    let mut state = x.clone();
    for step in plan {
        state = ode_step(field, &state, step.t, step.dt, conditions)?;
    }
    Ok(state)
}

/// Deterministic rollout of a single point from `t_start` to 0.
pub fn ode_rollout<F: VelocityField + ?Sized>(
    field: &F,
    x_start: &[f64],
    t_start: f64,
    condition: usize,
    step_size: f64,
) -> Result<(Vec<f64>, TrajectoryRecord)> {
    let plan = uniform_plan(t_start, step_size)?;
    let mut state = DenseArray::new(vec![1, x_start.len()], x_start.to_vec())?;
    let mut transitions = Vec::with_capacity(plan.len());
    for step in &plan {
        let next = ode_step(field, &state, step.t, step.dt, &[condition])?;
        transitions.push(TransitionRecord {
            t_from: step.t,
            t_to: step.t - step.dt,
            source: state.values().to_vec(),
            destination: next.values().to_vec(),
            mean: next.values().to_vec(),
            std: 0.0,
            logprob: None,
        });
        state = next;
    }
    let terminal = state.into_values();
    Ok((
        terminal.clone(),
        TrajectoryRecord {
            condition,
            initial: x_start.to_vec(),
            transitions,
            terminal,
        },
    ))
}

/// Draws an `[n, d]` block of standard normals.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, n: usize, d: usize) -> DenseArray {
    let values = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
    DenseArray::new(vec![n, d], values).expect("noise shape")
}

/// Stochastic at every grid step from `t = 1` to 0. Returns per-step
/// transitions (`[step][row]`) and the terminal batch.
pub fn sde_trajectories<F: VelocityField + ?Sized, R: Rng + ?Sized>(
    field: &F,
    x_init: &DenseArray,
    conditions: &[usize],
    grid: &TimeGrid,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<(Vec<Vec<TransitionRecord>>, DenseArray)> {
    let (n, d) = (x_init.rows(), x_init.cols());
    let mut state = x_init.clone();
    let mut steps = Vec::with_capacity(grid.steps());
    for i in (1..=grid.steps()).rev() {
        let noise = standard_normal(rng, n, d);
        let records = sde_step(field, &state, grid.time(i), grid.step_size(), conditions, schedule, &noise)?;
        let values = records.iter().flat_map(|r| r.destination.iter().copied()).collect();
        state = DenseArray::new(vec![n, d], values)?;
        steps.push(records);
    }
    Ok((steps, state))
}
