//! Conditional velocity-field networks and flow-matching pretraining.
//!
//! Time runs from `t = 1` (pure noise) to `t = 0` (data). Training pairs use
//! the rectified-flow interpolant `x_t = (1 - t) x_0 + t ε` with target
//! velocity `ε - x_0`.

use std::f64::consts::PI;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::autodiff::{AdamW, AutodiffError, DenseArray, ParamId, ParamSet, Tape, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("condition {condition} out of range for {count} conditions")]
    ConditionOutOfRange { condition: usize, count: usize },
    #[error("time {0} outside [0, 1]")]
    TimeOutOfRange(f64),
    #[error("expected data dimension {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("analytic velocity degenerates at t = {0}")]
    Degenerate(f64),
    #[error("non-finite flow-matching loss {value} at step {step}")]
    NonFiniteLoss { step: usize, value: f64 },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Anything that maps a batch of states at given times and conditions to
/// velocities.
pub trait VelocityField: Sync {
    fn data_dim(&self) -> usize;

    /// `xs` is `[n, d]`; `times` and `conditions` have length `n`.
    fn velocity_batch(&self, xs: &DenseArray, times: &[f64], conditions: &[usize]) -> Result<DenseArray>;
}

/// Architecture of a [`VelocityFieldModel`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub data_dim: usize,
    pub num_conditions: usize,
    pub hidden: Vec<usize>,
    pub time_features: usize,
    pub condition_embedding: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            data_dim: 2,
            num_conditions: 8,
            hidden: vec![64, 64, 64],
            time_features: 16,
            condition_embedding: 16,
        }
    }
}

impl ModelConfig {
    pub fn input_width(&self) -> usize {
        self.data_dim + self.time_features + self.condition_embedding
    }
}

#[derive(Debug, Clone)]
struct Layer {
    weight: ParamId,
    bias: ParamId,
}

/// MLP velocity field `v(x, t, c)` with sinusoidal time features and a
/// learned condition embedding.
#[derive(Debug)]
pub struct VelocityFieldModel {
    config: ModelConfig,
    params: ParamSet,
    embedding: ParamId,
    layers: Vec<Layer>,
    forward_calls: AtomicUsize,
}

impl Clone for VelocityFieldModel {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            embedding: self.embedding,
            layers: self.layers.clone(),
            forward_calls: AtomicUsize::new(0),
        }
    }
}

/// Sinusoidal features `[sin(ω_j t), cos(ω_j t)]` with `ω_j = π·2^{j/2}`.
pub fn time_features(t: f64, width: usize) -> impl Iterator<Item = f64> {
    (0..width).map(move |i| {
        let omega = PI * 2f64.powf((i / 2) as f64 / 2.0);
        if i % 2 == 0 {
            (omega * t).sin()
        } else {
            (omega * t).cos()
        }
    })
}

impl VelocityFieldModel {
    /// Randomly initialised model; linear layers use `U(-1/√fan_in, 1/√fan_in)`.
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let emb_values = (0..config.num_conditions * config.condition_embedding)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let embedding = params.add(
            "condition_embedding",
            DenseArray::new(vec![config.num_conditions, config.condition_embedding], emb_values)
                .expect("embedding shape"),
        );
        let mut widths = vec![config.input_width()];
        widths.extend_from_slice(&config.hidden);
        widths.push(config.data_dim);
        let mut layers = Vec::new();
        for (i, pair) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
            let b = (0..fan_out).map(|_| rng.random_range(-bound..bound)).collect();
            let weight = params.add(
                format!("layer{i}.weight"),
                DenseArray::new(vec![fan_in, fan_out], w).expect("weight shape"),
            );
            let bias = params.add(format!("layer{i}.bias"), DenseArray::vector(b));
            layers.push(Layer { weight, bias });
        }
        Self {
            config,
            params,
            embedding,
            layers,
            forward_calls: AtomicUsize::new(0),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Sets the output layer to zero so that the field vanishes everywhere.
    pub fn zero_output_layer(&mut self) {
        let last = self.layers.last().expect("at least one layer").clone();
        for id in [last.weight, last.bias] {
            self.params.value_mut(id).values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Number of batched forward passes run since construction or the last reset.
    pub fn forward_calls(&self) -> usize {
        self.forward_calls.load(Ordering::Relaxed)
    }

    pub fn reset_forward_calls(&self) {
        self.forward_calls.store(0, Ordering::Relaxed);
    }

    fn check_inputs(&self, rows: usize, times: &[f64], conditions: &[usize]) -> Result<()> {
        debug_assert_eq!(rows, times.len());
        debug_assert_eq!(rows, conditions.len());
        if let Some(&t) = times.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(ModelError::TimeOutOfRange(t));
        }
        if let Some(&c) = conditions.iter().find(|&&c| c >= self.config.num_conditions) {
            return Err(ModelError::ConditionOutOfRange {
                condition: c,
                count: self.config.num_conditions,
            });
        }
        Ok(())
    }

    /// Records the forward pass on `tape`; `x` must be `[n, d]`.
    pub fn forward(&self, tape: &mut Tape, x: Var, times: &[f64], conditions: &[usize]) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.config.data_dim {
            return Err(ModelError::DimensionMismatch {
                expected: self.config.data_dim,
                actual: shape.last().copied().unwrap_or(0),
            });
        }
        let n = shape[0];
        self.check_inputs(n, times, conditions)?;
        self.forward_calls.fetch_add(1, Ordering::Relaxed);

        let tf = self.config.time_features;
        let tvals: Vec<f64> = times.iter().flat_map(|&t| time_features(t, tf)).collect();
        let tvar = tape.input(DenseArray::new(vec![n, tf], tvals)?);
        let nc = self.config.num_conditions;
        let mut onehot = vec![0.0; n * nc];
        for (r, &c) in conditions.iter().enumerate() {
            onehot[r * nc + c] = 1.0;
        }
        let onehot = tape.input(DenseArray::new(vec![n, nc], onehot)?);
        let table = tape.param(&self.params, self.embedding);
        let emb = tape.matmul(onehot, table)?;
        let mut h = tape.concat(&[x, tvar, emb])?;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = tape.param(&self.params, layer.weight);
            let b = tape.param(&self.params, layer.bias);
            let z = tape.matmul(h, w)?;
            let z = tape.add(z, b)?;
            h = if i == last { z } else { tape.silu(z) };
        }
        Ok(h)
    }

    /// Velocity at a single point.
    pub fn velocity(&self, x: &[f64], t: f64, condition: usize) -> Result<Vec<f64>> {
        let xs = DenseArray::new(vec![1, x.len()], x.to_vec())?;
        Ok(self.velocity_batch(&xs, &[t], &[condition])?.into_values())
    }
}

impl VelocityField for VelocityFieldModel {
    fn data_dim(&self) -> usize {
        self.config.data_dim
    }

    fn velocity_batch(&self, xs: &DenseArray, times: &[f64], conditions: &[usize]) -> Result<DenseArray> {
        let mut tape = Tape::new();
        let x = tape.input(xs.clone());
        let out = self.forward(&mut tape, x, times, conditions)?;
        Ok(tape.value(out).clone())
    }
}

/// Isotropic Gaussian mixture with one mode per condition.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    centers: Vec<Vec<f64>>,
    scale: f64,
}

impl SyntheticDataset {
    pub fn new(centers: Vec<Vec<f64>>, scale: f64) -> Self {
        assert!(!centers.is_empty(), "dataset needs at least one mode");
        Self { centers, scale }
    }

    /// `count` modes evenly spaced on a circle of `radius` in 2D.
    pub fn ring(count: usize, radius: f64, scale: f64) -> Self {
        let centers = (0..count)
            .map(|i| {
                let a = 2.0 * PI * i as f64 / count as f64;
                vec![radius * a.cos(), radius * a.sin()]
            })
            .collect();
        Self::new(centers, scale)
    }

    pub fn dim(&self) -> usize {
        self.centers[0].len()
    }

    pub fn num_conditions(&self) -> usize {
        self.centers.len()
    }

    pub fn centers(&self) -> &[Vec<f64>] {
        &self.centers
    }

    pub fn center(&self, c: usize) -> &[f64] {
        &self.centers[c]
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Draws `n` pairs `(x_0, c)` with `c` uniform and `x_0 ~ N(μ_c, s² I)`.
    pub fn sample<R: Rng>(&self, rng: &mut R, n: usize) -> (DenseArray, Vec<usize>) {
        let d = self.dim();
        let mut values = Vec::with_capacity(n * d);
        let mut conds = Vec::with_capacity(n);
        for _ in 0..n {
            let c = rng.random_range(0..self.centers.len());
            conds.push(c);
            for j in 0..d {
                let z: f64 = rng.sample(StandardNormal);
                values.push(self.centers[c][j] + self.scale * z);
            }
        }
        (DenseArray::new(vec![n, d], values).expect("sample shape"), conds)
    }

    pub fn sample_seeded(&self, seed: u64, n: usize) -> (DenseArray, Vec<usize>) {
        self.sample(&mut ChaCha8Rng::seed_from_u64(seed), n)
    }
}

/// Closed-form marginal velocity for data `N(μ, s² I)` under the
/// rectified-flow interpolant.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticGaussianFlow {
    pub mean: Vec<f64>,
    pub scale: f64,
}

impl AnalyticGaussianFlow {
    pub fn new(mean: Vec<f64>, scale: f64) -> Self {
        Self { mean, scale }
    }

    /// `E[ε - x_0 | x_t = x] = -μ + κ_t (x - (1-t) μ)` with
    /// `κ_t = (t - (1-t) s²) / ((1-t)² s² + t²)`.
    pub fn velocity(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        if !(0.0..=1.0).contains(&t) {
            return Err(ModelError::TimeOutOfRange(t));
        }
        if x.len() != self.mean.len() {
            return Err(ModelError::DimensionMismatch {
                expected: self.mean.len(),
                actual: x.len(),
            });
        }
        let s2 = self.scale * self.scale;
        let var = (1.0 - t).powi(2) * s2 + t * t;
        if var < 1e-300 {
            return Err(ModelError::Degenerate(t));
        }
        let kappa = (t - (1.0 - t) * s2) / var;
        Ok(x
            .iter()
            .zip(&self.mean)
            .map(|(&xi, &mi)| -mi + kappa * (xi - (1.0 - t) * mi))
            .collect())
    }
}

impl VelocityField for AnalyticGaussianFlow {
    fn data_dim(&self) -> usize {
        self.mean.len()
    }

    fn velocity_batch(&self, xs: &DenseArray, times: &[f64], _conditions: &[usize]) -> Result<DenseArray> {
        let mut out = Vec::with_capacity(xs.len());
        for (r, &t) in times.iter().enumerate() {
            out.extend(self.velocity(xs.row(r), t)?);
        }
        Ok(DenseArray::new(xs.shape().to_vec(), out)?)
    }
}

/// Adapts a closure over a single point into a [`VelocityField`].
pub struct FnField<F> {
    dim: usize,
    f: F,
}

impl<F> FnField<F>
where
    F: Fn(&[f64], f64, usize) -> Vec<f64> + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> VelocityField for FnField<F>
where
    F: Fn(&[f64], f64, usize) -> Vec<f64> + Sync,
{
    fn data_dim(&self) -> usize {
        self.dim
    }

    fn velocity_batch(&self, xs: &DenseArray, times: &[f64], conditions: &[usize]) -> Result<DenseArray> {
        let mut out = Vec::with_capacity(xs.len());
        for r in 0..xs.rows() {
            out.extend((self.f)(xs.row(r), times[r], conditions[r]));
        }
        Ok(DenseArray::new(xs.shape().to_vec(), out)?)
    }
}

/// Records `mean_n( Σ_d (v(x_t, t, c) - (ε - x_0))² )` on `tape`.
pub fn flow_matching_loss(
    model: &VelocityFieldModel,
    tape: &mut Tape,
    x0: &DenseArray,
    noise: &DenseArray,
    times: &[f64],
    conditions: &[usize],
) -> Result<Var> {
    let d = x0.cols();
    let mut xt = Vec::with_capacity(x0.len());
    let mut target = Vec::with_capacity(x0.len());
    for (r, &t) in times.iter().enumerate() {
        for j in 0..d {
            let (a, e) = (x0.row(r)[j], noise.row(r)[j]);
            xt.push((1.0 - t) * a + t * e);
            target.push(e - a);
        }
    }
    let xt = tape.input(DenseArray::new(x0.shape().to_vec(), xt)?);
    let target = tape.input(DenseArray::new(x0.shape().to_vec(), target)?);
    let v = model.forward(tape, xt, times, conditions)?;
    let diff = tape.sub(v, target)?;
    let sq = tape.square(diff);
    let per_row = tape.sum_last(sq)?;
    Ok(tape.mean(per_row))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch: 256,
            lr: 2e-3,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

/// Fits `model` to `dataset` with the flow-matching objective; returns the
/// per-step loss.
pub fn pretrain_flow_matching(
    model: &mut VelocityFieldModel,
    dataset: &SyntheticDataset,
    cfg: &PretrainConfig,
) -> Result<Vec<f64>> {
    if dataset.dim() != model.config.data_dim {
        return Err(ModelError::DimensionMismatch {
            expected: model.config.data_dim,
            actual: dataset.dim(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let d = dataset.dim();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (x0, conds) = dataset.sample(&mut rng, cfg.batch);
        let noise: Vec<f64> = (0..cfg.batch * d).map(|_| rng.sample(StandardNormal)).collect();
        let noise = DenseArray::new(vec![cfg.batch, d], noise)?;
        let times: Vec<f64> = (0..cfg.batch).map(|_| rng.random::<f64>()).collect();
        let mut tape = Tape::new();
        let loss = flow_matching_loss(model, &mut tape, &x0, &noise, &times, &conds)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(ModelError::NonFiniteLoss { step, value });
        }
        model.params.zero_gradients();
        tape.backward(loss, &mut model.params)?;
        opt.step(&mut model.params)?;
        losses.push(value);
    }
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> ModelConfig {
        ModelConfig {
            data_dim: 2,
            num_conditions: 3,
            hidden: vec![8],
            time_features: 4,
            condition_embedding: 3,
        }
    }

    #[test]
    fn zero_output_layer_gives_zero_field() {
        let mut model = VelocityFieldModel::new(ModelConfig::default(), 7);
        model.zero_output_layer();
        for (x, t, c) in [([1.0, -3.0], 0.2, 0), ([10.0, 0.5], 1.0, 7)] {
            assert_eq!(model.velocity(&x, t, c).unwrap(), vec![0.0, 0.0]);
        }
    }

    #[test]
    fn velocity_is_deterministic() {
        let model = VelocityFieldModel::new(ModelConfig::default(), 3);
        let a = model.velocity(&[0.3, -0.7], 0.4, 2).unwrap();
        let b = model.velocity(&[0.3, -0.7], 0.4, 2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
    }

    #[test]
    fn condition_out_of_range_is_rejected() {
        let model = VelocityFieldModel::new(ModelConfig::default(), 3);
        assert_eq!(
            model.velocity(&[0.0, 0.0], 0.5, 8),
            Err(ModelError::ConditionOutOfRange { condition: 8, count: 8 })
        );
        assert!(matches!(
            model.velocity(&[0.0, 0.0], 1.5, 0),
            Err(ModelError::TimeOutOfRange(_))
        ));
    }

    #[test]
    fn velocity_gradient_wrt_x_matches_finite_differences() {
        let model = VelocityFieldModel::new(small_config(), 11);
        let x0 = [0.4, -1.1];
        let (t, c) = (0.35, 1);
        // Scalar probe: w · v(x)
        let w = [0.7, -1.3];
        let probe = |x: &[f64]| -> f64 {
            let v = model.velocity(x, t, c).unwrap();
            v[0] * w[0] + v[1] * w[1]
        };
        let mut tape = Tape::new();
        let xv = tape.input(DenseArray::new(vec![1, 2], x0.to_vec()).unwrap());
        let v = model.forward(&mut tape, xv, &[t], &[c]).unwrap();
        let wv = tape.input(DenseArray::new(vec![1, 2], w.to_vec()).unwrap());
        let prod = tape.mul(v, wv).unwrap();
        let s = tape.sum(prod);
        let grads = tape.backward(s, &mut model.params().clone()).unwrap();
        let analytic = grads.wrt(xv).unwrap().to_vec();
        let h = 1e-5;
        for i in 0..2 {
            let mut up = x0;
            let mut dn = x0;
            up[i] += h;
            dn[i] -= h;
            let numeric = (probe(&up) - probe(&dn)) / (2.0 * h);
            let rel = (numeric - analytic[i]).abs() / analytic[i].abs().max(1e-12);
            assert!(rel <= 1e-6, "coordinate {i}: {numeric} vs {}", analytic[i]);
        }
    }

    #[test]
    fn zero_pretraining_steps_leave_parameters_unchanged() {
        let mut model = VelocityFieldModel::new(small_config(), 5);
        let before = model.params().clone();
        let data = SyntheticDataset::new(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]], 0.1);
        let log = pretrain_flow_matching(&mut model, &data, &PretrainConfig { steps: 0, ..Default::default() }).unwrap();
        assert!(log.is_empty());
        assert_eq!(model.params(), &before);
    }

    #[test]
    fn pretraining_is_seed_deterministic() {
        let data = SyntheticDataset::new(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]], 0.1);
        let cfg = PretrainConfig {
            steps: 20,
            batch: 16,
            lr: 1e-2,
            weight_decay: 0.0,
            seed: 9,
        };
        let mut a = VelocityFieldModel::new(small_config(), 5);
        let mut b = VelocityFieldModel::new(small_config(), 5);
        let la = pretrain_flow_matching(&mut a, &data, &cfg).unwrap();
        let lb = pretrain_flow_matching(&mut b, &data, &cfg).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a.params().flat_values(), b.params().flat_values());
    }

    #[test]
    fn pretraining_rejects_dimension_mismatch() {
        let data = SyntheticDataset::new(vec![vec![1.0, 0.0, 0.0]], 0.1);
        let mut model = VelocityFieldModel::new(small_config(), 5);
        assert!(matches!(
            pretrain_flow_matching(&mut model, &data, &PretrainConfig::default()),
            Err(ModelError::DimensionMismatch { expected: 2, actual: 3 })
        ));
    }

    #[test]
    fn dataset_sampling_is_seeded() {
        let data = SyntheticDataset::ring(8, 4.0, 0.15);
        assert_eq!(data.sample_seeded(42, 64), data.sample_seeded(42, 64));
        assert_ne!(data.sample_seeded(42, 64).0, data.sample_seeded(43, 64).0);
    }

    #[test]
    fn analytic_velocity_at_time_zero_is_minus_x() {
        let flow = AnalyticGaussianFlow::new(vec![1.0, -2.0], 0.5);
        let v = flow.velocity(&[0.3, 0.9], 0.0).unwrap();
        assert!((v[0] + 0.3).abs() < 1e-15 && (v[1] + 0.9).abs() < 1e-15);
    }

    #[test]
    fn analytic_velocity_centered_part_is_odd() {
        let flow = AnalyticGaussianFlow::new(vec![1.5, -0.5], 0.3);
        let t = 0.37;
        let base: Vec<f64> = flow.mean.iter().map(|m| (1.0 - t) * m).collect();
        let off = [0.8, -0.2];
        let plus: Vec<f64> = base.iter().zip(off).map(|(b, o)| b + o).collect();
        let minus: Vec<f64> = base.iter().zip(off).map(|(b, o)| b - o).collect();
        let vp = flow.velocity(&plus, t).unwrap();
        let vm = flow.velocity(&minus, t).unwrap();
        for j in 0..2 {
            // v = -μ + κ·offset
            assert!(((vp[j] + flow.mean[j]) + (vm[j] + flow.mean[j])).abs() < 1e-12);
        }
    }

    #[test]
    fn analytic_velocity_guards_degenerate_point() {
        let flow = AnalyticGaussianFlow::new(vec![0.0], 0.0);
        assert_eq!(flow.velocity(&[0.0], 0.0), Err(ModelError::Degenerate(0.0)));
        assert!(flow.velocity(&[0.0], 1.0).is_ok());
    }
}
