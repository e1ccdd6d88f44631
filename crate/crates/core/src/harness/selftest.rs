//! Runtime oracle and invariant suites behind the `selftest` subcommand.

use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{DenseArray, ParamSet, Tape};
use crate::engine::{singular_rollout, Granularities, RolloutSettings, TrainableBatch};
use crate::flow_model::{flow_matching_loss, AnalyticGaussianFlow, ModelConfig, VelocityFieldModel};
use crate::grpo::{self, ObjectiveConfig, RewardGroup};
use crate::harness::checkpoint;
use crate::harness::config::ExperimentConfig;
use crate::rewards::{ModeAffinity, RewardModel};
use crate::samplers::{self, NoiseSchedule, TimeGrid};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    pub checks: Vec<Check>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn check(name: &str, passed: bool, detail: String) -> Check {
    Check {
        name: name.to_string(),
        passed,
        detail,
    }
}

/// `‖a - b‖∞ / max(‖a‖∞, ‖b‖∞)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = a.iter().chain(b).map(|x| x.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of `f` over every parameter value.
fn numeric_gradient(params: &mut ParamSet, h: f64, f: &mut dyn FnMut(&ParamSet) -> f64) -> Vec<f64> {
    let ids: Vec<_> = params.ids().collect();
    let mut out = Vec::new();
    for id in ids {
        for i in 0..params.value(id).len() {
            let orig = params.value(id).values()[i];
            params.value_mut(id).values_mut()[i] = orig + h;
            let up = f(params);
            params.value_mut(id).values_mut()[i] = orig - h;
            let down = f(params);
            params.value_mut(id).values_mut()[i] = orig;
            out.push((up - down) / (2.0 * h));
        }
    }
    out
}

fn random_array(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> DenseArray {
    let n = shape.iter().product();
    let values = (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    DenseArray::new(shape.to_vec(), values).expect("shape")
}

fn gradient_suite() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut checks = Vec::new();

    // two-layer network touching every differentiable op
    let mut params = ParamSet::new();
    let w1 = params.add("w1", random_array(&mut rng, &[3, 4], 0.5));
    let b1 = params.add("b1", random_array(&mut rng, &[4], 0.1));
    let w2 = params.add("w2", random_array(&mut rng, &[8, 2], 0.5));
    let x = random_array(&mut rng, &[5, 3], 1.0);
    let net = |tape: &mut Tape, p: &ParamSet| {
        let xi = tape.input(x.clone());
        let (w1v, b1v, w2v) = (tape.param(p, w1), tape.param(p, b1), tape.param(p, w2));
        let z = tape.matmul(xi, w1v).unwrap();
        let z = tape.add(z, b1v).unwrap();
        let a = tape.tanh(z);
        let s = tape.silu(z);
        let h = tape.concat(&[a, s]).unwrap();
        let o = tape.matmul(h, w2v).unwrap();
        let e = tape.exp(o);
        let sq = tape.square(o);
        let pos = tape.affine(sq, 1.0, 1.0);
        let l = tape.log(pos).unwrap();
        let m = tape.mul(e, l).unwrap();
        let r = tape.sum_last(m).unwrap();
        let s1 = tape.mean(r);
        let s2 = tape.sum(a);
        let s2 = tape.affine(s2, 0.1, 0.0);
        tape.add(s1, s2).unwrap()
    };
    let mut tape = Tape::new();
    let loss = net(&mut tape, &params);
    params.zero_gradients();
    tape.backward(loss, &mut params).unwrap();
    let analytic = params.flat_gradients();
    let numeric = numeric_gradient(&mut params, 1e-5, &mut |p| {
        let mut t = Tape::new();
        let l = net(&mut t, p);
        t.value(l).item()
    });
    let err = relative_error(&analytic, &numeric);
    checks.push(check("autodiff network gradient", err <= 1e-6, format!("rel err {err:.2e}")));

    // flow-matching loss on a small model
    let cfg = ModelConfig {
        data_dim: 2,
        num_conditions: 3,
        hidden: vec![6, 6],
        time_features: 4,
        condition_embedding: 3,
    };
    let mut model = VelocityFieldModel::new(cfg, 5);
    let x0 = random_array(&mut rng, &[6, 2], 1.0);
    let eps = random_array(&mut rng, &[6, 2], 1.0);
    let times: Vec<f64> = (0..6).map(|_| rng.random::<f64>()).collect();
    let conds: Vec<usize> = (0..6).map(|i| i % 3).collect();
    let mut tape = Tape::new();
    let loss = flow_matching_loss(&model, &mut tape, &x0, &eps, &times, &conds).unwrap();
    model.params_mut().zero_gradients();
    tape.backward(loss, model.params_mut()).unwrap();
    let analytic = model.params().flat_gradients();
    let mut probe = model.clone();
    let mut values = model.params().clone();
    let numeric = numeric_gradient(&mut values, 1e-5, &mut |p| {
        *probe.params_mut() = p.clone();
        let mut t = Tape::new();
        let l = flow_matching_loss(&probe, &mut t, &x0, &eps, &times, &conds).unwrap();
        t.value(l).item()
    });
    let err = relative_error(&analytic, &numeric);
    checks.push(check("flow-matching loss gradient", err <= 1e-5, format!("rel err {err:.2e}")));

    // GRPO loss through a single Gaussian transition
    let mut params = ParamSet::new();
    let mu = params.add("mu", DenseArray::vector(vec![0.3, -0.2]));
    let dest = [0.5, 0.1];
    let std = 0.4;
    let old = samplers::transition_logprob(&dest, &[0.25, -0.1], std).unwrap();
    let cfg = ObjectiveConfig {
        clip_eps: 0.2,
        ..ObjectiveConfig::default()
    };
    let grpo_net = |tape: &mut Tape, p: &ParamSet| {
        let m = tape.param(p, mu);
        let m = tape.reshape(m, &[1, 2]).unwrap();
        let d = tape.input(DenseArray::new(vec![1, 2], dest.to_vec()).unwrap());
        let diff = tape.sub(d, m).unwrap();
        let sq = tape.square(diff);
        let ss = tape.sum_last(sq).unwrap();
        let (scale, shift) = samplers::logprob_coefficients(std, 2);
        let lp = tape.affine(ss, scale, shift);
        grpo::grpo_loss(tape, lp, &[old], &[1.3], &cfg).unwrap().0
    };
    let mut tape = Tape::new();
    let loss = grpo_net(&mut tape, &params);
    params.zero_gradients();
    tape.backward(loss, &mut params).unwrap();
    let analytic = params.flat_gradients();
    let numeric = numeric_gradient(&mut params, 1e-5, &mut |p| {
        let mut t = Tape::new();
        let l = grpo_net(&mut t, p);
        t.value(l).item()
    });
    let err = relative_error(&analytic, &numeric);
    checks.push(check("grpo loss gradient", err <= 1e-5, format!("rel err {err:.2e}")));
    checks
}

fn density_suite() -> Vec<Check> {
    let mut checks = Vec::new();
    let (mean, std) = (0.3, 0.7);
    let (lo, hi, n) = (mean - 12.0 * std, mean + 12.0 * std, 20_000);
    let h = (hi - lo) / n as f64;
    let mut integral = 0.0;
    for i in 0..=n {
        let x = lo + i as f64 * h;
        let w = if i == 0 || i == n { 0.5 } else { 1.0 };
        integral += w * samplers::transition_logprob(&[x], &[mean], std).unwrap().exp() * h;
    }
    checks.push(check(
        "transition density integrates to one",
        (integral - 1.0).abs() <= 1e-4,
        format!("integral {integral:.8}"),
    ));

    // sde_step destinations against (mean, std) at 1e5 draws
    let field = AnalyticGaussianFlow::new(vec![1.0, -0.5], 0.5);
    let grid = TimeGrid::new(16).unwrap();
    let schedule = NoiseSchedule::for_grid(0.7, &grid);
    let x = DenseArray::new(vec![1, 2], vec![0.4, 0.9]).unwrap();
    let draws = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let xs = DenseArray::repeat_rows(x.values(), draws);
    let noise = samplers::standard_normal(&mut rng, draws, 2);
    let t = grid.time(10);
    let recs = samplers::sde_step(&field, &xs, t, grid.step_size(), &[0; 100_000], &schedule, &noise).unwrap();
    let expected_std = recs[0].std;
    let mut worst: f64 = 0.0;
    for j in 0..2 {
        let vals: Vec<f64> = recs.iter().map(|r| r.destination[j]).collect();
        let m = vals.iter().sum::<f64>() / draws as f64;
        let s = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (draws - 1) as f64).sqrt();
        let z_mean = (m - recs[0].mean[j]) / (expected_std / (draws as f64).sqrt());
        let z_std = (s - expected_std) / (expected_std / (2.0 * draws as f64).sqrt());
        worst = worst.max(z_mean.abs()).max(z_std.abs());
    }
    checks.push(check("sde step moments within 4 SE", worst <= 4.0, format!("max |z| {worst:.2}")));
    checks
}

fn equivalence_suite() -> Vec<Check> {
    let mut checks = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let model = VelocityFieldModel::new(ModelConfig::default(), 3);
    let grid = TimeGrid::new(16).unwrap();
    let schedule = NoiseSchedule::for_grid(0.0, &grid);
    let xs = random_array(&mut rng, &[1000, 2], 2.0);
    let conds: Vec<usize> = (0..1000).map(|i| i % 8).collect();
    let mut identical = true;
    for i in 1..=grid.steps() {
        let t = grid.time(i);
        let noise = samplers::standard_normal(&mut rng, 1000, 2);
        let ode = samplers::ode_step(&model, &xs, t, grid.step_size(), &conds).unwrap();
        let sde = samplers::sde_step(&model, &xs, t, grid.step_size(), &conds, &schedule, &noise).unwrap();
        identical &= sde
            .iter()
            .enumerate()
            .all(|(r, rec)| rec.destination.as_slice() == ode.row(r) && rec.std == 0.0);
    }
    checks.push(check("eta = 0 sde step equals ode step bitwise", identical, "1000 states x 16 times".into()));

    let settings = RolloutSettings::new(16, 0.7, 12, Granularities::new(vec![1, 2, 3]).unwrap()).unwrap();
    let centers = crate::flow_model::SyntheticDataset::ring(8, 4.0, 0.15).centers().to_vec();
    let rewards: Vec<Arc<dyn RewardModel>> = vec![Arc::new(ModeAffinity::new(&centers, 0.5))];
    let x_init = [0.3, -1.1];
    let batch = singular_rollout(&model, &x_init, 2, 14, &settings, &rewards, &mut rng).unwrap();
    let mut tape = Tape::new();
    let inputs = batch.assemble(&model, &mut tape).unwrap().expect("stochastic");
    let shared = tape.value(inputs.logp_new).values().to_vec();
    let per_branch: Vec<f64> = (0..12)
        .map(|g| {
            let v = model.velocity(&batch.shared_state, batch.t, batch.condition).unwrap();
            let mean = batch.coefficients.mean(&batch.shared_state, &v);
            samplers::transition_logprob(batch.branches.row(g), &mean, batch.coefficients.std).unwrap()
        })
        .collect();
    checks.push(check(
        "shared-velocity log-prob equals per-branch log-prob",
        shared == per_branch && shared == batch.logp_old,
        format!("{} branches", shared.len()),
    ));
    let (_, stats) = grpo::grpo_loss(&mut tape, inputs.logp_new, &inputs.logp_old, &inputs.advantages, &ObjectiveConfig::default()).unwrap();
    let mean_a = batch.mixed.values().iter().sum::<f64>() / 12.0;
    checks.push(check(
        "old policy gives unit ratios and loss = -mean(A)",
        stats.mean_abs_ratio_dev == 0.0 && (stats.loss + mean_a).abs() <= 1e-12,
        format!("loss {:.3e}, -mean(A) {:.3e}", stats.loss, -mean_a),
    ));
    checks
}

fn advantage_suite() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let (mut worst_mean, mut worst_std, mut worst_unguarded, mut shift_exact) = (0.0f64, 0.0f64, 0.0f64, true);
    let pop = |xs: &[f64]| {
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        (m, (xs.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt())
    };
    for _ in 0..10_000 {
        let g = rng.random_range(2..32);
        let raw: Vec<f64> = (0..g).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let (m0, s0) = pop(&raw);
        if s0 == 0.0 {
            continue;
        }
        // spread in [1, 100] keeps the guard's effect below 1e-6
        let spread = 10f64.powf(rng.random_range(0.0..2.0));
        let offset = rng.random_range(-50.0..50.0);
        let rewards: Vec<f64> = raw.iter().map(|r| (r - m0) / s0 * spread + offset).collect();
        let a = grpo::normalize_advantages(&RewardGroup::new(rewards.clone(), "r", 1)).unwrap();
        let (m, s) = pop(&a.0);
        worst_mean = worst_mean.max(m.abs());
        worst_std = worst_std.max((s - 1.0).abs());
        // without the guard the std is one at any scale
        let tiny: Vec<f64> = raw.iter().map(|r| r * 1e-3).collect();
        let (_, su) = pop(&grpo::normalize_with_guard(&tiny, 0.0).unwrap().0);
        worst_unguarded = worst_unguarded.max((su - 1.0).abs());
        let shifted: Vec<f64> = rewards.iter().map(|r| r + 0.5).collect();
        let b = grpo::normalize_advantages(&RewardGroup::new(shifted, "r", 1)).unwrap();
        shift_exact &= a.0.iter().zip(&b.0).all(|(x, y)| (x - y).abs() <= 1e-9);
    }
    let zero = grpo::normalize_advantages(&RewardGroup::new(vec![2.5; 7], "r", 1)).unwrap();
    let ref123 = grpo::normalize_advantages(&RewardGroup::new(vec![1.0, 2.0, 3.0], "r", 1)).unwrap();
    vec![
        check("advantages have zero mean", worst_mean <= 1e-9, format!("max |mean| {worst_mean:.2e}")),
        check("advantages have unit std", worst_std <= 1e-6, format!("max dev {worst_std:.2e}")),
        check("unguarded advantages have unit std", worst_unguarded <= 1e-6, format!("max dev {worst_unguarded:.2e}")),
        check("advantages are shift invariant", shift_exact, "10^4 groups".into()),
        check("zero-variance group gives zeros", zero.0.iter().all(|&a| a == 0.0), format!("{:?}", zero.0)),
        check(
            "[1, 2, 3] normalises to ±1.2247",
            (ref123.0[0] + 1.2247).abs() <= 1e-4 && ref123.0[1] == 0.0 && (ref123.0[2] - 1.2247).abs() <= 1e-4,
            format!("{:?}", ref123.0),
        ),
    ]
}

fn checkpoint_suite() -> Vec<Check> {
    let cfg = ExperimentConfig::default();
    let model = VelocityFieldModel::new(cfg.model_config(), 9);
    let bytes = checkpoint::to_bytes(&model, &cfg);
    let back = checkpoint::from_bytes(&bytes, &cfg);
    let exact = back.as_ref().is_ok_and(|m| m.params().flat_values() == model.params().flat_values());
    let truncated = checkpoint::from_bytes(&bytes[..bytes.len() / 2], &cfg).is_err();
    let round = ExperimentConfig::parse(&cfg.serialize()).is_ok_and(|c| c == cfg);
    vec![
        check("checkpoint round trip is exact", exact, format!("{} bytes", bytes.len())),
        check("truncated checkpoint is rejected", truncated, String::new()),
        check("config round trip", round, String::new()),
    ]
}

/// Seed of the SDE/ODE marginal comparison.
pub const MARGINAL_SEED: u64 = 20261014;

fn marginal_suite() -> Vec<Check> {
    let flow = AnalyticGaussianFlow::new(vec![1.0, -0.5], 1.0);
    let grid = TimeGrid::new(64).unwrap();
    let schedule = NoiseSchedule::for_grid(0.7, &grid);
    let n = 8192;
    let mut rng = ChaCha8Rng::seed_from_u64(MARGINAL_SEED);
    let x_ode = samplers::standard_normal(&mut rng, n, 2);
    let x_sde = samplers::standard_normal(&mut rng, n, 2);
    let conds = vec![0; n];
    let plan = samplers::grid_plan(&grid, 64, 1);
    let ode = samplers::ode_integrate(&flow, &x_ode, &conds, &plan).unwrap();
    let (_, sde) = samplers::sde_trajectories(&flow, &x_sde, &conds, &grid, &schedule, &mut rng).unwrap();
    let worst = moment_z_scores(&ode, &sde).into_iter().fold(0.0, f64::max);
    vec![check("sde and ode terminal moments agree within 4 SE", worst <= 4.0, format!("max |z| {worst:.2}"))]
}

/// |z| of the difference in mean and in variance, per coordinate, between
/// two independent samples.
pub fn moment_z_scores(a: &DenseArray, b: &DenseArray) -> Vec<f64> {
    let stats = |x: &DenseArray, j: usize| {
        let n = x.rows() as f64;
        let col: Vec<f64> = (0..x.rows()).map(|r| x.row(r)[j]).collect();
        let m = col.iter().sum::<f64>() / n;
        let c2: Vec<f64> = col.iter().map(|v| (v - m).powi(2)).collect();
        let var = c2.iter().sum::<f64>() / (n - 1.0);
        let m4 = c2.iter().map(|v| v * v).sum::<f64>() / n;
        (m, var, var / n, (m4 - var * var) / n)
    };
    let mut out = Vec::new();
    for j in 0..a.cols() {
        let (ma, va, sma, sva) = stats(a, j);
        let (mb, vb, smb, svb) = stats(b, j);
        out.push((ma - mb).abs() / (sma + smb).sqrt());
        out.push((va - vb).abs() / (sva + svb).sqrt());
    }
    out
}

pub const SUITES: [&str; 6] = ["gradients", "densities", "equivalence", "advantages", "marginals", "checkpoint"];

pub fn run_suite(name: &str) -> Option<SuiteReport> {
    let start = Instant::now();
    let (name, checks) = match name {
        "gradients" => ("gradients", gradient_suite()),
        "densities" => ("densities", density_suite()),
        "equivalence" => ("equivalence", equivalence_suite()),
        "advantages" => ("advantages", advantage_suite()),
        "marginals" => ("marginals", marginal_suite()),
        "checkpoint" => ("checkpoint", checkpoint_suite()),
        _ => return None,
    };
    Some(SuiteReport {
        name,
        checks,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn run_all() -> Vec<SuiteReport> {
    SUITES.iter().filter_map(|s| run_suite(s)).collect()
}
