use std::sync::Arc;

use g2rpo::autodiff::{AdamW, Tape};
use g2rpo::engine::{
    baseline_full_sde_rollout, collect_rollouts, ode_prefix, singular_rollout, train_step, training_loop, CandidateSteps,
    Granularities, PromptRollouts, RolloutSettings, SamplerMode, TrainConfig, TrainableBatch, UpdateAggregation,
};
use g2rpo::flow_model::{ModelConfig, SyntheticDataset, VelocityFieldModel};
use g2rpo::grpo::{self, ObjectiveConfig};
use g2rpo::harness::{self, ExperimentConfig};
use g2rpo::rewards::{ModeAffinity, RewardModel, RewardSuite};
use g2rpo::rng::{self, tag};
use g2rpo::samplers::{grid_plan, ode_integrate};

fn rewards() -> Vec<Arc<dyn RewardModel>> {
    let centers = SyntheticDataset::ring(8, 4.0, 0.15).centers().to_vec();
    vec![Arc::new(ModeAffinity::new(&centers, 0.5))]
}

fn small_model(seed: u64) -> VelocityFieldModel {
    let cfg = ModelConfig {
        hidden: vec![16, 16],
        time_features: 8,
        condition_embedding: 4,
        ..ModelConfig::default()
    };
    VelocityFieldModel::new(cfg, seed)
}

fn settings(eta: f64, g: usize) -> RolloutSettings {
    RolloutSettings::new(16, eta, g, Granularities::new(vec![1, 2, 3]).unwrap()).unwrap()
}

fn train_config(mode: SamplerMode, iterations: usize) -> TrainConfig {
    TrainConfig {
        mode,
        grid_steps: 16,
        eta: 0.7,
        candidates: CandidateSteps::leading(4, 16).unwrap(),
        granularities: Granularities::new(vec![1, 2]).unwrap(),
        objective: ObjectiveConfig {
            group_size: 6,
            ..ObjectiveConfig::default()
        },
        optimizer: AdamW::new(1e-3, 1e-4),
        iterations,
        prompts_per_iteration: 2,
        aggregation: UpdateAggregation::PerStep,
        baseline: Default::default(),
        curve_draws: 32,
        seed: 5,
        threads: None,
        record_wall_clock: false,
    }
}

#[test]
fn shared_state_is_the_deterministic_prefix() {
    let policy = small_model(1);
    let s = settings(0.7, 6);
    let x = [0.2, -1.3];
    for k in [1, 4, 9, 16] {
        let batch = singular_rollout(&policy, &x, 2, k, &s, &rewards(), &mut rng::stream(0, &[k as u64])).unwrap();
        let prefix = ode_prefix(&policy, &x, 2, k, &s.grid).unwrap();
        assert_eq!(batch.shared_state, prefix, "k = {k}");
        // the same prefix as a plain ODE run over the first T - k grid steps
        let x0 = g2rpo::autodiff::DenseArray::repeat_rows(&x, 1);
        let steps: Vec<_> = grid_plan(&s.grid, 16, 1).into_iter().take(16 - k).collect();
        let ode = ode_integrate(&policy, &x0, &[2], &steps).unwrap();
        assert_eq!(ode.row(0), prefix.as_slice());
        assert!(batch.transitions.iter().all(|r| r.t_from == s.grid.time(k)));
    }
}

#[test]
fn zero_eta_gives_identical_branches_and_no_loss_terms() {
    let policy = small_model(2);
    let batch = singular_rollout(&policy, &[1.0, 0.0], 0, 3, &settings(0.0, 6), &rewards(), &mut rng::stream(1, &[])).unwrap();
    assert!(!batch.is_stochastic());
    assert!(batch.logp_old.is_empty());
    assert!(batch.mixed.values().iter().all(|&a| a == 0.0));
    for r in 1..6 {
        assert_eq!(batch.branches.row(r), batch.branches.row(0));
    }
    let mut tape = Tape::new();
    assert!(batch.assemble(&policy, &mut tape).unwrap().is_none());
}

#[test]
fn singular_training_uses_one_forward_and_baseline_uses_g() {
    let policy = small_model(3);
    let g = 6;
    let s = settings(0.7, g);
    let single = singular_rollout(&policy, &[0.1, 0.1], 1, 2, &s, &rewards(), &mut rng::stream(2, &[])).unwrap();
    let base = baseline_full_sde_rollout(&policy, &[0.1, 0.1], 1, &s, &rewards(), None, &mut rng::stream(3, &[])).unwrap();
    let count = |b: &dyn TrainableBatch| {
        let before = policy.forward_calls();
        let mut tape = Tape::new();
        let inputs = b.assemble(&policy, &mut tape).unwrap().unwrap();
        (policy.forward_calls() - before, tape.value(inputs.logp_new).len())
    };
    assert_eq!(count(&single), (1, g));
    assert_eq!(count(&base), (g, g * 16));
}

#[test]
fn reward_calls_follow_group_structure() {
    let policy = small_model(4);
    let s = settings(0.7, 6);
    let single = singular_rollout(&policy, &[0.1, 0.1], 1, 2, &s, &rewards(), &mut rng::stream(2, &[])).unwrap();
    let base = baseline_full_sde_rollout(&policy, &[0.1, 0.1], 1, &s, &rewards(), Some(4), &mut rng::stream(3, &[])).unwrap();
    assert_eq!(single.reward_calls, 3 * 6);
    assert_eq!(base.reward_calls, 6);
    assert_eq!(base.step_advantages()[0].len(), 4);
}

#[test]
fn rollouts_are_seeded_and_independent_of_worker_count() {
    let policy = small_model(5);
    let conditions = [0, 1, 2, 3, 4, 5];
    for mode in [SamplerMode::Singular, SamplerMode::FullSdeBroadcast] {
        let cfg = train_config(mode, 1);
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| collect_rollouts(&policy, &cfg, &rewards(), &conditions, 1).unwrap())
        };
        let (a, b) = (run(1), run(4));
        assert_eq!(a.len(), 2);
        for (pa, pb) in a.iter().zip(&b) {
            match (pa, pb) {
                (PromptRollouts::Singular(x), PromptRollouts::Singular(y)) => assert_eq!(x, y),
                (PromptRollouts::Baseline(x), PromptRollouts::Baseline(y)) => assert_eq!(x, y),
                _ => panic!("mode changed between runs"),
            }
        }
        let other = collect_rollouts(&policy, &cfg, &rewards(), &conditions, 2).unwrap();
        assert!(a[0].reward_calls() > 0);
        match (&a[0], &other[0]) {
            (PromptRollouts::Singular(x), PromptRollouts::Singular(y)) => assert_ne!(x[0].branches, y[0].branches),
            (PromptRollouts::Baseline(x), PromptRollouts::Baseline(y)) => assert_ne!(x[0].terminals, y[0].terminals),
            _ => unreachable!(),
        }
    }
}

#[test]
fn budgets_match_between_modes() {
    let policy = small_model(6);
    let conditions = [0, 1, 2];
    let single = train_config(SamplerMode::Singular, 1);
    let base = train_config(SamplerMode::FullSdeBroadcast, 1);
    let a = collect_rollouts(&policy, &single, &rewards(), &conditions, 1).unwrap();
    let b = collect_rollouts(&policy, &base, &rewards(), &conditions, 1).unwrap();
    let calls = |p: &[PromptRollouts]| p.iter().map(PromptRollouts::reward_calls).sum::<usize>();
    let updates = |p: &[PromptRollouts], cfg: &TrainConfig| p.iter().map(|x| x.update_groups(cfg).len()).sum::<usize>();
    assert_eq!(calls(&a), calls(&b));
    assert_eq!(updates(&a, &single), updates(&b, &base));
    assert_eq!(updates(&a, &single), 2 * 4);
}

#[test]
fn zero_iterations_leave_the_model_alone() {
    let mut policy = small_model(7);
    let before = policy.params().flat_values();
    let history = training_loop(&mut policy, &train_config(SamplerMode::Singular, 0), &rewards(), &[0, 1], &[2]).unwrap();
    assert!(history.rows.is_empty());
    assert_eq!(history.optimizer_steps, 0);
    assert_eq!(policy.params().flat_values(), before);
}

#[test]
fn training_history_layout() {
    let mut policy = small_model(8);
    let cfg = train_config(SamplerMode::Singular, 3);
    let history = training_loop(&mut policy, &cfg, &rewards(), &[0, 1, 3], &[2]).unwrap();
    assert_eq!(history.rows.len(), 4);
    assert_eq!(history.rows.iter().map(|r| r.iteration).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
    assert_eq!(history.rows[0].rm_calls, 0);
    let per_iter = 2 * 4 * 2 * 6;
    assert_eq!(history.rows[3].rm_calls, 3 * per_iter);
    assert_eq!(history.optimizer_steps + history.skipped_updates, 3 * 2 * 4);
    assert!(history.rows.iter().all(|r| r.seconds == 0.0));
}

#[test]
fn eval_only_scores_never_reach_training() {
    let mut cfg = ExperimentConfig::default();
    cfg.hidden = vec![8];
    cfg.iterations = 2;
    cfg.group_size = 4;
    cfg.curve_draws = 16;
    cfg.candidates = g2rpo::harness::config::CandidateSpec::First(2);
    let suite = RewardSuite::build(&cfg.rewards, &cfg.geometry()).unwrap();
    let mut model = harness::initial_model(&cfg);
    let (train, heldout) = cfg.condition_split();
    training_loop(&mut model, &cfg.train_config(None).unwrap(), suite.training(), &train, &heldout).unwrap();
    assert_eq!(suite.eval_only().calls(), 0);
}

/// Perturbs every parameter of `model` by a small seeded amount.
fn nudge(model: &mut VelocityFieldModel, seed: u64, scale: f64) {
    let noise_rng = &mut rng::stream(seed, &[tag::MODEL_INIT]);
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        let p = model.params_mut().value_mut(id);
        let n = g2rpo::samplers::standard_normal(noise_rng, 1, p.len());
        for (v, e) in p.values_mut().iter_mut().zip(n.values()) {
            *v += scale * e;
        }
    }
}

fn plain_loss(policy: &VelocityFieldModel, batches: &[&dyn TrainableBatch], cfg: &ObjectiveConfig) -> f64 {
    let mut total = 0.0;
    for b in batches {
        let mut tape = Tape::new();
        let inputs = b.assemble(policy, &mut tape).unwrap().unwrap();
        total += grpo::grpo_loss_value(tape.value(inputs.logp_new).values(), &inputs.logp_old, &inputs.advantages, cfg);
    }
    total / batches.len() as f64
}

#[test]
fn train_step_gradient_matches_finite_differences() {
    let cfg = ModelConfig {
        hidden: vec![4],
        time_features: 4,
        condition_embedding: 2,
        ..ModelConfig::default()
    };
    let sampler = VelocityFieldModel::new(cfg.clone(), 21);
    let s = settings(0.7, 5);
    let single = singular_rollout(&sampler, &[0.5, -0.2], 1, 3, &s, &rewards(), &mut rng::stream(9, &[])).unwrap();
    let base = baseline_full_sde_rollout(&sampler, &[0.5, -0.2], 1, &s, &rewards(), Some(5), &mut rng::stream(10, &[])).unwrap();
    let batches: [&dyn TrainableBatch; 2] = [&single, &base];
    let objective = ObjectiveConfig {
        kl_beta: 0.1,
        group_size: 5,
        ..ObjectiveConfig::default()
    };

    let mut trained = VelocityFieldModel::new(cfg.clone(), 21);
    nudge(&mut trained, 1, 0.02);
    let mut reference = VelocityFieldModel::new(cfg, 21);
    nudge(&mut reference, 1, 0.02);

    let outcome = train_step(&mut trained, &batches, &objective, &AdamW::new(1e-9, 0.0)).unwrap();
    assert!(outcome.applied);
    assert!(outcome.stats.mean_abs_ratio_dev > 0.0);
    let analytic = trained.params().flat_gradients();

    let h = 1e-6;
    let mut numeric = Vec::with_capacity(analytic.len());
    let ids: Vec<_> = reference.params().ids().collect();
    for id in ids {
        for i in 0..reference.params().value(id).len() {
            let orig = reference.params().value(id).values()[i];
            reference.params_mut().value_mut(id).values_mut()[i] = orig + h;
            let up = plain_loss(&reference, &batches, &objective);
            reference.params_mut().value_mut(id).values_mut()[i] = orig - h;
            let down = plain_loss(&reference, &batches, &objective);
            reference.params_mut().value_mut(id).values_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * h));
        }
    }
    let scale = numeric.iter().fold(1e-8f64, |m, g| m.max(g.abs()));
    let worst = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max) / scale;
    assert!(worst <= 1e-4, "relative gradient error {worst:.3e}");
    assert!((outcome.stats.loss - plain_loss(&reference, &batches, &objective)).abs() <= 1e-12);
}
