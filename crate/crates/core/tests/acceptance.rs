//! Acceptance gate: one PASS/FAIL line per criterion, then a single assert.
//!
//! The lines go straight to stderr, so plain `cargo test` shows them.

use std::io::Write as _;
use std::sync::Arc;
use std::time::Instant;

use g2rpo::autodiff::Tape;
use g2rpo::engine::{
    baseline_full_sde_rollout, evaluate_policy, singular_rollout, singular_rollout_with_noise, Granularities, RolloutSettings,
    SamplerMode, TrainableBatch, TrainingHistory,
};
use g2rpo::flow_model::{ModelConfig, VelocityFieldModel};
use g2rpo::grpo::{self, AdvantageVector, RewardGroup};
use g2rpo::harness::{self, checkpoint, eval, metrics, selftest, ExperimentConfig};
use g2rpo::rewards::{ModeAffinity, RewardModel};
use g2rpo::rng::{self, tag};
use g2rpo::samplers::standard_normal;

const DESK: &str = include_str!("../../../configs/desk.cfg");
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const TRAINING_REWARD: &str = "mode_affinity";

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

fn suite_verdict(names: &[&str], budget_seconds: f64) -> Verdict {
    let mut passed = true;
    let mut parts = Vec::new();
    for name in names {
        let report = selftest::run_suite(name).expect("known suite");
        passed &= report.passed() && report.seconds < budget_seconds;
        for c in &report.checks {
            if !c.passed {
                parts.push(format!("FAILED {} ({})", c.name, c.detail));
            } else {
                parts.push(format!("{} ({})", c.name, c.detail));
            }
        }
        parts.push(format!("{name} took {:.1}s", report.seconds));
    }
    verdict(passed, parts.join("; "))
}

fn desk_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::parse(DESK).expect("desk config parses");
    cfg.seed = seed;
    cfg
}

fn copy_model(model: &VelocityFieldModel, cfg: &ExperimentConfig) -> VelocityFieldModel {
    checkpoint::from_bytes(&checkpoint::to_bytes(model, cfg), cfg).expect("checkpoint round trip")
}

fn heldout_score(model: &VelocityFieldModel, cfg: &ExperimentConfig) -> f64 {
    let suite = harness::reward_suite(cfg).unwrap();
    let (_, heldout) = cfg.condition_split();
    let summary = evaluate_policy(model, &heldout, cfg.eval_draws, cfg.grid_steps, suite.training(), None, cfg.seed).unwrap();
    summary.scores[TRAINING_REWARD].mean
}

fn finetuned(pre: &VelocityFieldModel, cfg: &ExperimentConfig, mode: SamplerMode) -> (VelocityFieldModel, TrainingHistory) {
    let mut cfg = cfg.clone();
    cfg.mode = mode;
    let mut model = copy_model(pre, &cfg);
    let history = harness::finetune(&cfg, &mut model, None).unwrap();
    (model, history)
}

struct SeedRun {
    seed: u64,
    cfg: ExperimentConfig,
    pretrained: VelocityFieldModel,
    singular: VelocityFieldModel,
    initial: f64,
    singular_final: f64,
    broadcast_final: f64,
    singular_history: TrainingHistory,
    broadcast_history: TrainingHistory,
}

fn desk_run(seed: u64) -> SeedRun {
    let cfg = desk_config(seed);
    let (pretrained, _) = harness::pretrain(&cfg).unwrap();
    let initial = heldout_score(&pretrained, &cfg);
    let (singular, singular_history) = finetuned(&pretrained, &cfg, SamplerMode::Singular);
    let (broadcast, broadcast_history) = finetuned(&pretrained, &cfg, SamplerMode::FullSdeBroadcast);
    SeedRun {
        seed,
        initial,
        singular_final: heldout_score(&singular, &cfg),
        broadcast_final: heldout_score(&broadcast, &cfg),
        cfg,
        pretrained,
        singular,
        singular_history,
        broadcast_history,
    }
}

fn criterion_oracles() -> Verdict {
    suite_verdict(&["gradients", "densities"], 120.0)
}

fn criterion_equivalence() -> Verdict {
    suite_verdict(&["equivalence"], f64::INFINITY)
}

fn criterion_marginals() -> Verdict {
    suite_verdict(&["marginals"], 60.0)
}

fn criterion_advantages() -> Verdict {
    let mut v = suite_verdict(&["advantages"], f64::INFINITY);
    // hand-computed reference: mean 2, population std sqrt(2/3)
    let a = grpo::normalize_advantages(&RewardGroup::new(vec![1.0, 2.0, 3.0], "r", 1)).unwrap();
    let expected = 1.0 / (2.0f64 / 3.0).sqrt();
    let ok = (a.0[0] + expected).abs() <= 1e-4 && a.0[1].abs() <= 1e-12 && (a.0[2] - expected).abs() <= 1e-4;
    v.passed &= ok;
    v.detail.push_str(&format!("; [1,2,3] -> {:.5?}", a.0));
    v
}

fn ring_rewards() -> Vec<Arc<dyn RewardModel>> {
    let centers = g2rpo::flow_model::SyntheticDataset::ring(8, 4.0, 0.15).centers().to_vec();
    vec![Arc::new(ModeAffinity::new(&centers, 0.5))]
}

fn criterion_credit_confinement() -> Verdict {
    let policy = VelocityFieldModel::new(ModelConfig::default(), 11);
    let settings = RolloutSettings::new(16, 0.7, 12, Granularities::new(vec![1, 2, 3]).unwrap()).unwrap();
    let rewards = ring_rewards();
    let x_init = [0.4, -0.9];
    let (cond, k) = (3, 5);
    let frozen = standard_normal(&mut rng::stream(99, &[tag::BRANCH_NOISE, 0, 0, k as u64]), 12, 2);
    let reference = singular_rollout_with_noise(&policy, &x_init, cond, k, &settings, &rewards, &frozen).unwrap();

    // unrelated streams are drawn from in between and used for other steps
    let mut identical = true;
    for perturb in 0..8u64 {
        let mut other = rng::stream(perturb, &[tag::TRAJECTORY_NOISE, perturb]);
        let _ = standard_normal(&mut other, 37, 2);
        let other_k = 1 + (perturb as usize % 8);
        if other_k != k {
            singular_rollout(&policy, &x_init, cond, other_k, &settings, &rewards, &mut other).unwrap();
        }
        let again = singular_rollout_with_noise(&policy, &x_init, cond, k, &settings, &rewards, &frozen).unwrap();
        identical &= again.terminals == reference.terminals && again.mixed == reference.mixed;
    }

    // changing branch g's noise moves only branch g's terminals
    let mut nudged = frozen.clone();
    let g = 7;
    nudged.values_mut()[g * 2] += 0.5;
    let moved = singular_rollout_with_noise(&policy, &x_init, cond, k, &settings, &rewards, &nudged).unwrap();
    let mut confined = true;
    for (a, b) in moved.terminals.iter().zip(&reference.terminals) {
        for r in 0..12 {
            let same = a.row(r) == b.row(r);
            confined &= if r == g { !same } else { same };
        }
    }

    let mut r = rng::stream(5, &[tag::TRAJECTORY_NOISE]);
    let baseline = baseline_full_sde_rollout(&policy, &x_init, cond, &settings, &rewards, None, &mut r).unwrap();
    let mut tape = Tape::new();
    let inputs = baseline.assemble(&policy, &mut tape).unwrap().expect("stochastic");
    let steps = baseline.train_steps;
    let broadcast = inputs.advantages.len() == 12 * steps
        && inputs
            .advantages
            .chunks(steps)
            .zip(baseline.advantages.values())
            .all(|(chunk, &a)| chunk.iter().all(|&x| x == a))
        && baseline.step_advantages().iter().all(|row| row.iter().all(|&x| x == row[0]));

    verdict(
        identical && confined && broadcast,
        format!(
            "frozen-noise terminals identical under 8 perturbations: {identical}; nudging branch {g} moves only branch {g}: {confined}; baseline advantages constant over {steps} steps: {broadcast}"
        ),
    )
}

fn criterion_learning(runs: &[SeedRun]) -> Verdict {
    let improved = runs.iter().filter(|r| r.singular_final > r.initial).count();
    let wins = runs.iter().filter(|r| r.singular_final >= r.broadcast_final).count();
    let mean = |f: fn(&SeedRun) -> f64| runs.iter().map(f).sum::<f64>() / runs.len() as f64;
    let (ms, mb) = (mean(|r| r.singular_final), mean(|r| r.broadcast_final));
    let matched = runs.iter().all(|r| {
        let (s, b) = (&r.singular_history, &r.broadcast_history);
        s.rows.last().map(|x| x.rm_calls) == b.rows.last().map(|x| x.rm_calls) && s.optimizer_steps == b.optimizer_steps
    });
    let per_seed: Vec<String> = runs
        .iter()
        .map(|r| format!("seed {}: {:.4} -> {:.4} (baseline {:.4})", r.seed, r.initial, r.singular_final, r.broadcast_final))
        .collect();
    verdict(
        improved == runs.len() && ms >= mb && wins >= 4 && matched,
        format!(
            "improved {improved}/{}; wins {wins}/{}; mean final {ms:.4} vs baseline {mb:.4}; budgets matched: {matched}; {}",
            runs.len(),
            runs.len(),
            per_seed.join(", ")
        ),
    )
}

fn degenerate_synthetic() -> bool {
    let mut r = rng::stream(2, &[tag::CONDITIONS]);
    let base = standard_normal(&mut r, 1, 12).into_values();
    let a = grpo::normalize_advantages(&RewardGroup::new(base, "r", 1)).unwrap();
    (1..=3).all(|j| {
        let mixed = grpo::mix_advantages(&vec![a.clone(); j]).unwrap();
        let scaled: Vec<f64> = a.values().iter().map(|x| j as f64 * x).collect();
        mixed.values() == scaled.as_slice() && mixed.argmax() == a.argmax()
    })
}

/// A zero velocity field makes every granularity's ODE the identity, so a
/// real rollout produces identical per-granularity rewards.
fn degenerate_rollout() -> bool {
    let mut policy = VelocityFieldModel::new(ModelConfig::default(), 4);
    policy.zero_output_layer();
    let settings = RolloutSettings::new(16, 0.7, 12, Granularities::new(vec![1, 2, 3]).unwrap()).unwrap();
    let mut r = rng::stream(8, &[tag::BRANCH_NOISE]);
    let batch = singular_rollout(&policy, &[1.0, 0.5], 0, 6, &settings, &ring_rewards(), &mut r).unwrap();
    let first: &AdvantageVector = &batch.granularity_advantages[0];
    let scaled: Vec<f64> = first.values().iter().map(|x| 3.0 * x).collect();
    batch.terminals.windows(2).all(|w| w[0] == w[1]) && batch.mixed.values() == scaled.as_slice() && batch.mixed.argmax() == first.argmax()
}

fn criterion_ablation(run: &SeedRun, dir: &std::path::Path) -> Verdict {
    let mut headers = Vec::new();
    let mut lines = Vec::new();
    let mut calls = Vec::new();
    for set in ["1", "1,2", "1,2,3"] {
        let mut cfg = run.cfg.clone();
        cfg.set("granularities", set).unwrap();
        let (_, history) = finetuned(&run.pretrained, &cfg, SamplerMode::Singular);
        let path = dir.join(format!("ablation_{}.csv", set.replace(',', "")));
        metrics::write_history(&history.rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        headers.push(text.lines().next().unwrap_or_default().to_string());
        lines.push(text.lines().count());
        calls.push(history.rows.last().map_or(0, |r| r.rm_calls));
    }
    let comparable = headers.windows(2).all(|w| w[0] == w[1]) && lines.iter().all(|&n| n == run.cfg.iterations + 2);
    // training calls scale with |Lambda|
    let proportional = calls[1] == 2 * calls[0] && calls[2] == 3 * calls[0];
    let (synthetic, rollout) = (degenerate_synthetic(), degenerate_rollout());
    verdict(
        comparable && proportional && synthetic && rollout,
        format!(
            "csv lines {lines:?} with shared header: {comparable}; reward calls {calls:?}; degenerate consistency synthetic {synthetic}, rollout {rollout}"
        ),
    )
}

fn criterion_varying_steps(runs: &[SeedRun]) -> Verdict {
    let steps = [8, 16, 32];
    let mut all = true;
    let mut parts = Vec::new();
    for run in runs {
        let suite = harness::reward_suite(&run.cfg).unwrap();
        let pre = eval::eval_varying_steps(&run.pretrained, &run.cfg, &suite, &steps).unwrap();
        let fin = eval::eval_varying_steps(&run.singular, &run.cfg, &suite, &steps).unwrap();
        for s in steps {
            let (p, f) = (pre.score(s, TRAINING_REWARD).unwrap(), fin.score(s, TRAINING_REWARD).unwrap());
            all &= f > p;
            parts.push(format!("seed {} T={s}: {p:.4} -> {f:.4}", run.seed));
        }
    }
    verdict(all, parts.join(", "))
}

fn criterion_reproducibility(dir: &std::path::Path) -> Verdict {
    let mut cfg = desk_config(7);
    cfg.iterations = 40;
    let a = harness::run_pipeline(&cfg, &dir.join("a"), Some(1)).unwrap();
    let b = harness::run_pipeline(&cfg, &dir.join("b"), Some(3)).unwrap();
    let same = |x: &std::path::Path, y: &std::path::Path| std::fs::read(x).unwrap() == std::fs::read(y).unwrap();
    let ckpts = same(&a.pretrained, &b.pretrained) && same(&a.finetuned, &b.finetuned);
    let csv = match (&a.metrics, &b.metrics) {
        (Some(x), Some(y)) => same(x, y),
        _ => false,
    };
    let trained = !same(&a.pretrained, &a.finetuned);
    verdict(
        ckpts && csv && trained,
        format!("checkpoints identical: {ckpts}; metrics identical: {csv}; fine-tuning changed the weights: {trained} (1 vs 3 workers)"),
    )
}

#[test]
fn acceptance_criteria() {
    let dir = tempfile::tempdir().unwrap();
    let mut results: Vec<(usize, &str, Verdict)> = Vec::new();
    results.push((1, "oracle suite", criterion_oracles()));
    results.push((2, "equivalence suite", criterion_equivalence()));
    results.push((3, "marginal preservation", criterion_marginals()));
    results.push((4, "advantage properties", criterion_advantages()));
    results.push((5, "credit confinement", criterion_credit_confinement()));

    let start = Instant::now();
    let runs: Vec<SeedRun> = SEEDS.iter().map(|&s| desk_run(s)).collect();
    let desk_seconds = start.elapsed().as_secs_f64() / SEEDS.len() as f64;
    let mut learning = criterion_learning(&runs);
    learning.detail.push_str(&format!("; {desk_seconds:.0}s per seed"));
    results.push((6, "desk-scale learning", learning));
    results.push((7, "granularity ablation", criterion_ablation(&runs[0], dir.path())));
    results.push((8, "varying-step evaluation", criterion_varying_steps(&runs)));
    results.push((9, "reproducibility", criterion_reproducibility(dir.path())));

    // written past the test harness's capture so the lines show in every run
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err);
    for (n, name, v) in &results {
        let _ = writeln!(err, "[{}] criterion {n} {name}: {}", if v.passed { "PASS" } else { "FAIL" }, v.detail);
    }
    drop(err);
    let failed: Vec<usize> = results.iter().filter(|r| !r.2.passed).map(|r| r.0).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
