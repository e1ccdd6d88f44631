use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
hidden = 8,8
time_features = 4
condition_embedding = 4
pretrain_steps = 30
pretrain_batch = 32
group_size = 4
candidates = first:2
granularities = 1,2
iterations = 2
lr = 1e-3
eval_draws = 64
curve_draws = 16
eval_steps = 4,8
";

fn g2rpo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_g2rpo")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn setup() -> (tempfile::TempDir, std::path::PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let out = g2rpo(&["pretrain", "--config", s(&cfg), "--out", s(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    (dir, cfg)
}

#[test]
fn zero_iteration_finetune_copies_the_checkpoint() {
    let (dir, cfg) = setup();
    let ckpt = dir.path().join("pretrained.ckpt");
    let out = g2rpo(&["finetune", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--iters", "0", "--out", s(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let copy = dir.path().join("finetuned_singular.ckpt");
    assert_eq!(std::fs::read(&ckpt).unwrap(), std::fs::read(&copy).unwrap());
    assert!(!dir.path().join("metrics_singular.csv").exists());
}

#[test]
fn finetune_writes_metrics_and_plot_renders_them() {
    let (dir, cfg) = setup();
    let ckpt = dir.path().join("pretrained.ckpt");
    for mode in ["singular", "broadcast"] {
        let out = g2rpo(&["finetune", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--mode", mode, "--out", s(dir.path())]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let csv = std::fs::read_to_string(dir.path().join(format!("metrics_{mode}.csv"))).unwrap();
        assert_eq!(csv.lines().count(), 1 + 3);
    }
    let svg = dir.path().join("plots/r.svg");
    let out = g2rpo(&[
        "plot",
        s(&dir.path().join("metrics_singular.csv")),
        s(&dir.path().join("metrics_broadcast.csv")),
        "--out",
        s(&svg),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&svg).unwrap();
    assert_eq!(text.matches("<polyline").count(), 2);
}

#[test]
fn eval_is_deterministic() {
    let (dir, cfg) = setup();
    let ckpt = dir.path().join("pretrained.ckpt");
    let run = || {
        let out = g2rpo(&["eval", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--eval-steps", "4,8", "--out", s(dir.path())]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        (out.stdout, std::fs::read(dir.path().join("eval.csv")).unwrap())
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    let text = String::from_utf8(a.0).unwrap();
    assert!(text.starts_with("steps,"));
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn checkpoint_from_another_architecture_is_refused() {
    let (dir, _) = setup();
    let other = dir.path().join("wide.cfg");
    std::fs::write(&other, TINY.replace("hidden = 8,8", "hidden = 16")).unwrap();
    let out = g2rpo(&["eval", "--config", s(&other), "--checkpoint", s(&dir.path().join("pretrained.ckpt")), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("digest"));
}

#[test]
fn selftest_passes() {
    let out = g2rpo(&["selftest"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{text}");
    assert_eq!(text.lines().filter(|l| l.starts_with("[PASS]")).count(), 6);
}

#[test]
fn bad_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "eta = -0.5\n").unwrap();
    let out = g2rpo(&["pretrain", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("`eta`"));
}

#[test]
fn bad_flags_are_rejected() {
    assert!(!g2rpo(&["pretrain", "--no-such-flag"]).status.success());
    let dir = tempfile::tempdir().unwrap();
    let out = g2rpo(&["finetune", "--checkpoint", "x", "--mode", "sometimes", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--mode"));
}
