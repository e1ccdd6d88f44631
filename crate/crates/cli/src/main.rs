use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use g2rpo::engine::SamplerMode;
use g2rpo::harness::{self, checkpoint, eval, metrics, plot, selftest, ExperimentConfig};

#[derive(Parser)]
#[command(name = "g2rpo", version, about = "Fine-tune toy flow-matching models with group-relative policy optimisation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// key = value configuration file; unspecified fields keep defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, default_value = "runs")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the base velocity field and write a checkpoint
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Fine-tune a checkpoint and write the result plus metrics
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to start from
        #[arg(long)]
        checkpoint: PathBuf,
        /// singular or broadcast
        #[arg(long)]
        mode: Option<String>,
        /// Overrides the configured iteration count
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Score a checkpoint on held-out conditions at several step counts
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated inference step counts
        #[arg(long, value_delimiter = ',')]
        eval_steps: Option<Vec<usize>>,
    },
    /// Run the oracle and invariant suites
    Selftest,
    /// Render metrics CSVs to an SVG line chart
    Plot {
        /// Metrics CSV files, one series each
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Column to plot
        #[arg(long, default_value = "mode_affinity_mean")]
        column: String,
        #[arg(long, default_value = "runs/rewards.svg")]
        out: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn run(cli: Cli) -> Result<bool> {
    let threads = harness::threads_from_env();
    match cli.command {
        Command::Pretrain { common } => {
            let cfg = load_config(&common)?;
            create_dir(&common.out)?;
            let (model, losses) = harness::pretrain(&cfg)?;
            let path = common.out.join("pretrained.ckpt");
            checkpoint::write(&model, &cfg, &path)?;
            if let Some(last) = losses.last() {
                println!("final flow-matching loss {}", metrics::format_g6(*last));
            }
            println!("wrote {}", path.display());
        }
        Command::Finetune {
            common,
            checkpoint: ckpt,
            mode,
            iters,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(m) = mode {
                cfg.mode = m.parse::<SamplerMode>().context("flag --mode")?;
            }
            if let Some(n) = iters {
                cfg.iterations = n;
            }
            cfg.validate()?;
            let mut model = checkpoint::read(&ckpt, &cfg)?;
            create_dir(&common.out)?;
            let history = harness::finetune(&cfg, &mut model, threads)?;
            let out_ckpt = common.out.join(format!("finetuned_{}.ckpt", cfg.mode));
            if history.rows.is_empty() {
                // nothing trained: reproduce the input bytes exactly
                std::fs::copy(&ckpt, &out_ckpt).with_context(|| format!("copying to {}", out_ckpt.display()))?;
            } else {
                checkpoint::write(&model, &cfg, &out_ckpt)?;
                let csv = common.out.join(format!("metrics_{}.csv", cfg.mode));
                metrics::write_history(&history.rows, &csv).with_context(|| format!("writing {}", csv.display()))?;
                println!("wrote {}", csv.display());
            }
            println!(
                "wrote {} ({} updates, {} skipped)",
                out_ckpt.display(),
                history.optimizer_steps,
                history.skipped_updates
            );
        }
        Command::Eval {
            common,
            checkpoint: ckpt,
            eval_steps,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(steps) = eval_steps {
                cfg.eval_steps = steps;
            }
            cfg.validate()?;
            let model = checkpoint::read(&ckpt, &cfg)?;
            let suite = harness::reward_suite(&cfg)?;
            let table = eval::eval_varying_steps(&model, &cfg, &suite, &cfg.eval_steps)?;
            create_dir(&common.out)?;
            let path = common.out.join("eval.csv");
            table.write(&path).with_context(|| format!("writing {}", path.display()))?;
            print!("{}", table.to_csv());
        }
        Command::Selftest => {
            let reports = selftest::run_all();
            let mut ok = true;
            for r in &reports {
                println!("[{}] {} ({:.1}s)", if r.passed() { "PASS" } else { "FAIL" }, r.name, r.seconds);
                for c in &r.checks {
                    println!("    {} {}: {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail);
                }
                ok &= r.passed();
            }
            return Ok(ok);
        }
        Command::Plot { inputs, column, out } => {
            let mut series = Vec::new();
            for path in &inputs {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                let table = metrics::parse_csv(&text).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
                let (Some(x), Some(y)) = (table.column("iteration"), table.column(&column)) else {
                    bail!("{}: no `iteration` or `{column}` column", path.display());
                };
                let label = path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
                series.push(plot::Series {
                    label,
                    points: x.into_iter().zip(y).collect(),
                });
            }
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                create_dir(dir)?;
            }
            let svg = plot::line_chart(&column, "iteration", &column, &series);
            std::fs::write(&out, svg).with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {}", out.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
