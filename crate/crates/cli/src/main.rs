use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use edeva_cli::config::{usage, RunConfig, DEFAULT_OUT};
use edeva_cli::{exit_code, pipeline};

/// Scenario-aware evaluation of multimodal trajectory predictors.
#[derive(Debug, Parser)]
#[command(name = "edeva", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML configuration; keys present in the file override flags.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Run directory.
    #[arg(long, global = true, env = "EDEVA_OUT", value_name = "DIR")]
    out: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for scenario-level parallelism.
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the scenario suite and run every predictor in closed loop.
    Simulate(SimulateArgs),
    /// Train the criticality classifier and report held-out precision.
    #[command(name = "train-scenario-nn")]
    Train(TrainArgs),
    /// Compute criticality and fused scores over the simulated suite.
    Evaluate(EvaluateArgs),
    /// Correlate evaluation methods with driving performance.
    Correlate(CorrelateArgs),
    /// Compare fusion ablations by their correlation with performance.
    Ablate(AblateArgs),
    /// Run simulate, train, evaluate, correlate, and ablate in sequence.
    Reproduce(SimulateArgs),
    /// Check a scenario suite file against the scenario invariants.
    Validate(ValidateArgs),
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Highway scenarios.
    #[arg(long)]
    highway: Option<usize>,
    /// Intersection scenarios.
    #[arg(long)]
    intersection: Option<usize>,
    /// Merge scenarios.
    #[arg(long)]
    merge: Option<usize>,
    /// Comma-separated predictors, e.g. `cv,noisy_cv(1),multimodal(6),oracle_blend(0.5)`.
    #[arg(long, value_delimiter = ',')]
    predictors: Option<Vec<String>>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Train on this suite instead of the generated training suite.
    #[arg(long, value_name = "FILE")]
    suite: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// `full`, `fixed_pc(v)`, `error_only`, or `diversity_only`.
    #[arg(long)]
    ablation: Option<String>,
    /// `minmax`, `zscore`, or `raw`.
    #[arg(long)]
    normalization: Option<String>,
    /// Error term: ADE, FDE, minADE, minFDE, aveADE, or aveFDE.
    #[arg(long)]
    error_variant: Option<String>,
}

#[derive(Debug, Args)]
struct CorrelateArgs {
    /// Comma-separated methods, e.g. `-ADE,-FDE,ed_eva`.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    methods: Option<Vec<String>>,
    #[command(flatten)]
    fusion: EvaluateArgs,
}

#[derive(Debug, Args)]
struct AblateArgs {
    /// Comma-separated ablations, strongest expected first.
    #[arg(long, value_delimiter = ',')]
    ablations: Option<Vec<String>>,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    /// Suite file; defaults to the run directory's suite.
    suite: Option<PathBuf>,
}

fn apply_simulate(cfg: &mut RunConfig, a: &SimulateArgs) {
    if let Some(v) = a.highway {
        cfg.highway = v;
    }
    if let Some(v) = a.intersection {
        cfg.intersection = v;
    }
    if let Some(v) = a.merge {
        cfg.merge = v;
    }
    if let Some(v) = &a.predictors {
        cfg.predictors = v.clone();
    }
}

fn apply_fusion(cfg: &mut RunConfig, a: &EvaluateArgs) -> anyhow::Result<()> {
    let bad = |e: edeva_core::Error| usage(e.to_string());
    if let Some(v) = &a.ablation {
        cfg.fusion.ablation = v.parse().map_err(bad)?;
    }
    if let Some(v) = &a.normalization {
        cfg.fusion.normalization = v.parse().map_err(bad)?;
    }
    if let Some(v) = &a.error_variant {
        cfg.fusion.error_variant = v.parse().map_err(bad)?;
    }
    Ok(())
}

fn resolve(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(v) = cli.common.seed {
        cfg.seed = v;
    }
    if let Some(v) = cli.common.jobs {
        cfg.parallelism = v;
    }
    cfg.out_dir = cli.common.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    match &cli.command {
        Command::Simulate(a) | Command::Reproduce(a) => apply_simulate(&mut cfg, a),
        Command::Train(a) => {
            let o = &mut cfg.train.optimizer;
            o.epochs = a.epochs.unwrap_or(o.epochs);
            o.lr = a.lr.unwrap_or(o.lr);
            o.batch_size = a.batch_size.unwrap_or(o.batch_size);
        }
        Command::Evaluate(a) => apply_fusion(&mut cfg, a)?,
        Command::Correlate(a) => {
            apply_fusion(&mut cfg, &a.fusion)?;
            if let Some(m) = &a.methods {
                cfg.methods = m.clone();
            }
        }
        Command::Ablate(a) => {
            if let Some(v) = &a.ablations {
                cfg.ablations = v.clone();
            }
        }
        Command::Validate(_) => {}
    }
    if let Some(file) = &cli.common.config {
        cfg = cfg.overlay_file(file)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_checks(checks: &[pipeline::Check]) {
    for c in checks {
        println!("{c}");
    }
}

fn run(cli: &Cli) -> anyhow::Result<ExitCode> {
    let cfg = resolve(cli)?;
    let start = Instant::now();
    match &cli.command {
        Command::Simulate(_) => {
            if cfg.highway + cfg.intersection + cfg.merge == 0 {
                eprintln!("warning: all scenario counts are zero; writing an empty suite");
            }
            let s = pipeline::simulate(&cfg)?;
            println!(
                "simulated {} scenarios, {} episodes, {} failures -> {}",
                s.scenarios,
                s.episodes,
                s.failures,
                cfg.out_dir.display()
            );
        }
        Command::Train(a) => {
            let r = pipeline::train_classifier(&cfg, a.suite.as_deref())?;
            println!(
                "trained on {} samples; held-out {}: precision {:.4}, recall {:.4} at threshold {}",
                r.train_samples, r.holdout_samples, r.holdout.precision, r.holdout.recall, r.threshold
            );
        }
        Command::Evaluate(_) => {
            let n = pipeline::evaluate(&cfg)?;
            println!("evaluated {n} records -> {}", cfg.out_dir.join(pipeline::EVALUATION).display());
        }
        Command::Correlate(_) => {
            let (report, checks) = pipeline::correlate(&cfg)?;
            println!("{} correlation blocks -> {}", report.blocks.len(), cfg.out_dir.join(pipeline::CORRELATION).display());
            print_checks(&checks);
        }
        Command::Ablate(_) => {
            let s = pipeline::ablate(&cfg)?;
            for (a, m) in &s.means {
                println!("{a}: mean overall r {m:+.4}");
            }
            let tag = if s.ordering_holds { "PASS" } else { "FAIL" };
            println!("{tag} ablation ordering (strictly decreasing mean r in the listed order)");
        }
        Command::Reproduce(_) => {
            let s = pipeline::reproduce(&cfg)?;
            println!(
                "simulated {} scenarios ({} episodes, {} failures); classifier held-out precision {:.4}",
                s.simulate.scenarios, s.simulate.episodes, s.simulate.failures, s.train.holdout.precision
            );
            print_checks(&s.checks);
            for (a, m) in &s.ablation.means {
                println!("{a}: mean overall r {m:+.4}");
            }
            let tag = if s.ablation.ordering_holds { "PASS" } else { "FAIL" };
            println!("{tag} ablation ordering");
        }
        Command::Validate(a) => {
            let file = a.suite.clone().unwrap_or_else(|| cfg.out_dir.join(pipeline::SUITE));
            let bad = pipeline::validate_suite(&file)?;
            if bad.is_empty() {
                println!("{}: all scenarios valid", file.display());
            } else {
                for (id, vs) in &bad {
                    for v in vs {
                        println!("{id}: {v}");
                    }
                }
                eprintln!("{} scenarios with violations", bad.len());
                return Ok(ExitCode::from(1));
            }
        }
    }
    eprintln!("done in {:.1?}", start.elapsed());
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
