//! Pipeline stages. Each stage reads and writes files in the run
//! directory, so any stage can be re-run on its own.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use edeva_core::analysis::{build_report, CorrelationReport, Method, MethodScore, PerformanceRow};
use edeva_core::domain::{validate_scenario, PerformanceRecord, ScenarioKind, ScenarioLog, Violation};
use edeva_core::fusion::{evaluate_predictor, Ablation, FusionConfig};
use edeva_core::io;
use edeva_core::metrics::{ErrorVariant, MetricRow};
use edeva_core::scenarionn::{
    classification_stats, label_criticality, sequence_from_log, train, ClassStats, CriticalityModel, LabeledSample,
};
use edeva_core::sim::{generate_scenario_with, run_closed_loop};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{usage, RunConfig};

pub const SUITE: &str = "suite.jsonl";
pub const METRICS: &str = "metrics.csv";
pub const PERFORMANCE: &str = "performance.csv";
pub const FAILURES: &str = "failures.csv";
pub const CONFIG: &str = "config.toml";
pub const CHECKPOINT: &str = "model.ckpt";
pub const LOSS: &str = "loss.csv";
pub const TRAIN_LABELS: &str = "train_labels.csv";
pub const TRAIN_STATS: &str = "train_stats.json";
pub const P_CRITICAL: &str = "p_critical.csv";
pub const EVALUATION: &str = "evaluation.csv";
pub const CORRELATION: &str = "correlation.csv";
pub const ROC: &str = "roc.csv";
pub const ACCEPTANCE: &str = "acceptance.txt";
pub const ABLATION: &str = "ablation.csv";

/// Seeds of the training suite start here, away from evaluation seeds.
const TRAIN_SEED_OFFSET: u64 = 500_000;

fn path(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.out_dir.join(name)
}

fn pool(cfg: &RunConfig) -> anyhow::Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.parallelism)
        .build()
        .context("building worker pool")
}

/// `(kind, seed, n_agents)` for every scenario of a suite. Seeds are
/// consecutive per kind from `base`; agent counts come from a stream
/// keyed by the master seed and `stream`.
fn suite_plan(cfg: &RunConfig, counts: [usize; 3], base: u64, stream: u64) -> Vec<(ScenarioKind, u64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let kinds = [ScenarioKind::Highway, ScenarioKind::Intersection, ScenarioKind::Merge];
    let ranges = [cfg.agents.highway, cfg.agents.intersection, cfg.agents.merge];
    let mut plan = Vec::new();
    for ((kind, count), [lo, hi]) in kinds.into_iter().zip(counts).zip(ranges) {
        for i in 0..count {
            plan.push((kind, base + i as u64, rng.random_range(lo..=hi)));
        }
    }
    plan
}

fn generate(cfg: &RunConfig, plan: &[(ScenarioKind, u64, usize)]) -> anyhow::Result<Vec<ScenarioLog>> {
    use rayon::prelude::*;
    let logs = pool(cfg)?.install(|| {
        plan.par_iter()
            .map(|&(kind, seed, n)| generate_scenario_with(kind, seed, n, &cfg.generator))
            .collect::<edeva_core::Result<Vec<_>>>()
    })?;
    Ok(logs)
}

fn write_config(cfg: &RunConfig) -> anyhow::Result<()> {
    let text = toml::to_string(&cfg.experiment()?)?;
    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    let p = path(cfg, CONFIG);
    fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulateSummary {
    pub scenarios: usize,
    pub episodes: usize,
    pub failures: usize,
}

/// Generates the evaluation suite and runs every predictor on it in
/// closed loop.
pub fn simulate(cfg: &RunConfig) -> anyhow::Result<SimulateSummary> {
    cfg.validate()?;
    let predictors = cfg.predictor_kinds()?;
    let base = cfg.seed.wrapping_mul(1_000_000);
    let plan = suite_plan(cfg, [cfg.highway, cfg.intersection, cfg.merge], base, 1);
    let logs = generate(cfg, &plan)?;
    write_config(cfg)?;
    io::save_suite(&path(cfg, SUITE), &cfg.experiment_hash()?, cfg.seed, &logs)?;
    let out = pool(cfg)?.install(|| run_closed_loop(&logs, &predictors, &cfg.closed_loop));
    let metrics: Vec<MetricRow> = out.results.iter().map(|r| r.metrics.clone()).collect();
    let perf: Vec<PerformanceRow> = out
        .results
        .iter()
        .map(|r| PerformanceRow {
            scenario_id: r.scenario_id.clone(),
            predictor_id: r.predictor_id.clone(),
            performance: r.performance,
        })
        .collect();
    io::write_metrics(&path(cfg, METRICS), &metrics)?;
    io::write_performances(&path(cfg, PERFORMANCE), &perf)?;
    let failures: Vec<Vec<String>> = out
        .failures
        .iter()
        .map(|f| vec![f.scenario_id.clone(), f.predictor_id.clone(), f.error.clone()])
        .collect();
    io::write_csv(&path(cfg, FAILURES), &["scenario_id", "predictor_id", "error"], &failures)?;
    Ok(SimulateSummary {
        scenarios: logs.len(),
        episodes: out.results.len(),
        failures: out.failures.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_samples: usize,
    pub holdout_samples: usize,
    pub train_positive_rate: f64,
    pub holdout_positive_rate: f64,
    pub threshold: f64,
    pub holdout: ClassStats,
    pub final_loss: Option<f64>,
}

fn positive_rate(samples: &[&LabeledSample]) -> f64 {
    if samples.is_empty() {
        return f64::NAN;
    }
    samples.iter().filter(|s| s.label == 1).count() as f64 / samples.len() as f64
}

/// Trains the classifier on `suite` (or the configured synthetic training
/// suite) and writes the checkpoint, loss trace, labels, and held-out
/// statistics.
pub fn train_classifier(cfg: &RunConfig, suite: Option<&Path>) -> anyhow::Result<TrainReport> {
    cfg.validate()?;
    let logs = match suite {
        Some(p) => io::load_suite(p)?.1,
        None => {
            let t = &cfg.train;
            let base = cfg.seed.wrapping_mul(1_000_000).wrapping_add(TRAIN_SEED_OFFSET);
            generate(cfg, &suite_plan(cfg, [t.highway, t.intersection, t.merge], base, 2))?
        }
    };
    let every = cfg.train.holdout_every;
    let samples = logs
        .iter()
        .map(|log| {
            Ok(LabeledSample {
                sequence: sequence_from_log(log)?,
                label: label_criticality(log, log.future_len()),
            })
        })
        .collect::<edeva_core::Result<Vec<_>>>()?;
    let (mut fit, mut held) = (Vec::new(), Vec::new());
    for (i, s) in samples.iter().enumerate() {
        if i % every == every - 1 {
            held.push(s);
        } else {
            fit.push(s);
        }
    }
    let fit_owned: Vec<LabeledSample> = fit.iter().map(|s| (*s).clone()).collect();
    let outcome = train(&fit_owned, &cfg.train.optimizer)?;

    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    io::save_checkpoint(&path(cfg, CHECKPOINT), &outcome.model)?;
    let loss: Vec<Vec<String>> = outcome
        .loss_trace
        .iter()
        .enumerate()
        .map(|(e, l)| vec![(e + 1).to_string(), io::fmt_f64(*l)])
        .collect();
    io::write_csv(&path(cfg, LOSS), &["epoch", "loss"], &loss)?;

    let probs = held
        .iter()
        .map(|s| outcome.model.forward(&s.sequence))
        .collect::<edeva_core::Result<Vec<_>>>()?;
    let labels: Vec<u8> = held.iter().map(|s| s.label).collect();
    let labels_rows: Vec<Vec<String>> = logs
        .iter()
        .zip(&samples)
        .enumerate()
        .map(|(i, (log, s))| {
            let split = if i % every == every - 1 { "holdout" } else { "train" };
            vec![log.scenario_id.clone(), s.label.to_string(), split.to_string()]
        })
        .collect();
    io::write_csv(&path(cfg, TRAIN_LABELS), &["scenario_id", "label", "split"], &labels_rows)?;

    let report = TrainReport {
        train_samples: fit.len(),
        holdout_samples: held.len(),
        train_positive_rate: positive_rate(&fit),
        holdout_positive_rate: positive_rate(&held),
        threshold: cfg.train.threshold,
        holdout: classification_stats(&probs, &labels, cfg.train.threshold),
        final_loss: outcome.loss_trace.last().copied(),
    };
    let p = path(cfg, TRAIN_STATS);
    fs::write(&p, serde_json::to_string_pretty(&report)? + "\n").with_context(|| format!("writing {}", p.display()))?;
    Ok(report)
}

fn read_p_critical(p: &Path) -> anyhow::Result<BTreeMap<String, f64>> {
    let rows = io::read_csv(p, &["scenario_id", "p_critical"], |rec, line| {
        let v = rec.get(1).and_then(|s| s.parse::<f64>().ok());
        match (rec.get(0), v) {
            (Some(id), Some(v)) => Ok((id.to_string(), v)),
            _ => Err(edeva_core::Error::MalformedLine {
                line,
                reason: "expected scenario_id,p_critical".into(),
            }),
        }
    })?;
    Ok(rows.into_iter().collect())
}

fn perf_map(rows: &[PerformanceRow]) -> BTreeMap<(String, String), PerformanceRecord> {
    rows.iter()
        .map(|r| ((r.scenario_id.clone(), r.predictor_id.clone()), r.performance))
        .collect()
}

fn require(p: &Path, what: &str) -> anyhow::Result<()> {
    if p.exists() {
        Ok(())
    } else {
        Err(usage(format!("missing {what}: {} (run the earlier stage first)", p.display())))
    }
}

/// Scores the persisted suite with the configured fusion and writes
/// `p_critical.csv` (full mode) and `evaluation.csv`.
pub fn evaluate(cfg: &RunConfig) -> anyhow::Result<usize> {
    cfg.validate()?;
    for (name, what) in [(SUITE, "scenario suite"), (METRICS, "metrics"), (PERFORMANCE, "performance records")] {
        require(&path(cfg, name), what)?;
    }
    let metrics = io::read_metrics(&path(cfg, METRICS))?;
    let perf = io::read_performances(&path(cfg, PERFORMANCE))?;
    let mut p_c = BTreeMap::new();
    if cfg.fusion.ablation == Ablation::Full {
        let ckpt = path(cfg, CHECKPOINT);
        require(&ckpt, "classifier checkpoint")?;
        let model = io::load_checkpoint(&ckpt, &cfg.train.optimizer.dims)?;
        let (_, logs) = io::load_suite(&path(cfg, SUITE))?;
        p_c = criticality(&model, &logs)?;
        let rows: Vec<Vec<String>> = p_c.iter().map(|(k, v)| vec![k.clone(), io::fmt_f64(*v)]).collect();
        io::write_csv(&path(cfg, P_CRITICAL), &["scenario_id", "p_critical"], &rows)?;
    }
    let eval = evaluate_predictor(&metrics, &p_c, &perf_map(&perf), &cfg.fusion)?;
    io::write_evaluations(&path(cfg, EVALUATION), &eval.records)?;
    Ok(eval.records.len())
}

pub fn criticality(model: &CriticalityModel, logs: &[ScenarioLog]) -> anyhow::Result<BTreeMap<String, f64>> {
    logs.iter()
        .map(|l| Ok((l.scenario_id.clone(), model.forward(&sequence_from_log(l)?)?)))
        .collect()
}

/// Per-row scores of `method`. Fused methods other than the configured one
/// are recomputed from the metrics and the stored criticalities.
fn method_scores(
    cfg: &RunConfig,
    method: Method,
    metrics: &[MetricRow],
    perf: &BTreeMap<(String, String), PerformanceRecord>,
    p_c: &mut Option<BTreeMap<String, f64>>,
) -> anyhow::Result<Vec<MethodScore>> {
    let score = |r: &MetricRow, s: f64| MethodScore {
        scenario_id: r.scenario_id.clone(),
        predictor_id: r.predictor_id.clone(),
        method,
        score: s,
    };
    match method {
        Method::NegError(v) => Ok(metrics.iter().map(|r| score(r, -r.errors.get(v))).collect()),
        Method::Gad => Ok(metrics.iter().map(|r| score(r, r.gad)).collect()),
        Method::EdEva(ablation) => {
            if ablation == cfg.fusion.ablation && path(cfg, EVALUATION).exists() {
                let recs = io::read_evaluations(&path(cfg, EVALUATION))?;
                return Ok(recs
                    .into_iter()
                    .map(|r| MethodScore {
                        scenario_id: r.scenario_id,
                        predictor_id: r.predictor_id,
                        method,
                        score: r.score,
                    })
                    .collect());
            }
            if ablation == Ablation::Full && p_c.is_none() {
                let p = path(cfg, P_CRITICAL);
                require(&p, "criticality table (run evaluate in full mode)")?;
                *p_c = Some(read_p_critical(&p)?);
            }
            let fusion = FusionConfig { ablation, ..cfg.fusion };
            let empty = BTreeMap::new();
            let eval = evaluate_predictor(metrics, p_c.as_ref().unwrap_or(&empty), perf, &fusion)?;
            Ok(eval
                .records
                .into_iter()
                .map(|r| MethodScore {
                    scenario_id: r.scenario_id,
                    predictor_id: r.predictor_id,
                    method,
                    score: r.score,
                })
                .collect())
        }
    }
}

fn report_for(cfg: &RunConfig, methods: &[Method]) -> anyhow::Result<CorrelationReport> {
    for (name, what) in [(METRICS, "metrics"), (PERFORMANCE, "performance records")] {
        require(&path(cfg, name), what)?;
    }
    let metrics = io::read_metrics(&path(cfg, METRICS))?;
    let perf_rows = io::read_performances(&path(cfg, PERFORMANCE))?;
    let perf = perf_map(&perf_rows);
    let mut p_c = None;
    let mut scores = Vec::new();
    for &m in methods {
        scores.extend(method_scores(cfg, m, &metrics, &perf, &mut p_c)?);
    }
    Ok(build_report(&scores, &perf_rows, methods, &cfg.report)?)
}

/// One acceptance check and its outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = if self.pass { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}: {}", self.name, self.detail)
    }
}

fn fmt_r(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".into(), |x| format!("{x:+.4}"))
}

/// Checks of the fused score against the error baselines, per predictor.
pub fn acceptance_checks(report: &CorrelationReport, fused: Method) -> Vec<Check> {
    let label = fused.label();
    let ade = Method::NegError(ErrorVariant::Ade);
    let mut checks = Vec::new();
    for p in report.predictors() {
        let Some(b) = report.block(p, &fused) else { continue };
        checks.push(Check {
            name: format!("{label} overall r > 0 [{p}]"),
            pass: b.r_overall.is_some_and(|r| r > 0.0),
            detail: format!("r = {}", fmt_r(b.r_overall)),
        });
        if let Some(a) = report.block(p, &ade) {
            let margin = b.r_overall.zip(a.r_overall).map(|(x, y)| x - y);
            checks.push(Check {
                name: format!("{label} r exceeds -ADE r by 0.1 [{p}]"),
                pass: margin.is_some_and(|m| m >= 0.1),
                detail: format!("{label} {} vs -ADE {} (margin {})", fmt_r(b.r_overall), fmt_r(a.r_overall), fmt_r(margin)),
            });
        }
        let baselines: Vec<&edeva_core::analysis::CorrelationBlock> = Method::baselines()
            .iter()
            .filter_map(|m| report.block(p, m))
            .collect();
        if !baselines.is_empty() {
            let best = baselines
                .iter()
                .filter_map(|x| x.auroc.map(|a| (a, x.method.label())))
                .max_by(|x, y| x.0.total_cmp(&y.0));
            let pass = b.auroc.is_some_and(|a| baselines.iter().all(|x| x.auroc.is_none_or(|o| a >= o)));
            checks.push(Check {
                name: format!("{label} AUROC >= every error baseline [{p}]"),
                pass,
                detail: match best {
                    Some((a, m)) => format!("AUROC {} vs best baseline {m} {a:.4}", fmt_r(b.auroc)),
                    None => "no baseline AUROC".into(),
                },
            });
        }
    }
    checks
}

fn write_checks(p: &Path, checks: &[Check]) -> anyhow::Result<()> {
    let mut text = String::new();
    for c in checks {
        writeln!(text, "{c}")?;
    }
    fs::write(p, text).with_context(|| format!("writing {}", p.display()))
}

/// Correlates the requested methods with driving performance and writes
/// the correlation table, ROC points, and acceptance lines.
pub fn correlate(cfg: &RunConfig) -> anyhow::Result<(CorrelationReport, Vec<Check>)> {
    cfg.validate()?;
    let methods = cfg.method_list()?;
    let report = report_for(cfg, &methods)?;
    io::write_correlation(&path(cfg, CORRELATION), &report)?;
    io::write_roc(&path(cfg, ROC), &report)?;
    let fused = Method::EdEva(cfg.fusion.ablation);
    let checks = acceptance_checks(&report, fused);
    write_checks(&path(cfg, ACCEPTANCE), &checks)?;
    Ok((report, checks))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationSummary {
    pub report: CorrelationReport,
    /// Mean overall-performance r across predictors, per ablation in
    /// configured order.
    pub means: Vec<(Ablation, f64)>,
    pub ordering_holds: bool,
}

/// Correlates each configured ablation and checks that the mean overall r
/// strictly decreases in the configured order.
pub fn ablate(cfg: &RunConfig) -> anyhow::Result<AblationSummary> {
    cfg.validate()?;
    let modes = cfg.ablation_modes()?;
    if modes.is_empty() {
        bail!(usage("no ablations configured"));
    }
    let methods: Vec<Method> = modes.iter().map(|&a| Method::EdEva(a)).collect();
    let report = report_for(cfg, &methods)?;
    let mut rows = Vec::new();
    let mut means = Vec::new();
    for (&a, m) in modes.iter().zip(&methods) {
        let mut rs = Vec::new();
        for p in report.predictors() {
            let b = report.block(p, m).expect("block per predictor and method");
            rows.push(vec![
                a.label(),
                p.to_string(),
                b.n.to_string(),
                b.r_overall.map(io::fmt_f64).unwrap_or_default(),
                b.auroc.map(io::fmt_f64).unwrap_or_default(),
            ]);
            rs.push(b.r_overall.unwrap_or(f64::NAN));
        }
        let mean = rs.iter().sum::<f64>() / rs.len() as f64;
        rows.push(vec![a.label(), "mean".into(), rs.len().to_string(), io::fmt_f64(mean), String::new()]);
        means.push((a, mean));
    }
    io::write_csv(&path(cfg, ABLATION), &["ablation", "predictor_id", "n", "r_overall", "auroc"], &rows)?;
    let ordering_holds = means.windows(2).all(|w| w[0].1 > w[1].1);
    Ok(AblationSummary {
        report,
        means,
        ordering_holds,
    })
}

/// Full acceptance pipeline in one output directory.
#[derive(Debug, Clone, PartialEq)]
pub struct ReproduceSummary {
    pub simulate: SimulateSummary,
    pub train: TrainReport,
    pub evaluated: usize,
    pub correlation: CorrelationReport,
    pub checks: Vec<Check>,
    pub ablation: AblationSummary,
}

pub fn reproduce(cfg: &RunConfig) -> anyhow::Result<ReproduceSummary> {
    let simulate = simulate(cfg)?;
    let train = train_classifier(cfg, None)?;
    let evaluated = evaluate(cfg)?;
    let (correlation, checks) = correlate(cfg)?;
    let ablation = ablate(cfg)?;
    Ok(ReproduceSummary {
        simulate,
        train,
        evaluated,
        correlation,
        checks,
        ablation,
    })
}

/// Violations per scenario of a persisted suite, empty lists omitted.
pub fn validate_suite(p: &Path) -> anyhow::Result<Vec<(String, Vec<Violation>)>> {
    let (_, logs) = io::load_suite(p)?;
    Ok(logs
        .iter()
        .map(|l| (l.scenario_id.clone(), validate_scenario(l)))
        .filter(|(_, v)| !v.is_empty())
        .collect())
}
