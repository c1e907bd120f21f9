//! Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any
//! criterion fails. Criteria 6 to 9 share one `reproduce` run of the default
//! configuration.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use edeva_cli::config::RunConfig;
use edeva_cli::pipeline::{self, ReproduceSummary};
use edeva_core::analysis::{auroc, median, Method};
use edeva_core::domain::{AgentId, PredictionSet, ScenarioKind, Trajectory};
use edeva_core::error::Error;
use edeva_core::fusion::Ablation;
use edeva_core::geom::Point2;
use edeva_core::gmm::{collapse, diversity_area, modes_as_gmm, Component, Cov2, Gmm2D, Sym2};
use edeva_core::io;
use edeva_core::metrics::{batch_metrics, displacement_error, gad, ErrorVariant, GmmConstruction, MetricInput};
use edeva_core::scenarionn::{loss_bce, sequence_from_log, CriticalityModel, ModelDims};
use edeva_core::sim::generate_scenario;
use edeva_repro::{pairwise_auroc, read_tree, tree_differences};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn report(n: u8, name: &str, o: &Outcome, elapsed: Duration) -> bool {
    let tag = if o.pass { "PASS" } else { "FAIL" };
    println!("criterion {n} {tag} {name}: {} [{:.1?}]", o.detail, elapsed);
    o.pass
}

fn random_psd(rng: &mut ChaCha8Rng, scale: f64) -> Sym2<f64> {
    let a: [f64; 4] = std::array::from_fn(|_| rng.random_range(-scale..scale));
    // A·Aᵀ is symmetric positive semi-definite.
    Sym2::new(a[0] * a[0] + a[1] * a[1], a[0] * a[2] + a[1] * a[3], a[2] * a[2] + a[3] * a[3])
}

fn collapse_matches_monte_carlo() -> Outcome {
    const DRAWS: usize = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    for trial in 0..100 {
        let k = rng.random_range(1..=5);
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let components: Vec<Component<f64>> = raw
            .iter()
            .map(|w| Component {
                weight: w / total,
                mean: Point2::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)),
                cov: random_psd(&mut rng, 1.5).add(&Sym2::scaled_identity(0.05)),
            })
            .collect();
        let gmm = Gmm2D::new(components).expect("valid mixture");
        let exact = collapse(&gmm).matrix.rows();
        let draws: Vec<Point2<f64>> = (0..DRAWS).map(|_| gmm.sample(&mut rng)).collect();
        let n = DRAWS as f64;
        let mx = draws.iter().map(|p| p.x).sum::<f64>() / n;
        let my = draws.iter().map(|p| p.y).sum::<f64>() / n;
        let mut s = [[0.0; 2]; 2];
        for p in &draws {
            let d = [p.x - mx, p.y - my];
            for i in 0..2 {
                for j in 0..2 {
                    s[i][j] += d[i] * d[j] / (n - 1.0);
                }
            }
        }
        for i in 0..2 {
            for j in 0..2 {
                // Off-diagonal entries are measured against the geometric
                // mean of the variances, since they can be near zero.
                let scale = (exact[i][i] * exact[j][j]).sqrt();
                let rel = (s[i][j] - exact[i][j]).abs() / scale;
                if rel > worst {
                    worst = rel;
                    worst_at = format!("mixture {trial} ({k} components), entry ({i},{j})");
                }
            }
        }
    }
    outcome(worst < 0.02, format!("worst relative deviation {:.3}% at {worst_at}", 100.0 * worst))
}

fn eigen_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut det_err, mut trace_err, mut scale_err, mut rot_err) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..10_000 {
        let m = random_psd(&mut rng, 3.0);
        let e = m.eigen();
        det_err = det_err.max((e.lambda1 * e.lambda2 - m.det()).abs());
        trace_err = trace_err.max((e.lambda1 + e.lambda2 - m.trace()).abs());
        let s: f64 = rng.random_range(0.1..10.0);
        let area = diversity_area(&Cov2::from_matrix(m));
        let scaled = diversity_area(&Cov2::from_matrix(m.scale(s * s)));
        scale_err = scale_err.max((scaled - s * s * area).abs());
        let rotated = diversity_area(&Cov2::from_matrix(m.rotated(rng.random_range(0.0..std::f64::consts::TAU))));
        rot_err = rot_err.max((rotated - area).abs());
    }
    let pass = det_err <= 1e-10 && trace_err <= 1e-10 && scale_err <= 1e-9 && rot_err <= 1e-9;
    outcome(
        pass,
        format!(
            "max |λ1λ2 − det| {det_err:.1e}, |λ1+λ2 − tr| {trace_err:.1e}, scaling {scale_err:.1e}, rotation {rot_err:.1e} over 10000 matrices"
        ),
    )
}

fn traj(points: Vec<(f64, f64)>) -> Trajectory<f64> {
    Trajectory::new(points.into_iter().map(|(x, y)| Point2::new(x, y)).collect(), 0.5).expect("valid trajectory")
}

fn set(modes: Vec<Trajectory<f64>>, probs: Option<Vec<f64>>) -> PredictionSet<f64> {
    PredictionSet::new(AgentId(1), modes, probs).expect("valid prediction set")
}

fn metric_oracles() -> Outcome {
    let mut failures: Vec<String> = Vec::new();
    let mut check = |ok: bool, what: &str| {
        if !ok {
            failures.push(what.to_string());
        }
    };
    let truth = traj((0..10).map(|i| (i as f64, 0.5 * i as f64)).collect());
    let modes = ErrorVariant::ALL;

    let exact = set(vec![truth.clone()], None);
    check(
        modes.iter().all(|&v| displacement_error(&exact, &truth, v).unwrap() == 0.0),
        "identity gives zero error",
    );
    let offset = set(vec![traj(truth.points.iter().map(|p| (p.x + 3.0, p.y + 4.0)).collect())], None);
    check(
        modes.iter().all(|&v| displacement_error(&offset, &truth, v).unwrap() == 5.0),
        "3-4-5 offset gives 5",
    );
    let mut bumped = truth.points.clone();
    bumped[9].y += 2.0;
    let two = set(vec![truth.clone(), Trajectory::new(bumped, 0.5).unwrap()], None);
    let e = |v| displacement_error(&two, &truth, v).unwrap();
    check(e(ErrorVariant::MinAde) == 0.0, "two-mode minADE = 0");
    check(e(ErrorVariant::MinFde) == 0.0, "two-mode minFDE = 0");
    check(e(ErrorVariant::AveAde) == 0.1, "two-mode aveADE = 0.1");
    check(e(ErrorVariant::AveFde) == 1.0, "two-mode aveFDE = 1");
    let short = traj((0..5).map(|i| (i as f64, 0.0)).collect());
    check(
        matches!(displacement_error(&exact, &short, ErrorVariant::Ade), Err(Error::HorizonMismatch { .. })),
        "horizon mismatch is an error",
    );

    let modes_c = GmmConstruction::Modes { sigma0: 0.5 };
    let same = set(vec![truth.clone(); 6], None);
    check(gad(std::slice::from_ref(&same), &modes_c).unwrap() == 0.25, "identical modes give GAD 0.25");
    let six = modes_as_gmm(&same, 3, 0.5).unwrap();
    check(six.components().iter().all(|c| c.weight == 1.0 / 6.0), "uniform weights without probabilities");
    let weighted = set(vec![truth.clone(), truth.clone()], Some(vec![0.7, 0.3]));
    let w = modes_as_gmm(&weighted, 0, 0.5).unwrap();
    check(w.components()[0].weight == 0.7 && w.components()[1].weight == 0.3, "weights pass through");
    let single = collapse(&modes_as_gmm(&exact, 0, 0.5).unwrap()).matrix;
    check(single == Sym2::scaled_identity(0.25), "single mode collapses to sigma0² I");

    let fan = |spread: f64| {
        set(
            (0..6)
                .map(|k| traj((0..10).map(|i| (i as f64, spread * (k as f64 - 2.5) * i as f64 / 9.0)).collect()))
                .collect(),
            None,
        )
    };
    check(
        gad(&[fan(1.0)], &modes_c).unwrap() > gad(&[fan(0.1)], &modes_c).unwrap(),
        "wide fan has larger GAD than tight bundle",
    );
    let base = fan(1.0);
    let tripled = set(
        base.modes
            .iter()
            .map(|m| traj(m.points.iter().map(|p| (p.x, 3.0 * p.y)).collect()))
            .collect(),
        None,
    );
    // A lateral fan has a rank-one between-mode term, so compare variances.
    let var = |p: &PredictionSet<f64>| modes_as_gmm(p, 9, 0.5).unwrap().covariance_parts().0.rows()[1][1];
    check(((var(&tripled) / var(&base)) - 9.0).abs() < 1e-12, "scaling spread by 3 scales between variance by 9");
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cloud: Vec<Trajectory<f64>> = (0..5)
        .map(|_| traj((0..10).map(|_| (rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0))).collect()))
        .collect();
    let centre: Vec<Point2<f64>> = (0..10)
        .map(|t| cloud.iter().fold(Point2::zero(), |a, m| a + m.points[t]) * 0.2)
        .collect();
    let scaled: Vec<Trajectory<f64>> = cloud
        .iter()
        .map(|m| {
            Trajectory::new(
                m.points.iter().zip(&centre).map(|(&p, &c)| c + (p - c) * 3.0).collect(),
                0.5,
            )
            .unwrap()
        })
        .collect();
    let ratio = (0..10)
        .map(|t| {
            let a = modes_as_gmm(&set(cloud.clone(), None), t, 0.5).unwrap().covariance_parts().0;
            let b = modes_as_gmm(&set(scaled.clone(), None), t, 0.5).unwrap().covariance_parts().0;
            b.det().sqrt() / a.det().sqrt()
        })
        .fold(0.0f64, |acc, r| acc.max((r - 9.0).abs()));
    check(ratio < 1e-9, "between-mode area scales by 9 when endpoints spread by 3");

    let mut order_violations = 0;
    let mut translation_err = 0.0f64;
    for _ in 0..1000 {
        let m = rng.random_range(1..=6);
        let t = rng.random_range(1..=12);
        let truth = traj((0..t).map(|_| (rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0))).collect());
        let preds = set(
            (0..m)
                .map(|_| traj((0..t).map(|_| (rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0))).collect()))
                .collect(),
            None,
        );
        let v = |p: &PredictionSet<f64>, tr: &Trajectory<f64>, e| displacement_error(p, tr, e).unwrap();
        if v(&preds, &truth, ErrorVariant::MinAde) > v(&preds, &truth, ErrorVariant::AveAde)
            || v(&preds, &truth, ErrorVariant::MinFde) > v(&preds, &truth, ErrorVariant::AveFde)
        {
            order_violations += 1;
        }
        let shift = Point2::new(rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0));
        let moved = |tr: &Trajectory<f64>| Trajectory::new(tr.points.iter().map(|&p| p + shift).collect(), 0.5).unwrap();
        let preds_moved = set(preds.modes.iter().map(moved).collect(), None);
        for e in ErrorVariant::ALL {
            translation_err = translation_err.max((v(&preds, &truth, e) - v(&preds_moved, &moved(&truth), e)).abs());
        }
    }
    check(order_violations == 0, "min <= ave on random instances");
    check(translation_err < 1e-9, "translation invariance");

    let input = |s: &str, p: &str| MetricInput {
        scenario_id: s.into(),
        predictor_id: p.into(),
        frames: Vec::new(),
    };
    check(batch_metrics(&[], &modes_c).unwrap().is_empty(), "0 scenarios give an empty table");
    let four = [input("s1", "a"), input("s0", "b"), input("s1", "b"), input("s0", "a")];
    let rows = batch_metrics(&four, &modes_c).unwrap();
    check(
        rows.iter().map(|r| format!("{}/{}", r.scenario_id, r.predictor_id)).collect::<Vec<_>>()
            == ["s0/a", "s0/b", "s1/a", "s1/b"],
        "2x2 inputs give 4 ordered rows",
    );
    let dup = batch_metrics(&[input("s0", "a"), input("s0", "a")], &modes_c);
    check(
        dup.is_err_and(|e| e.to_string().contains("duplicate evaluation key")),
        "duplicate key is rejected",
    );

    let detail = if failures.is_empty() {
        "all oracle examples hold; min <= ave and translation invariance on 1000 random instances".to_string()
    } else {
        format!("failed: {}", failures.join("; "))
    };
    outcome(failures.is_empty(), detail)
}

fn gradient_check() -> Outcome {
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    let mut params = 0usize;
    let kinds = [ScenarioKind::Highway, ScenarioKind::Intersection, ScenarioKind::Merge];
    for pair in 0..20u64 {
        let dims = if pair == 0 {
            ModelDims::default()
        } else {
            ModelDims {
                gcn: rng.random_range(4..=24),
                hidden: rng.random_range(2..=16),
                ..ModelDims::default()
            }
        };
        let mut model = CriticalityModel::init(dims, 100 + pair);
        for (name, t) in model.tensors_mut() {
            if name.ends_with("_b") {
                for v in &mut t.data {
                    *v = rng.random_range(-0.3..0.3);
                }
            }
        }
        let kind = kinds[rng.random_range(0..kinds.len())];
        let log = generate_scenario(kind, rng.random(), rng.random_range(2..=8)).expect("scenario");
        let seq = sequence_from_log(&log).expect("sequence");
        let label = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
        let (_, grad) = model.backward(&seq, label).expect("backward");
        let analytic = grad.flat();
        for idx in 0..model.num_params() {
            let mut plus = model.clone();
            *plus.param_mut(idx) += h;
            let mut minus = model.clone();
            *minus.param_mut(idx) -= h;
            let lp = loss_bce(plus.forward(&seq).unwrap(), label);
            let lm = loss_bce(minus.forward(&seq).unwrap(), label);
            let numeric = (lp - lm) / (2.0 * h);
            let denom = analytic[idx].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((analytic[idx] - numeric).abs() / denom);
        }
        params += model.num_params();
    }
    outcome(
        worst < 1e-4,
        format!("max relative error {worst:.2e} over {params} parameters in 20 model/input pairs"),
    )
}

fn classifier_precision(dir: &Path) -> Outcome {
    let cfg = RunConfig {
        out_dir: dir.to_path_buf(),
        parallelism: 1,
        ..RunConfig::default()
    };
    let start = Instant::now();
    let r = match pipeline::train_classifier(&cfg, None) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("training failed: {e:#}")),
    };
    let elapsed = start.elapsed();
    let pass = r.train_samples >= 2000 && r.holdout.precision >= 0.85 && elapsed < Duration::from_secs(600);
    outcome(
        pass,
        format!(
            "precision {:.4} (recall {:.4}) on {} held-out after training on {} sequences, single-threaded in {:.1?}",
            r.holdout.precision, r.holdout.recall, r.holdout_samples, r.train_samples, elapsed
        ),
    )
}

fn fmt_r(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".into(), |x| format!("{x:+.4}"))
}

fn sign_pattern(cfg: &RunConfig, run: &ReproduceSummary, elapsed: Duration) -> Outcome {
    let report = &run.correlation;
    let ade = Method::NegError(ErrorVariant::Ade);
    let predictors = report.predictors();
    let mut pass = run.simulate.scenarios >= 200 && predictors.len() >= 3 && elapsed < Duration::from_secs(900);
    let mut parts = Vec::new();
    for p in &predictors {
        let ed = report.block(p, &Method::ED_EVA).and_then(|b| b.r_overall);
        let base = report.block(p, &ade).and_then(|b| b.r_overall);
        let ok = match (ed, base) {
            (Some(e), Some(b)) => e > 0.0 && e - b >= 0.1,
            _ => false,
        };
        pass &= ok;
        parts.push(format!("{p} ED-Eva {} vs -ADE {}", fmt_r(ed), fmt_r(base)));
    }
    let mixed = cfg.highway > 0 && cfg.intersection > 0;
    pass &= mixed;
    outcome(
        pass,
        format!(
            "{} scenarios x {} predictors, reproduce in {:.1?}; {}",
            run.simulate.scenarios,
            predictors.len(),
            elapsed,
            parts.join(", ")
        ),
    )
}

fn auroc_dominance(cfg: &RunConfig, run: &ReproduceSummary) -> Outcome {
    let report = &run.correlation;
    let mut pass = true;
    let mut parts = Vec::new();
    for p in report.predictors() {
        let ed = report.block(p, &Method::ED_EVA).and_then(|b| b.auroc);
        let best = Method::baselines()
            .iter()
            .filter_map(|m| report.block(p, m).and_then(|b| b.auroc.map(|a| (a, m.label()))))
            .max_by(|a, b| a.0.total_cmp(&b.0));
        let ok = match (ed, &best) {
            (Some(e), Some((b, _))) => e >= *b,
            _ => false,
        };
        pass &= ok;
        let best = best.map_or_else(|| "none".to_string(), |(a, m)| format!("{m} {a:.4}"));
        parts.push(format!("{p} {} vs {best}", fmt_r(ed)));
    }

    // Rebuild the ED-Eva labels and scores from the run files and check the
    // rank statistic against brute-force pair counting.
    let evals = match io::read_evaluations(&cfg.out_dir.join(pipeline::EVALUATION)) {
        Ok(v) => v,
        Err(e) => return outcome(false, format!("reading evaluations: {e}")),
    };
    let mut by_pred: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for r in &evals {
        by_pred.entry(&r.predictor_id).or_default().push((r.score, r.performance.overall));
    }
    let mut pooled: Vec<(f64, bool)> = Vec::new();
    let mut report_matches = true;
    for (p, rows) in &by_pred {
        let overall: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let cut = median(&overall);
        let labels: Vec<bool> = overall.iter().map(|&o| o > cut).collect();
        let scores: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let stored = report.block(p, &Method::ED_EVA).and_then(|b| b.auroc);
        report_matches &= auroc(&scores, &labels).ok() == stored;
        pooled.extend(scores.into_iter().zip(labels));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    pooled.shuffle(&mut rng);
    pooled.truncate(500);
    let scores: Vec<f64> = pooled.iter().map(|x| x.0).collect();
    let labels: Vec<bool> = pooled.iter().map(|x| x.1).collect();
    let rank = auroc(&scores, &labels).unwrap_or(f64::NAN);
    let brute = pairwise_auroc(&scores, &labels);
    let exact = rank == brute;
    pass &= exact && report_matches && pooled.len() == 500;
    outcome(
        pass,
        format!(
            "{}; rank AUROC {rank:.6} vs pairwise {brute:.6} on {} samples ({}), report recomputation {}",
            parts.join(", "),
            pooled.len(),
            if exact { "exact" } else { "mismatch" },
            if report_matches { "matches" } else { "differs" }
        ),
    )
}

fn ablation_order(run: &ReproduceSummary) -> Outcome {
    let expected = [Ablation::Full, Ablation::FixedPc(0.5), Ablation::ErrorOnly];
    let order: Vec<Ablation> = run.ablation.means.iter().map(|m| m.0).collect();
    let pass = order == expected && run.ablation.ordering_holds;
    let means: Vec<String> = run.ablation.means.iter().map(|(a, m)| format!("{a} {m:+.4}")).collect();
    outcome(pass, format!("mean overall r: {}", means.join(", ")))
}

fn determinism(first: &Path, second_dir: &Path) -> Outcome {
    let cfg = RunConfig {
        seed: 7,
        out_dir: second_dir.to_path_buf(),
        ..RunConfig::default()
    };
    if let Err(e) = pipeline::reproduce(&cfg) {
        return outcome(false, format!("second run failed: {e:#}"));
    }
    let (a, b) = match (read_tree(first), read_tree(second_dir)) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return outcome(false, format!("reading output trees: {e}")),
    };
    let differing: Vec<String> = tree_differences(&a, &b).iter().map(|k| k.display().to_string()).collect();
    let bytes: usize = a.values().map(Vec::len).sum();
    outcome(
        differing.is_empty() && !a.is_empty(),
        if differing.is_empty() {
            format!("{} files ({bytes} bytes) identical across two runs", a.len())
        } else {
            format!("files differ: {}", differing.join(", "))
        },
    )
}

fn timed(f: impl FnOnce() -> Outcome) -> (Outcome, Duration) {
    let start = Instant::now();
    let o = f();
    (o, start.elapsed())
}

fn main() {
    // Custom harness: answer listing requests without running anything.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let scratch = tempfile::tempdir().expect("temporary directory");
    let mut all = true;

    let (o, t) = timed(collapse_matches_monte_carlo);
    let o = Outcome {
        pass: o.pass && t < Duration::from_secs(60),
        ..o
    };
    all &= report(1, "GMM collapse matches Monte-Carlo covariance", &o, t);
    let (o, t) = timed(eigen_identities);
    all &= report(2, "eigen and determinant identities", &o, t);
    let (o, t) = timed(metric_oracles);
    all &= report(3, "metric oracles", &o, t);
    let (o, t) = timed(gradient_check);
    let o = Outcome {
        pass: o.pass && t < Duration::from_secs(120),
        ..o
    };
    all &= report(4, "classifier gradients match finite differences", &o, t);
    let (o, t) = timed(|| classifier_precision(&scratch.path().join("classifier")));
    all &= report(5, "held-out classifier precision", &o, t);

    let cfg = RunConfig {
        seed: 7,
        out_dir: scratch.path().join("run-a"),
        ..RunConfig::default()
    };
    let start = Instant::now();
    let run = pipeline::reproduce(&cfg);
    let elapsed = start.elapsed();
    match &run {
        Ok(run) => {
            let o = sign_pattern(&cfg, run, elapsed);
            all &= report(6, "ED-Eva correlates positively and beats -ADE", &o, elapsed);
            let (o, t) = timed(|| auroc_dominance(&cfg, run));
            all &= report(7, "ED-Eva AUROC dominates the error baselines", &o, t);
            let (o, t) = timed(|| ablation_order(run));
            all &= report(8, "ablation ordering full > fixed_pc(0.5) > error_only", &o, t);
        }
        Err(e) => {
            let o = outcome(false, format!("reproduce failed: {e:#}"));
            for (n, name) in [(6, "sign pattern"), (7, "AUROC dominance"), (8, "ablation ordering")] {
                all &= report(n, name, &o, elapsed);
            }
        }
    }
    let (o, t) = timed(|| determinism(&cfg.out_dir, &scratch.path().join("run-b")));
    all &= report(9, "reproduce is byte-identical across runs", &o, t);

    if !all {
        std::process::exit(1);
    }
}
