//! Correlation and ranking analysis of evaluator scores against driving
//! performance.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::domain::PerformanceRecord;
use crate::error::{Error, Result};
use crate::fusion::Ablation;
use crate::metrics::ErrorVariant;
use crate::scalar::Scalar;

/// Pearson product-moment correlation, clamped to [−1, 1].
pub fn pearson<T: Scalar>(xs: &[T], ys: &[T]) -> Result<T> {
    if xs.len() != ys.len() {
        return Err(Error::invalid(format!("series lengths differ ({} vs {})", xs.len(), ys.len())));
    }
    if xs.len() < 3 {
        return Err(Error::invalid("pearson needs at least 3 samples"));
    }
    let n = T::of_usize(xs.len());
    let mx = xs.iter().copied().sum::<T>() / n;
    let my = ys.iter().copied().sum::<T>() / n;
    let (mut sxx, mut syy, mut sxy) = (T::zero(), T::zero(), T::zero());
    for (&x, &y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if !(sxx > T::zero()) || !(syy > T::zero()) {
        return Err(Error::DegenerateSeries("zero variance"));
    }
    let r = sxy / (sxx.sqrt() * syy.sqrt());
    Ok(r.max(-T::one()).min(T::one()))
}

/// Area under the ROC curve by the Mann-Whitney rank sum, ties counted
/// as one half.
pub fn auroc<T: Scalar>(scores: &[T], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::invalid("scores and labels differ in length"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("NaN score"));
    }
    let n_pos = labels.iter().filter(|&&l| l).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass("auroc needs both classes"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("no NaN"));

    // Doubled average ranks keep the arithmetic in integers.
    let mut rank_sum2: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let rank2 = (i + 1 + j) as u64;
        rank_sum2 += rank2 * order[i..j].iter().filter(|&&k| labels[k]).count() as u64;
        i = j;
    }
    let u2 = rank_sum2 - n_pos * (n_pos + 1);
    Ok(u2 as f64 / (2 * n_pos * n_neg) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC points for descending score thresholds, from (0, 0) to (1, 1).
pub fn roc_curve<T: Scalar>(scores: &[T], labels: &[bool]) -> Result<Vec<RocPoint>> {
    if scores.len() != labels.len() {
        return Err(Error::invalid("scores and labels differ in length"));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass("roc needs both classes"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].as_f64().total_cmp(&scores[a].as_f64()));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: s.as_f64(),
            fpr: fp as f64 / n_neg as f64,
            tpr: tp as f64 / n_pos as f64,
        });
    }
    Ok(points)
}

/// An evaluation method whose per-row score is correlated with performance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Method {
    /// Negated displacement error, so that higher is better.
    NegError(ErrorVariant),
    /// Raw diversity.
    Gad,
    /// The fused score under the given ablation.
    EdEva(Ablation),
}

impl Method {
    pub const ED_EVA: Method = Method::EdEva(Ablation::Full);

    /// The six negated error baselines.
    pub fn baselines() -> Vec<Method> {
        ErrorVariant::ALL.into_iter().map(Method::NegError).collect()
    }

    pub fn label(&self) -> String {
        match self {
            Method::NegError(v) => format!("-{v}"),
            Method::Gad => "gad".into(),
            Method::EdEva(Ablation::Full) => "ed_eva".into(),
            Method::EdEva(a) => a.label(),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(v) = s.strip_prefix('-') {
            return Ok(Method::NegError(v.parse()?));
        }
        match s {
            "ed_eva" | "ED-Eva" => Ok(Method::ED_EVA),
            "gad" | "GAD" => Ok(Method::Gad),
            other => Ok(Method::EdEva(
                other
                    .parse()
                    .map_err(|_| Error::invalid(format!("unknown method `{other}`")))?,
            )),
        }
    }
}

/// One score of one method for one (scenario, predictor).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodScore {
    pub scenario_id: String,
    pub predictor_id: String,
    pub method: Method,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceRow {
    pub scenario_id: String,
    pub predictor_id: String,
    pub performance: PerformanceRecord,
}

/// How overall performance is split into the positive and negative class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", content = "value", rename_all = "snake_case")]
pub enum Binarize {
    /// Positive iff strictly above the per-predictor median.
    Median,
    /// Positive iff strictly above a fixed value.
    Threshold(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub binarize: Binarize,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            binarize: Binarize::Median,
        }
    }
}

/// Correlations of one method's scores for one predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationBlock {
    pub predictor_id: String,
    pub method: Method,
    pub n: usize,
    pub r_efficiency: Option<f64>,
    pub r_discomfort: Option<f64>,
    pub r_unsafety: Option<f64>,
    pub r_overall: Option<f64>,
    pub auroc: Option<f64>,
    /// Overall-performance cut used for the AUROC labels.
    pub threshold: f64,
    pub roc: Vec<RocPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    /// Ordered by predictor, then by the requested method order.
    pub blocks: Vec<CorrelationBlock>,
}

impl CorrelationReport {
    pub fn block(&self, predictor: &str, method: &Method) -> Option<&CorrelationBlock> {
        self.blocks
            .iter()
            .find(|b| b.predictor_id == predictor && b.method == *method)
    }

    pub fn predictors(&self) -> Vec<&str> {
        let set: BTreeSet<&str> = self.blocks.iter().map(|b| b.predictor_id.as_str()).collect();
        set.into_iter().collect()
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Joins scores with performances and correlates per (predictor, method).
pub fn build_report(
    scores: &[MethodScore],
    performances: &[PerformanceRow],
    methods: &[Method],
    config: &ReportConfig,
) -> Result<CorrelationReport> {
    let mut perf: BTreeMap<(&str, &str), PerformanceRecord> = BTreeMap::new();
    for p in performances {
        if perf.insert((&p.scenario_id, &p.predictor_id), p.performance).is_some() {
            return Err(Error::DuplicateKey(format!("performance {}, {}", p.scenario_id, p.predictor_id)));
        }
    }
    let wanted: Vec<String> = methods.iter().map(Method::label).collect();
    let mut table: BTreeMap<(String, &str, &str), f64> = BTreeMap::new();
    for s in scores {
        let label = s.method.label();
        if !wanted.contains(&label) {
            continue;
        }
        if table.insert((label, &s.scenario_id, &s.predictor_id), s.score).is_some() {
            return Err(Error::DuplicateKey(format!("{}, {}, {}", s.scenario_id, s.predictor_id, s.method)));
        }
    }

    let mut missing = BTreeSet::new();
    for (_, scen, pred) in table.keys() {
        if !perf.contains_key(&(*scen, *pred)) {
            missing.insert(format!("performance for ({scen}, {pred})"));
        }
    }
    for label in &wanted {
        for (scen, pred) in perf.keys() {
            if !table.contains_key(&(label.clone(), *scen, *pred)) {
                missing.insert(format!("{label} score for ({scen}, {pred})"));
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::JoinMismatch(missing.into_iter().collect::<Vec<_>>().join("; ")));
    }

    let predictors: BTreeSet<&str> = perf.keys().map(|(_, p)| *p).collect();
    let mut blocks = Vec::new();
    for predictor in predictors {
        let rows: Vec<(&str, PerformanceRecord)> = perf
            .iter()
            .filter(|((_, p), _)| *p == predictor)
            .map(|((s, _), rec)| (*s, *rec))
            .collect();
        let eff: Vec<f64> = rows.iter().map(|(_, r)| r.efficiency).collect();
        let dis: Vec<f64> = rows.iter().map(|(_, r)| r.discomfort).collect();
        let uns: Vec<f64> = rows.iter().map(|(_, r)| r.unsafety).collect();
        let ovr: Vec<f64> = rows.iter().map(|(_, r)| r.overall).collect();
        let threshold = match config.binarize {
            Binarize::Median => median(&ovr),
            Binarize::Threshold(t) => t,
        };
        let labels: Vec<bool> = ovr.iter().map(|&o| o > threshold).collect();
        for (method, label) in methods.iter().zip(&wanted) {
            let xs: Vec<f64> = rows
                .iter()
                .map(|(s, _)| table[&(label.clone(), *s, predictor)])
                .collect();
            blocks.push(CorrelationBlock {
                predictor_id: predictor.to_string(),
                method: *method,
                n: xs.len(),
                r_efficiency: pearson(&xs, &eff).ok(),
                r_discomfort: pearson(&xs, &dis).ok(),
                r_unsafety: pearson(&xs, &uns).ok(),
                r_overall: pearson(&xs, &ovr).ok(),
                auroc: auroc(&xs, &labels).ok(),
                threshold,
                roc: roc_curve(&xs, &labels).unwrap_or_default(),
            });
        }
    }
    Ok(CorrelationReport { blocks })
}
