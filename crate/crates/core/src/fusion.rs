//! Criticality-weighted fusion of normalized diversity and negated error.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::domain::{EvaluationRecord, PerformanceRecord};
use crate::error::{Error, Result};
use crate::metrics::{ErrorVariant, MetricRow};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Raw,
    Zscore,
    Minmax,
}

impl FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Normalization::Raw),
            "zscore" => Ok(Normalization::Zscore),
            "minmax" => Ok(Normalization::Minmax),
            other => Err(Error::invalid(format!("unknown normalization `{other}`"))),
        }
    }
}

/// Which fusion components are active.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "value", rename_all = "snake_case")]
pub enum Ablation {
    Full,
    /// Constant criticality in place of the classifier.
    FixedPc(f64),
    ErrorOnly,
    DiversityOnly,
}

impl Ablation {
    pub fn label(&self) -> String {
        match self {
            Ablation::Full => "full".into(),
            Ablation::FixedPc(v) => format!("fixed_pc({v})"),
            Ablation::ErrorOnly => "error_only".into(),
            Ablation::DiversityOnly => "diversity_only".into(),
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "full" => return Ok(Ablation::Full),
            "error_only" => return Ok(Ablation::ErrorOnly),
            "diversity_only" => return Ok(Ablation::DiversityOnly),
            _ => {}
        }
        let inner = s
            .strip_prefix("fixed_pc(")
            .and_then(|r| r.strip_suffix(')'))
            .or_else(|| s.strip_prefix("fixed_pc:"))
            .or_else(|| s.strip_prefix("fixed_pc="));
        match inner.map(str::parse::<f64>) {
            Some(Ok(v)) if (0.0..=1.0).contains(&v) => Ok(Ablation::FixedPc(v)),
            Some(_) => Err(Error::invalid(format!("fixed_pc value must lie in [0, 1]: `{s}`"))),
            None => Err(Error::invalid(format!("unknown ablation `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub normalization: Normalization,
    pub error_variant: ErrorVariant,
    pub ablation: Ablation,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            normalization: Normalization::Minmax,
            error_variant: ErrorVariant::Ade,
            ablation: Ablation::Full,
        }
    }
}

/// Normalizes a batch. A constant batch maps to zeros under `minmax` and
/// `zscore`; `zscore` uses the population standard deviation.
pub fn normalize<T: Scalar>(values: &[T], mode: Normalization) -> Vec<T> {
    if values.is_empty() {
        return Vec::new();
    }
    match mode {
        Normalization::Raw => values.to_vec(),
        Normalization::Minmax => {
            let lo = values.iter().copied().fold(T::infinity(), T::min);
            let hi = values.iter().copied().fold(T::neg_infinity(), T::max);
            if hi > lo {
                values.iter().map(|&v| (v - lo) / (hi - lo)).collect()
            } else {
                vec![T::zero(); values.len()]
            }
        }
        Normalization::Zscore => {
            let n = T::of_usize(values.len());
            let mean = values.iter().copied().sum::<T>() / n;
            let var = values.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let std = var.sqrt();
            if std > T::zero() {
                values.iter().map(|&v| (v - mean) / std).collect()
            } else {
                vec![T::zero(); values.len()]
            }
        }
    }
}

/// `p_c · gad_norm − (1 − p_c) · err_norm`.
pub fn ed_eva_score<T: Scalar>(p_c: T, gad_norm: T, err_norm: T) -> T {
    p_c * gad_norm - (T::one() - p_c) * err_norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// Ordered by (scenario_id, predictor_id).
    pub records: Vec<EvaluationRecord>,
    /// Mean score per predictor.
    pub predictor_means: BTreeMap<String, f64>,
}

/// Scores every metric row; the normalization batch is the whole input.
pub fn evaluate_predictor(
    rows: &[MetricRow],
    p_critical: &BTreeMap<String, f64>,
    performances: &BTreeMap<(String, String), PerformanceRecord>,
    config: &FusionConfig,
) -> Result<Evaluation> {
    let mut rows: Vec<&MetricRow> = rows.iter().collect();
    rows.sort_by(|a, b| a.key().cmp(&b.key()));
    if let Some(w) = rows.windows(2).find(|w| w[0].key() == w[1].key()) {
        return Err(Error::DuplicateKey(format!("{}, {}", w[0].scenario_id, w[0].predictor_id)));
    }

    let missing_perf: Vec<String> = rows
        .iter()
        .filter(|r| !performances.contains_key(&(r.scenario_id.clone(), r.predictor_id.clone())))
        .map(|r| format!("({}, {})", r.scenario_id, r.predictor_id))
        .collect();
    if !missing_perf.is_empty() {
        return Err(Error::JoinMismatch(format!("no performance record for {}", missing_perf.join(", "))));
    }

    let gads: Vec<f64> = rows.iter().map(|r| r.gad).collect();
    let errs: Vec<f64> = rows.iter().map(|r| r.errors.get(config.error_variant)).collect();
    let gad_norm = normalize(&gads, config.normalization);
    let err_norm = normalize(&errs, config.normalization);

    let mut records = Vec::with_capacity(rows.len());
    for (i, row) in rows.iter().enumerate() {
        let (p, score) = match config.ablation {
            Ablation::Full => {
                let p = *p_critical
                    .get(&row.scenario_id)
                    .ok_or_else(|| Error::Missing(format!("P_c for scenario {}", row.scenario_id)))?;
                (p, ed_eva_score(p, gad_norm[i], err_norm[i]))
            }
            Ablation::FixedPc(p) => (p, ed_eva_score(p, gad_norm[i], err_norm[i])),
            Ablation::ErrorOnly => (0.0, -err_norm[i]),
            Ablation::DiversityOnly => (1.0, gad_norm[i]),
        };
        records.push(EvaluationRecord {
            scenario_id: row.scenario_id.clone(),
            predictor_id: row.predictor_id.clone(),
            p_critical: p,
            gad: gads[i],
            e_error: errs[i],
            gad_norm: gad_norm[i],
            e_error_norm: err_norm[i],
            score,
            performance: performances[&(row.scenario_id.clone(), row.predictor_id.clone())],
        });
    }

    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in &records {
        let e = sums.entry(r.predictor_id.clone()).or_default();
        e.0 += r.score;
        e.1 += 1;
    }
    let predictor_means = sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect();
    Ok(Evaluation {
        records,
        predictor_means,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::ErrorSet;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn minmax_examples() {
        assert_eq!(normalize(&[1.0, 2.0, 3.0], Normalization::Minmax), vec![0.0, 0.5, 1.0]);
        assert_eq!(normalize(&[7.0, 7.0], Normalization::Minmax), vec![0.0, 0.0]);
        assert_eq!(normalize(&[4.0f32], Normalization::Raw), vec![4.0]);
    }

    #[test]
    fn zscore_example() {
        let z = normalize(&[1.0, 2.0, 3.0], Normalization::Zscore);
        let k = 1.5f64.sqrt();
        assert_abs_diff_eq!(z[0], -k, epsilon = 1e-12);
        assert_eq!(z[1], 0.0);
        assert_abs_diff_eq!(z[2], k, epsilon = 1e-12);
        assert_abs_diff_eq!(k, 1.2247, epsilon = 1e-4);
    }

    #[test]
    fn score_examples() {
        assert_eq!(ed_eva_score(1.0, 0.3, 0.9), 0.3);
        assert_eq!(ed_eva_score(0.0, 0.3, 0.9), -0.9);
        assert_abs_diff_eq!(ed_eva_score(0.5, 0.4, 0.2), 0.1, epsilon = 1e-15);
    }

    #[test]
    fn ablation_parsing() {
        assert_eq!("fixed_pc(0.5)".parse::<Ablation>().unwrap(), Ablation::FixedPc(0.5));
        assert_eq!("error_only".parse::<Ablation>().unwrap(), Ablation::ErrorOnly);
        assert!("fixed_pc(1.5)".parse::<Ablation>().is_err());
        assert!("nope".parse::<Ablation>().is_err());
        assert_eq!(Ablation::FixedPc(0.5).label(), "fixed_pc(0.5)");
    }

    fn row(s: &str, p: &str, gad: f64, ade: f64) -> MetricRow {
        MetricRow {
            scenario_id: s.into(),
            predictor_id: p.into(),
            gad,
            errors: ErrorSet { ade, ..ErrorSet::default() },
            frames: 1,
            missing: 0,
        }
    }

    fn perf_for(rows: &[MetricRow]) -> BTreeMap<(String, String), PerformanceRecord> {
        rows.iter()
            .map(|r| {
                let p = PerformanceRecord { efficiency: 1.0, discomfort: 0.0, unsafety: 0.0, overall: 1.0 };
                ((r.scenario_id.clone(), r.predictor_id.clone()), p)
            })
            .collect()
    }

    fn sample_rows() -> Vec<MetricRow> {
        vec![
            row("s1", "a", 0.3, 1.0),
            row("s1", "b", 0.9, 2.5),
            row("s2", "a", 0.2, 0.5),
            row("s2", "b", 1.4, 3.0),
        ]
    }

    #[test]
    fn error_only_is_negated_error() {
        let rows = sample_rows();
        let cfg = FusionConfig { ablation: Ablation::ErrorOnly, ..FusionConfig::default() };
        let ev = evaluate_predictor(&rows, &BTreeMap::new(), &perf_for(&rows), &cfg).unwrap();
        let errs: Vec<f64> = ev.records.iter().map(|r| r.e_error).collect();
        let neg: Vec<f64> = normalize(&errs, Normalization::Minmax).into_iter().map(|v| -v).collect();
        let got: Vec<f64> = ev.records.iter().map(|r| r.score).collect();
        assert_eq!(got, neg);
    }

    #[test]
    fn fixed_half_is_mean_of_terms() {
        let rows = sample_rows();
        let cfg = FusionConfig { ablation: Ablation::FixedPc(0.5), ..FusionConfig::default() };
        let ev = evaluate_predictor(&rows, &BTreeMap::new(), &perf_for(&rows), &cfg).unwrap();
        for r in &ev.records {
            assert_abs_diff_eq!(r.score, (r.gad_norm - r.e_error_norm) / 2.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn full_mode_requires_pc() {
        let rows = sample_rows();
        let err = evaluate_predictor(&rows, &BTreeMap::new(), &perf_for(&rows), &FusionConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Missing(_)));
        let pc: BTreeMap<String, f64> = [("s1".to_string(), 0.8), ("s2".to_string(), 0.1)].into();
        let ev = evaluate_predictor(&rows, &pc, &perf_for(&rows), &FusionConfig::default()).unwrap();
        assert_eq!(ev.records.len(), 4);
        assert_eq!(ev.predictor_means.len(), 2);
        let r = &ev.records[0];
        assert_eq!(r.score, ed_eva_score(0.8, r.gad_norm, r.e_error_norm));
    }

    #[test]
    fn missing_performance_is_join_error() {
        let rows = sample_rows();
        let mut perf = perf_for(&rows);
        perf.remove(&("s2".to_string(), "b".to_string()));
        let cfg = FusionConfig { ablation: Ablation::ErrorOnly, ..FusionConfig::default() };
        let err = evaluate_predictor(&rows, &BTreeMap::new(), &perf, &cfg).unwrap_err();
        assert!(err.to_string().contains("(s2, b)"));
    }

    #[test]
    fn lower_error_never_ranks_lower() {
        // Predictor A beats B on error everywhere with equal diversity.
        let mut rows = Vec::new();
        for s in 0..5 {
            let id = format!("s{s}");
            rows.push(row(&id, "a", 0.4 + 0.1 * s as f64, 1.0 + s as f64 * 0.2));
            rows.push(row(&id, "b", 0.4 + 0.1 * s as f64, 1.5 + s as f64 * 0.3));
        }
        let grid = [0.01, 0.25, 0.5, 0.75, 0.99];
        for a in grid {
            for b in grid {
                let pc: BTreeMap<String, f64> = (0..5).map(|s| (format!("s{s}"), if s % 2 == 0 { a } else { b })).collect();
                let ev = evaluate_predictor(&rows, &pc, &perf_for(&rows), &FusionConfig::default()).unwrap();
                assert!(ev.predictor_means["a"] >= ev.predictor_means["b"]);
            }
        }
    }

    proptest! {
        #[test]
        fn monotone_in_terms(p in 0.001..0.999f64, g in -2.0..2.0f64, e in -2.0..2.0f64, d in 1e-6..1.0f64) {
            prop_assert!(ed_eva_score(p, g + d, e) > ed_eva_score(p, g, e));
            prop_assert!(ed_eva_score(p, g, e + d) < ed_eva_score(p, g, e));
        }

        #[test]
        fn affine_gad_map_keeps_ranking(vals in prop::collection::vec(0.0..10.0f64, 2..20), a in 0.1..10.0f64, b in -5.0..5.0f64, p in 0.01..0.99f64) {
            let errs: Vec<f64> = (0..vals.len()).map(|i| (i as f64 * 0.37).sin().abs()).collect();
            let score = |g: &[f64]| -> Vec<f64> {
                let gn = normalize(g, Normalization::Minmax);
                let en = normalize(&errs, Normalization::Minmax);
                gn.iter().zip(&en).map(|(&x, &y)| ed_eva_score(p, x, y)).collect()
            };
            let s1 = score(&vals);
            let mapped: Vec<f64> = vals.iter().map(|v| a * v + b).collect();
            let s2 = score(&mapped);
            for i in 0..vals.len() {
                for j in 0..vals.len() {
                    if s1[i] < s1[j] - 1e-9 {
                        prop_assert!(s2[i] < s2[j]);
                    }
                }
            }
        }
    }
}
