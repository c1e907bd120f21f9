//! Diversity (GAD) and displacement-error metrics over prediction sets.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::domain::{AgentId, PredictionSet, Trajectory};
use crate::error::{Error, Result};
use crate::gmm::{collapse, diversity_area, fit_em, modes_as_gmm, Cov2, EmConfig};
use crate::scalar::Scalar;

/// Displacement-error instantiation.
///
/// `Ade`/`Fde` score the most probable mode (mode 0 under uniform weights);
/// `Min*` the best mode; `Ave*` the mean over all modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ErrorVariant {
    #[serde(rename = "ADE")]
    Ade,
    #[serde(rename = "FDE")]
    Fde,
    #[serde(rename = "minADE")]
    MinAde,
    #[serde(rename = "minFDE")]
    MinFde,
    #[serde(rename = "aveADE")]
    AveAde,
    #[serde(rename = "aveFDE")]
    AveFde,
}

impl ErrorVariant {
    pub const ALL: [ErrorVariant; 6] = [
        ErrorVariant::Ade,
        ErrorVariant::Fde,
        ErrorVariant::MinAde,
        ErrorVariant::MinFde,
        ErrorVariant::AveAde,
        ErrorVariant::AveFde,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorVariant::Ade => "ADE",
            ErrorVariant::Fde => "FDE",
            ErrorVariant::MinAde => "minADE",
            ErrorVariant::MinFde => "minFDE",
            ErrorVariant::AveAde => "aveADE",
            ErrorVariant::AveFde => "aveFDE",
        }
    }

    fn is_final_step(self) -> bool {
        matches!(self, ErrorVariant::Fde | ErrorVariant::MinFde | ErrorVariant::AveFde)
    }
}

impl fmt::Display for ErrorVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ErrorVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ErrorVariant::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s) || v.as_str().replace("ADE", "_ade").replace("FDE", "_fde").eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::invalid(format!("unknown error variant `{s}`")))
    }
}

/// How the per-step mixture over predicted positions is built.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum GmmConstruction {
    /// One isotropic component per mode.
    Modes { sigma0: f64 },
    /// EM over the mode positions with a fixed component count.
    Em { n_components: usize, em: EmConfig },
    /// Modes for up to 8 samples, EM with `min(3, M/3)` components above.
    Auto { sigma0: f64, em: EmConfig },
}

impl Default for GmmConstruction {
    fn default() -> Self {
        GmmConstruction::Auto {
            sigma0: 0.5,
            em: EmConfig::default(),
        }
    }
}

const AUTO_EM_THRESHOLD: usize = 9;

/// Collapsed covariance of one agent's predicted positions at step `t`.
pub fn step_covariance<T: Scalar>(pred: &PredictionSet<T>, t: usize, construction: &GmmConstruction) -> Result<Cov2<T>> {
    let em_fit = |k: usize, em: &EmConfig| -> Result<Cov2<T>> {
        let points: Vec<_> = pred.modes.iter().map(|m| m.points[t]).collect();
        Ok(collapse(&fit_em(&points, k, em)?.gmm))
    };
    match *construction {
        GmmConstruction::Modes { sigma0 } => Ok(collapse(&modes_as_gmm(pred, t, T::lit(sigma0))?)),
        GmmConstruction::Em { n_components, ref em } => {
            if t >= pred.horizon() {
                return Err(Error::invalid(format!("timestep {t} outside horizon {}", pred.horizon())));
            }
            em_fit(n_components, em)
        }
        GmmConstruction::Auto { sigma0, ref em } => {
            let m = pred.num_modes();
            if m >= AUTO_EM_THRESHOLD && t < pred.horizon() {
                em_fit((m / 3).min(3), em)
            } else {
                Ok(collapse(&modes_as_gmm(pred, t, T::lit(sigma0))?))
            }
        }
    }
}

/// GMM-area diversity: mean over agents and steps of `√det Σ_t`, in m².
pub fn gad<T: Scalar>(preds: &[PredictionSet<T>], construction: &GmmConstruction) -> Result<T> {
    let Some(first) = preds.first() else {
        return Err(Error::invalid("gad needs at least one prediction set"));
    };
    let horizon = first.horizon();
    if horizon == 0 {
        return Err(Error::invalid("prediction sets have empty horizon"));
    }
    if preds.iter().any(|p| p.horizon() != horizon) {
        return Err(Error::invalid("prediction sets must share the horizon"));
    }
    let mut total = T::zero();
    for pred in preds {
        for t in 0..horizon {
            total += diversity_area(&step_covariance(pred, t, construction)?);
        }
    }
    Ok(total / T::of_usize(preds.len() * horizon))
}

fn mode_errors<T: Scalar>(mode: &Trajectory<T>, truth: &Trajectory<T>) -> (T, T) {
    let n = mode.len();
    let sum: T = mode.points.iter().zip(&truth.points).map(|(p, q)| p.distance(*q)).sum();
    (sum / T::of_usize(n), mode.points[n - 1].distance(truth.points[n - 1]))
}

/// Displacement error of one agent's prediction set against its truth, in m.
pub fn displacement_error<T: Scalar>(preds: &PredictionSet<T>, truth: &Trajectory<T>, variant: ErrorVariant) -> Result<T> {
    if preds.modes.is_empty() {
        return Err(Error::invalid("prediction set has no modes"));
    }
    if preds.horizon() != truth.len() {
        return Err(Error::HorizonMismatch {
            predicted: preds.horizon(),
            truth: truth.len(),
        });
    }
    let per_mode: Vec<T> = preds
        .modes
        .iter()
        .map(|m| {
            let (ade, fde) = mode_errors(m, truth);
            if variant.is_final_step() {
                fde
            } else {
                ade
            }
        })
        .collect();
    Ok(match variant {
        ErrorVariant::Ade | ErrorVariant::Fde => per_mode[preds.best_mode()],
        ErrorVariant::MinAde | ErrorVariant::MinFde => per_mode.iter().copied().fold(T::infinity(), T::min),
        ErrorVariant::AveAde | ErrorVariant::AveFde => {
            per_mode.iter().copied().sum::<T>() / T::of_usize(per_mode.len())
        }
    })
}

/// All six error variants for one evaluation unit.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ErrorSet {
    pub ade: f64,
    pub fde: f64,
    pub min_ade: f64,
    pub min_fde: f64,
    pub ave_ade: f64,
    pub ave_fde: f64,
}

impl ErrorSet {
    pub fn get(&self, v: ErrorVariant) -> f64 {
        match v {
            ErrorVariant::Ade => self.ade,
            ErrorVariant::Fde => self.fde,
            ErrorVariant::MinAde => self.min_ade,
            ErrorVariant::MinFde => self.min_fde,
            ErrorVariant::AveAde => self.ave_ade,
            ErrorVariant::AveFde => self.ave_fde,
        }
    }

    fn get_mut(&mut self, v: ErrorVariant) -> &mut f64 {
        match v {
            ErrorVariant::Ade => &mut self.ade,
            ErrorVariant::Fde => &mut self.fde,
            ErrorVariant::MinAde => &mut self.min_ade,
            ErrorVariant::MinFde => &mut self.min_fde,
            ErrorVariant::AveAde => &mut self.ave_ade,
            ErrorVariant::AveFde => &mut self.ave_fde,
        }
    }

    pub fn of(preds: &PredictionSet<f64>, truth: &Trajectory<f64>) -> Result<Self> {
        let mut out = ErrorSet::default();
        for v in ErrorVariant::ALL {
            *out.get_mut(v) = displacement_error(preds, truth, v)?;
        }
        Ok(out)
    }

    fn accumulate(&mut self, other: &ErrorSet, scale: f64) {
        for v in ErrorVariant::ALL {
            *self.get_mut(v) += other.get(v) * scale;
        }
    }
}

/// Predictions made at one closed-loop step, with the matching truths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionFrame {
    pub step: usize,
    pub predictions: Vec<PredictionSet<f64>>,
    pub truths: BTreeMap<AgentId, Trajectory<f64>>,
}

/// Everything one (scenario, predictor) pair produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricInput {
    pub scenario_id: String,
    pub predictor_id: String,
    pub frames: Vec<PredictionFrame>,
}

/// Per-(scenario, predictor) metrics averaged over frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub scenario_id: String,
    pub predictor_id: String,
    pub gad: f64,
    pub errors: ErrorSet,
    pub frames: usize,
    /// Number of (frame, agent) pairs with a truth but no prediction.
    pub missing: usize,
}

impl MetricRow {
    pub fn key(&self) -> (&str, &str) {
        (&self.scenario_id, &self.predictor_id)
    }

    pub fn flagged(&self) -> bool {
        self.missing > 0
    }
}

/// Computes one row per input, ordered by (scenario_id, predictor_id).
pub fn batch_metrics(inputs: &[MetricInput], construction: &GmmConstruction) -> Result<Vec<MetricRow>> {
    let mut seen = BTreeSet::new();
    for inp in inputs {
        if !seen.insert((inp.scenario_id.as_str(), inp.predictor_id.as_str())) {
            return Err(Error::DuplicateKey(format!("{}, {}", inp.scenario_id, inp.predictor_id)));
        }
    }
    let mut rows = inputs
        .iter()
        .map(|inp| metric_row(inp, construction))
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| a.key().cmp(&b.key()));
    Ok(rows)
}

fn metric_row(inp: &MetricInput, construction: &GmmConstruction) -> Result<MetricRow> {
    let mut gad_sum = 0.0;
    let mut gad_frames = 0usize;
    let mut errors = ErrorSet::default();
    let mut err_frames = 0usize;
    let mut missing = 0usize;
    for frame in &inp.frames {
        let predicted: BTreeSet<AgentId> = frame.predictions.iter().map(|p| p.agent_id).collect();
        missing += frame.truths.keys().filter(|id| !predicted.contains(id)).count();
        if frame.predictions.is_empty() {
            continue;
        }
        gad_sum += gad(&frame.predictions, construction)?;
        gad_frames += 1;

        let mut frame_err = ErrorSet::default();
        let mut n = 0usize;
        for pred in &frame.predictions {
            if let Some(truth) = frame.truths.get(&pred.agent_id) {
                frame_err.accumulate(&ErrorSet::of(pred, truth)?, 1.0);
                n += 1;
            }
        }
        if n > 0 {
            errors.accumulate(&frame_err, 1.0 / n as f64);
            err_frames += 1;
        }
    }
    let mut out = ErrorSet::default();
    if err_frames > 0 {
        out.accumulate(&errors, 1.0 / err_frames as f64);
    }
    Ok(MetricRow {
        scenario_id: inp.scenario_id.clone(),
        predictor_id: inp.predictor_id.clone(),
        gad: if gad_frames > 0 { gad_sum / gad_frames as f64 } else { 0.0 },
        errors: out,
        frames: inp.frames.len(),
        missing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Point2;
    use crate::gmm::Sym2;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn traj(points: Vec<(f64, f64)>) -> Trajectory<f64> {
        Trajectory::new(points.into_iter().map(|(x, y)| Point2::new(x, y)).collect(), 0.1).unwrap()
    }

    fn straight(n: usize) -> Trajectory<f64> {
        traj((0..n).map(|t| (t as f64, 0.0)).collect())
    }

    fn set(modes: Vec<Trajectory<f64>>) -> PredictionSet<f64> {
        PredictionSet::new(AgentId(1), modes, None).unwrap()
    }

    const MODES: GmmConstruction = GmmConstruction::Modes { sigma0: 0.5 };

    #[test]
    fn exact_mode_gives_zero_error() {
        let truth = straight(12);
        let p = set(vec![truth.clone()]);
        for v in ErrorVariant::ALL {
            assert_eq!(displacement_error(&p, &truth, v).unwrap(), 0.0, "{v}");
        }
    }

    #[test]
    fn three_four_five_offset() {
        let truth = straight(12);
        let p = set(vec![truth.translated(Point2::new(3.0, 4.0))]);
        assert_eq!(displacement_error(&p, &truth, ErrorVariant::Ade).unwrap(), 5.0);
        assert_eq!(displacement_error(&p, &truth, ErrorVariant::Fde).unwrap(), 5.0);
    }

    #[test]
    fn two_mode_hand_arithmetic() {
        let truth = straight(10);
        let mut bent = truth.clone();
        bent.points[9].y += 2.0;
        let p = set(vec![truth.clone(), bent]);
        let e = |v| displacement_error(&p, &truth, v).unwrap();
        assert_eq!(e(ErrorVariant::MinAde), 0.0);
        assert_eq!(e(ErrorVariant::MinFde), 0.0);
        assert_abs_diff_eq!(e(ErrorVariant::AveAde), 0.1, epsilon = 1e-15);
        assert_eq!(e(ErrorVariant::AveFde), 1.0);
        // mode 0 is the best mode under uniform weights
        assert_eq!(e(ErrorVariant::Ade), 0.0);
    }

    #[test]
    fn ade_follows_most_probable_mode() {
        let truth = straight(10);
        let off = truth.translated(Point2::new(0.0, 1.0));
        let p = PredictionSet::new(AgentId(1), vec![truth.clone(), off], Some(vec![0.2, 0.8])).unwrap();
        assert_eq!(displacement_error(&p, &truth, ErrorVariant::Ade).unwrap(), 1.0);
        assert_eq!(displacement_error(&p, &truth, ErrorVariant::MinAde).unwrap(), 0.0);
    }

    #[test]
    fn horizon_mismatch() {
        let p = set(vec![straight(10)]);
        let err = displacement_error(&p, &straight(12), ErrorVariant::Ade).unwrap_err();
        assert!(err.to_string().contains("horizon mismatch"));
    }

    #[test]
    fn identical_modes_give_sigma0_squared() {
        let p = set(vec![straight(15); 6]);
        assert_eq!(gad(&[p], &MODES).unwrap(), 0.25);
    }

    #[test]
    fn fan_beats_bundle() {
        let fan = set((0..6).map(|k| traj((0..15).map(|t| (t as f64, (k as f64 - 2.5) * 0.3 * t as f64)).collect())).collect());
        let bundle = set((0..6).map(|k| traj((0..15).map(|t| (t as f64, (k as f64 - 2.5) * 0.01 * t as f64)).collect())).collect());
        assert!(gad(&[fan], &MODES).unwrap() > gad(&[bundle], &MODES).unwrap());
    }

    #[test]
    fn between_term_scales_quadratically() {
        // The between-mode area scales by s² when endpoints are stretched about their mean.
        let p = set((0..6)
            .map(|k| traj((0..15).map(|t| (t as f64 + (k % 3) as f64, (k as f64) * 0.4 * t as f64 - (k * k) as f64 * 0.1)).collect()))
            .collect());
        let s = 3.0;
        for t in 1..15 {
            let g = modes_as_gmm(&p, t, 1e-3).unwrap();
            let (between, _) = g.covariance_parts();
            let mean = g.mean();
            let scaled_modes: Vec<Trajectory<f64>> = p
                .modes
                .iter()
                .map(|m| {
                    let mut m = m.clone();
                    m.points[t] = mean + (m.points[t] - mean) * s;
                    m
                })
                .collect();
            let g2 = modes_as_gmm(&set(scaled_modes), t, 1e-3).unwrap();
            let (between2, _) = g2.covariance_parts();
            let a = between.det().max(0.0).sqrt();
            let b = between2.det().max(0.0).sqrt();
            assert!((b - 9.0 * a).abs() < 1e-9 * (1.0 + b), "t={t}: {a} {b}");
        }
    }

    #[test]
    fn empty_gad_rejected() {
        assert!(gad::<f64>(&[], &MODES).is_err());
    }

    #[test]
    fn auto_construction_switches_to_em() {
        let nine = set((0..9).map(|k| traj((0..5).map(|t| (t as f64, k as f64)).collect())).collect());
        let auto = gad(std::slice::from_ref(&nine), &GmmConstruction::default()).unwrap();
        let modes = gad(&[nine], &MODES).unwrap();
        assert!(auto > 0.0 && modes > 0.0);
        assert_ne!(auto, modes);
    }

    #[test]
    fn f32_metrics() {
        let truth = Trajectory::new((0..5).map(|t| Point2::new(t as f32, 0.0)).collect(), 0.1f32).unwrap();
        let p = PredictionSet::new(AgentId(0), vec![truth.translated(Point2::new(3.0, 4.0))], None).unwrap();
        assert_eq!(displacement_error(&p, &truth, ErrorVariant::Fde).unwrap(), 5.0f32);
        let g = gad(&[p], &MODES).unwrap();
        assert!((g - 0.25f32).abs() < 1e-6);
    }

    fn input(scenario: &str, predictor: &str) -> MetricInput {
        let truth = straight(15);
        let mut truths = BTreeMap::new();
        truths.insert(AgentId(1), truth.clone());
        truths.insert(AgentId(2), truth.clone());
        MetricInput {
            scenario_id: scenario.into(),
            predictor_id: predictor.into(),
            frames: vec![PredictionFrame {
                step: 0,
                predictions: vec![set(vec![truth.translated(Point2::new(0.0, 1.0)); 6])],
                truths,
            }],
        }
    }

    #[test]
    fn batch_cardinality_order_and_flags() {
        assert!(batch_metrics(&[], &MODES).unwrap().is_empty());
        let rows = batch_metrics(
            &[input("s2", "cv"), input("s1", "noisy"), input("s1", "cv"), input("s2", "noisy")],
            &MODES,
        )
        .unwrap();
        assert_eq!(rows.len(), 4);
        let keys: Vec<_> = rows.iter().map(|r| (r.scenario_id.as_str(), r.predictor_id.as_str())).collect();
        assert_eq!(keys, vec![("s1", "cv"), ("s1", "noisy"), ("s2", "cv"), ("s2", "noisy")]);
        // agent 2 has a truth but no prediction
        assert!(rows.iter().all(|r| r.flagged() && r.missing == 1));
        assert_eq!(rows[0].errors.ade, 1.0);
        assert_eq!(rows[0].gad, 0.25);
    }

    #[test]
    fn batch_duplicate_key() {
        let err = batch_metrics(&[input("s1", "cv"), input("s1", "cv")], &MODES).unwrap_err();
        assert!(err.to_string().contains("duplicate evaluation key"));
    }

    fn arb_modes() -> impl Strategy<Value = (Trajectory<f64>, Vec<Trajectory<f64>>)> {
        (1usize..7, 2usize..12).prop_flat_map(|(m, n)| {
            let pts = move || prop::collection::vec((-20.0..20.0f64, -20.0..20.0f64), n);
            (pts(), prop::collection::vec(pts(), m)).prop_map(|(t, modes)| {
                (traj(t), modes.into_iter().map(traj).collect())
            })
        })
    }

    proptest! {
        #[test]
        fn min_never_exceeds_average((truth, modes) in arb_modes()) {
            let p = set(modes);
            let e = ErrorSet::of(&p, &truth).unwrap();
            prop_assert!(e.min_ade <= e.ave_ade + 1e-12);
            prop_assert!(e.min_fde <= e.ave_fde + 1e-12);
            for v in ErrorVariant::ALL {
                prop_assert!(e.get(v) >= 0.0);
            }
        }

        #[test]
        fn metrics_translation_invariant((truth, modes) in arb_modes(), ox in -100.0..100.0f64, oy in -100.0..100.0f64) {
            let off = Point2::new(ox, oy);
            let p = set(modes);
            let a = ErrorSet::of(&p, &truth).unwrap();
            let b = ErrorSet::of(&p.translated(off), &truth.translated(off)).unwrap();
            for v in ErrorVariant::ALL {
                prop_assert!((a.get(v) - b.get(v)).abs() < 1e-9);
            }
            let ga = gad(std::slice::from_ref(&p), &MODES).unwrap();
            let gb = gad(&[p.translated(off)], &MODES).unwrap();
            prop_assert!((ga - gb).abs() < 1e-7 * (1.0 + ga));
        }

        #[test]
        fn gad_permutation_invariant((_truth, modes) in arb_modes(), rot in 0usize..6) {
            let p = set(modes.clone());
            let mut shuffled = modes;
            let k = rot % shuffled.len();
            shuffled.rotate_left(k);
            shuffled.reverse();
            let q = set(shuffled);
            let a = gad(&[p.clone(), q.clone()], &MODES).unwrap();
            let b = gad(&[q, p], &MODES).unwrap();
            prop_assert!((a - b).abs() < 1e-9 * (1.0 + a));
        }

        #[test]
        fn duplicated_mode_matches_brute_force((_truth, modes) in arb_modes(), pick in 0usize..6, t_pick in 0usize..12) {
            // Duplicating mode j moves the between-mode covariance to
            // n/(n+1)·S + n/(n+1)²·d dᵀ with d the offset of mode j from the mean.
            let n = modes.len();
            let j = pick % n;
            let t = t_pick % modes[0].len();
            let before = modes_as_gmm(&set(modes.clone()), t, 0.5).unwrap();
            let (s, _) = before.covariance_parts();
            let d = modes[j].points[t] - before.mean();
            let mut dup = modes.clone();
            dup.push(modes[j].clone());
            let after = modes_as_gmm(&set(dup), t, 0.5).unwrap();
            let (s2, within) = after.covariance_parts();

            let nf = n as f64;
            let predicted = s.scale(nf / (nf + 1.0)).add(&Sym2::outer(d).scale(nf / ((nf + 1.0) * (nf + 1.0))));
            // brute force over the enlarged point set
            let pts: Vec<Point2<f64>> = after.components().iter().map(|c| c.mean).collect();
            let m = pts.iter().fold(Point2::zero(), |a, p| a + *p) * (1.0 / (nf + 1.0));
            let brute = pts.iter().fold(Sym2::zero(), |acc, p| acc.add(&Sym2::outer(*p - m))).scale(1.0 / (nf + 1.0));
            for (x, y, z) in [(s2.xx, predicted.xx, brute.xx), (s2.xy, predicted.xy, brute.xy), (s2.yy, predicted.yy, brute.yy)] {
                prop_assert!((x - y).abs() < 1e-9 * (1.0 + y.abs()));
                prop_assert!((x - z).abs() < 1e-9 * (1.0 + z.abs()));
            }
            // Duplicating a mode never changes the within term.
            prop_assert!((within.xx - 0.25).abs() < 1e-12 && (within.yy - 0.25).abs() < 1e-12);
            // The between term grows only along d, and only if d is far from the mean.
            if d.norm_sq() <= s.trace() / (nf + 1.0) * 0.0 + 1e-300 {
                prop_assert!(s2.trace() <= s.trace() + 1e-12);
            }
        }
    }
}
