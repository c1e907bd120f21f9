//! Domain types shared by every stage: agent states, trajectories,
//! multimodal predictions, scenario logs, and the per-run records.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Point2;
use crate::scalar::Scalar;

/// Number of history frames the criticality classifier consumes.
pub const CLASSIFIER_WINDOW: usize = 15;

/// Default simulation step in seconds.
pub const DEFAULT_DT: f64 = 0.1;

/// Prediction horizon in steps.
pub const PREDICTION_STEPS: usize = 15;

/// Number of modes every predictor emits.
pub const NUM_MODES: usize = 6;

const PROB_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgentId(pub u32);

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Kinematic state of one agent at one timestep. Positions are 3D; only the
/// classifier uses `z`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub agent_id: AgentId,
    pub timestep: u32,
    pub position: [f64; 3],
    pub velocity: [f64; 3],
    pub acceleration: [f64; 3],
}

impl AgentState {
    pub fn planar(&self) -> Point2<f64> {
        Point2::new(self.position[0], self.position[1])
    }

    pub fn planar_velocity(&self) -> Point2<f64> {
        Point2::new(self.velocity[0], self.velocity[1])
    }

    fn is_finite(&self) -> bool {
        self.position
            .iter()
            .chain(&self.velocity)
            .chain(&self.acceleration)
            .all(|v| v.is_finite())
    }
}

/// Sequence of planar positions sampled every `dt` seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory<T> {
    pub points: Vec<Point2<T>>,
    pub dt: T,
}

impl<T: Scalar> Trajectory<T> {
    pub fn new(points: Vec<Point2<T>>, dt: T) -> Result<Self> {
        let traj = Self { points, dt };
        match traj.check() {
            Some(msg) => Err(Error::invalid(msg)),
            None => Ok(traj),
        }
    }

    fn check(&self) -> Option<&'static str> {
        if self.points.is_empty() {
            Some("trajectory has no points")
        } else if !(self.dt > T::zero()) || !self.dt.is_finite() {
            Some("trajectory dt must be positive")
        } else if !self.points.iter().all(|p| p.is_finite()) {
            Some("trajectory has non-finite points")
        } else {
            None
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn last(&self) -> Point2<T> {
        *self.points.last().expect("non-empty trajectory")
    }

    /// Same trajectory shifted by `offset`.
    pub fn translated(&self, offset: Point2<T>) -> Self {
        Self {
            points: self.points.iter().map(|&p| p + offset).collect(),
            dt: self.dt,
        }
    }

    /// Total polyline length.
    pub fn arc_length(&self) -> T {
        self.points
            .windows(2)
            .map(|w| w[0].distance(w[1]))
            .fold(T::zero(), |a, b| a + b)
    }
}

/// Multimodal forecast for one agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet<T> {
    pub agent_id: AgentId,
    pub modes: Vec<Trajectory<T>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode_probs: Option<Vec<T>>,
}

impl<T: Scalar> PredictionSet<T> {
    pub fn new(agent_id: AgentId, modes: Vec<Trajectory<T>>, mode_probs: Option<Vec<T>>) -> Result<Self> {
        let set = Self {
            agent_id,
            modes,
            mode_probs,
        };
        if let Some(v) = set.violations().into_iter().next() {
            return Err(Error::invalid(v.to_string()));
        }
        Ok(set)
    }

    /// Prediction horizon `T_p` shared by all modes.
    pub fn horizon(&self) -> usize {
        self.modes.first().map_or(0, Trajectory::len)
    }

    pub fn num_modes(&self) -> usize {
        self.modes.len()
    }

    /// Mode weights, falling back to uniform when none were given.
    pub fn weights(&self) -> Vec<T> {
        match &self.mode_probs {
            Some(p) => p.clone(),
            None => {
                let w = T::one() / T::of_usize(self.modes.len().max(1));
                vec![w; self.modes.len()]
            }
        }
    }

    /// Index of the most probable mode; mode 0 under uniform weights.
    pub fn best_mode(&self) -> usize {
        let Some(probs) = &self.mode_probs else {
            return 0;
        };
        let mut best = 0;
        for (k, &p) in probs.iter().enumerate() {
            if p > probs[best] {
                best = k;
            }
        }
        best
    }

    pub fn translated(&self, offset: Point2<T>) -> Self {
        Self {
            agent_id: self.agent_id,
            modes: self.modes.iter().map(|m| m.translated(offset)).collect(),
            mode_probs: self.mode_probs.clone(),
        }
    }

    /// Invariant violations, empty when the set is well formed.
    pub fn violations(&self) -> Vec<Violation> {
        let field = format!("predictions[{}]", self.agent_id);
        let mut out = Vec::new();
        if self.modes.is_empty() {
            out.push(Violation::new(&field, "prediction set has no modes"));
            return out;
        }
        let horizon = self.modes[0].len();
        let dt = self.modes[0].dt;
        if self.modes.iter().any(|m| m.check().is_some()) {
            out.push(Violation::new(&field, "every mode must be a valid trajectory"));
        }
        if self.modes.iter().any(|m| m.len() != horizon || m.dt != dt) {
            out.push(Violation::new(&field, "all modes must share horizon and dt"));
        }
        if let Some(probs) = &self.mode_probs {
            let sum: f64 = probs.iter().map(|p| p.as_f64()).sum();
            if probs.len() != self.modes.len()
                || probs.iter().any(|&p| !(p >= T::zero()))
                || (sum - 1.0).abs() > PROB_SUM_TOL
            {
                out.push(Violation::new(
                    &field,
                    format!("PredictionSet normalization: mode_probs must be {} nonnegative weights summing to 1 (sum {sum})", self.modes.len()),
                ));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Highway,
    Intersection,
    Merge,
    /// Loaded from an external log; cannot be generated.
    Replayed,
}

impl ScenarioKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioKind::Highway => "highway",
            ScenarioKind::Intersection => "intersection",
            ScenarioKind::Merge => "merge",
            ScenarioKind::Replayed => "replayed",
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "highway" => Ok(ScenarioKind::Highway),
            "intersection" => Ok(ScenarioKind::Intersection),
            "merge" => Ok(ScenarioKind::Merge),
            "replayed" => Ok(ScenarioKind::Replayed),
            other => Err(Error::UnsupportedKind(other.to_string())),
        }
    }
}

/// One scenario: agent histories up to the current frame, ground-truth
/// futures after it, and the ego route.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioLog {
    pub scenario_id: String,
    pub kind: ScenarioKind,
    pub seed: u64,
    pub dt: f64,
    /// Ego cruise speed used by the planner and the efficiency score.
    pub nominal_speed: f64,
    pub ego_id: AgentId,
    pub agents: BTreeMap<AgentId, Vec<AgentState>>,
    pub futures: BTreeMap<AgentId, Trajectory<f64>>,
    pub reference_path: Vec<Point2<f64>>,
    /// Recorded forecasts, present for replayed logs.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub predictions: Vec<PredictionSet<f64>>,
}

impl ScenarioLog {
    pub fn history_len(&self) -> usize {
        self.agents.values().next().map_or(0, Vec::len)
    }

    pub fn future_len(&self) -> usize {
        self.futures.values().map(Trajectory::len).min().unwrap_or(0)
    }

    /// Non-ego agent ids in ascending order.
    pub fn others(&self) -> impl Iterator<Item = AgentId> + '_ {
        self.agents.keys().copied().filter(move |&id| id != self.ego_id)
    }

    /// Last history state of the ego.
    pub fn ego_state(&self) -> &AgentState {
        self.agents[&self.ego_id].last().expect("ego history non-empty")
    }
}

/// Closed-loop driving outcome for one episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerformanceRecord {
    pub efficiency: f64,
    /// Mean jerk magnitude in m/s³.
    pub discomfort: f64,
    pub unsafety: f64,
    pub overall: f64,
}

/// Evaluator output for one (scenario, predictor) pair alongside the
/// driving performance it is meant to track.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub scenario_id: String,
    pub predictor_id: String,
    pub p_critical: f64,
    pub gad: f64,
    pub e_error: f64,
    pub gad_norm: f64,
    pub e_error_norm: f64,
    pub score: f64,
    pub performance: PerformanceRecord,
}

/// A broken invariant, naming the offending field and the rule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl Violation {
    pub fn new(field: impl Into<String>, rule: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            rule: rule.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

/// Checks every scenario invariant; never aborts.
pub fn validate_scenario(log: &ScenarioLog) -> Vec<Violation> {
    let mut out = Vec::new();
    if !log.agents.contains_key(&log.ego_id) {
        out.push(Violation::new("agents", "ego agent missing from histories"));
    }
    if !log.futures.contains_key(&log.ego_id) {
        out.push(Violation::new("futures", "ego agent missing from futures"));
    }
    if !(log.dt > 0.0 && log.dt.is_finite()) {
        out.push(Violation::new("dt", "dt must be positive"));
    }
    if !(log.nominal_speed >= 0.0 && log.nominal_speed.is_finite()) {
        out.push(Violation::new("nominal_speed", "nominal speed must be finite and nonnegative"));
    }

    let lengths: Vec<usize> = log.agents.values().map(Vec::len).collect();
    if lengths.windows(2).any(|w| w[0] != w[1]) {
        out.push(Violation::new("agents", "all histories must have equal length"));
    }
    if lengths.iter().any(|&n| n < CLASSIFIER_WINDOW) {
        out.push(Violation::new(
            "agents",
            format!("history shorter than classifier window ({CLASSIFIER_WINDOW})"),
        ));
    }
    for (id, hist) in &log.agents {
        if hist.iter().any(|s| s.agent_id != *id) {
            out.push(Violation::new(format!("agents[{id}]"), "state agent_id does not match key"));
        }
        if hist.iter().any(|s| !s.is_finite()) {
            out.push(Violation::new(format!("agents[{id}]"), "non-finite state component"));
        }
        if hist.windows(2).any(|w| w[1].timestep <= w[0].timestep) {
            out.push(Violation::new(format!("agents[{id}]"), "timesteps must increase"));
        }
    }
    for (id, fut) in &log.futures {
        if let Some(msg) = fut.check() {
            out.push(Violation::new(format!("futures[{id}]"), msg));
        }
        if !log.agents.contains_key(id) {
            out.push(Violation::new(format!("futures[{id}]"), "future without history"));
        }
    }
    if log.reference_path.len() < 2 || !log.reference_path.iter().all(|p| p.is_finite()) {
        out.push(Violation::new("reference_path", "needs at least two finite points"));
    }
    for pred in &log.predictions {
        out.extend(pred.violations());
    }
    out
}

/// Jerk magnitudes from the third finite difference of positions.
///
/// Returns `len - 3` values in m/s³.
pub fn jerk_profile<T: Scalar>(traj: &Trajectory<T>) -> Result<Vec<T>> {
    let n = traj.points.len();
    if n < 4 {
        return Err(Error::InsufficientPoints(n));
    }
    let dt3 = traj.dt * traj.dt * traj.dt;
    let three = T::lit(3.0);
    Ok(traj
        .points
        .windows(4)
        .map(|w| {
            let d3 = w[3] - w[2] * three + w[1] * three - w[0];
            d3.norm() / dt3
        })
        .collect())
}
