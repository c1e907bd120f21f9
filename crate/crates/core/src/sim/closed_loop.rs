//! Receding-horizon episodes: predict, plan, execute one step, advance.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::performance::{agent_position, driving_performance};
use super::planner::{frenet_plan, FrenetState, PlannerConfig, Reference};
use super::predictor::{predict, PredictContext, PredictorKind};
use super::EPISODE_STEPS;
use crate::domain::{PerformanceRecord, ScenarioLog, Trajectory, CLASSIFIER_WINDOW, PREDICTION_STEPS};
use crate::error::{Error, Result};
use crate::metrics::{batch_metrics, GmmConstruction, MetricInput, MetricRow, PredictionFrame};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopConfig {
    pub planner: PlannerConfig,
    pub gmm: GmmConstruction,
    pub episode_steps: usize,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            planner: PlannerConfig::default(),
            gmm: GmmConstruction::default(),
            episode_steps: EPISODE_STEPS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub scenario_id: String,
    pub predictor_id: String,
    pub metrics: MetricRow,
    pub performance: PerformanceRecord,
    /// Executed ego positions, one per step from the current frame.
    pub ego: Trajectory<f64>,
    /// Planner states actually executed.
    pub states: Vec<FrenetState>,
    pub emergencies: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub scenario_id: String,
    pub predictor_id: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LoopOutput {
    pub results: Vec<EpisodeResult>,
    pub failures: Vec<Failure>,
}

fn initial_state(log: &ScenarioLog, reference: &Reference) -> FrenetState {
    let ego = log.ego_state();
    let (s, d) = reference.to_frenet(ego.planar());
    let t = reference.tangent;
    let n = t.perp();
    let v = ego.planar_velocity();
    let a = crate::geom::Point2::new(ego.acceleration[0], ego.acceleration[1]);
    FrenetState {
        s,
        d,
        vs: v.dot(t),
        vd: v.dot(n),
        as_: a.dot(t),
        ad: a.dot(n),
    }
}

/// Runs one episode of `kind` on `log`.
pub fn run_episode(log: &ScenarioLog, kind: &PredictorKind, cfg: &LoopConfig) -> Result<EpisodeResult> {
    kind.validate()?;
    let steps = cfg.episode_steps;
    if log.future_len() < steps + PREDICTION_STEPS {
        return Err(Error::invalid(format!(
            "futures cover {} steps, episode needs {}",
            log.future_len(),
            steps + PREDICTION_STEPS
        )));
    }
    let hist = log.history_len();
    if hist < 2 {
        return Err(Error::invalid("history too short for prediction"));
    }
    let reference = Reference::from_path(&log.reference_path)?;
    let others: Vec<_> = log.others().collect();
    // Positions from the first history frame through the last future frame.
    let tracks: BTreeMap<_, Vec<_>> = others
        .iter()
        .map(|&id| {
            let mut v: Vec<_> = log.agents[&id].iter().map(|s| s.planar()).collect();
            v.extend(log.futures[&id].points.iter().copied());
            (id, v)
        })
        .collect();
    let window = hist.min(CLASSIFIER_WINDOW);

    let mut state = initial_state(log, &reference);
    let mut points = vec![reference.to_world(state.s, state.d)];
    let mut states = Vec::with_capacity(steps);
    let mut frames = Vec::with_capacity(steps);
    let mut emergencies = 0;
    for k in 0..steps {
        let now = hist - 1 + k;
        let mut predictions = Vec::with_capacity(others.len());
        let mut truths = BTreeMap::new();
        for &id in &others {
            let track = &tracks[&id];
            let truth = &track[now + 1..now + 1 + PREDICTION_STEPS];
            let ctx = PredictContext {
                agent_id: id,
                history: &track[now + 1 - window..=now],
                truth: Some(truth),
                dt: log.dt,
                seed: log.seed,
                step: k,
            };
            predictions.push(predict(kind, &ctx)?);
            truths.insert(id, Trajectory::new(truth.to_vec(), log.dt)?);
        }
        let plan = frenet_plan(state, &reference, log.nominal_speed, log.dt, &predictions, &cfg.planner)?;
        emergencies += usize::from(plan.emergency);
        state = plan.states[0];
        states.push(state);
        points.push(plan.trajectory.points[0]);
        frames.push(PredictionFrame {
            step: k,
            predictions,
            truths,
        });
    }
    let ego = Trajectory::new(points, log.dt)?;
    let performance = driving_performance(&ego, log, steps)?;
    let predictor_id = kind.id();
    let metrics = batch_metrics(
        &[MetricInput {
            scenario_id: log.scenario_id.clone(),
            predictor_id: predictor_id.clone(),
            frames,
        }],
        &cfg.gmm,
    )?
    .remove(0);
    debug_assert!(agent_position(log, log.ego_id, 0).is_some());
    Ok(EpisodeResult {
        scenario_id: log.scenario_id.clone(),
        predictor_id,
        metrics,
        performance,
        ego,
        states,
        emergencies,
    })
}

/// Runs every (scenario, predictor) pair in parallel; output is ordered by
/// scenario id, then predictor id. Failed pairs are reported, not dropped.
pub fn run_closed_loop(scenarios: &[ScenarioLog], predictors: &[PredictorKind], cfg: &LoopConfig) -> LoopOutput {
    let pairs: Vec<(&ScenarioLog, &PredictorKind)> = scenarios
        .iter()
        .flat_map(|s| predictors.iter().map(move |p| (s, p)))
        .collect();
    let outcomes: Vec<(String, String, Result<EpisodeResult>)> = pairs
        .par_iter()
        .map(|(s, p)| (s.scenario_id.clone(), p.id(), run_episode(s, p, cfg)))
        .collect();
    let mut out = LoopOutput::default();
    for (scenario_id, predictor_id, res) in outcomes {
        match res {
            Ok(r) => out.results.push(r),
            Err(e) => out.failures.push(Failure {
                scenario_id,
                predictor_id,
                error: e.to_string(),
            }),
        }
    }
    out.results
        .sort_by(|a, b| (&a.scenario_id, &a.predictor_id).cmp(&(&b.scenario_id, &b.predictor_id)));
    out.failures
        .sort_by(|a, b| (&a.scenario_id, &a.predictor_id).cmp(&(&b.scenario_id, &b.predictor_id)));
    out
}
