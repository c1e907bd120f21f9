//! Driving performance of an executed ego trajectory.

use crate::domain::{jerk_profile, PerformanceRecord, ScenarioLog, Trajectory};
use crate::error::{Error, Result};
use crate::geom::Point2;

use super::planner::Reference;

/// Gap below which the episode counts as a collision.
pub const COLLISION_GAP: f64 = 1.0;
/// Gap at which the proximity penalty vanishes.
pub const SAFE_GAP: f64 = 5.0;
/// Discomfort that saturates the normalised discomfort term.
pub const DISCOMFORT_CAP: f64 = 5.0;
pub const W_DISCOMFORT: f64 = 0.5;
pub const W_UNSAFETY: f64 = 2.0;

/// Ground-truth position of an agent `k` steps after the current frame.
pub(crate) fn agent_position(log: &ScenarioLog, id: crate::domain::AgentId, k: usize) -> Option<Point2<f64>> {
    if k == 0 {
        log.agents.get(&id)?.last().map(|s| s.planar())
    } else {
        log.futures.get(&id)?.points.get(k - 1).copied()
    }
}

pub fn overall(efficiency: f64, discomfort: f64, unsafety: f64) -> f64 {
    efficiency - W_DISCOMFORT * (discomfort / DISCOMFORT_CAP).min(1.0) - W_UNSAFETY * unsafety
}

/// Scores `ego` (point 0 at the current frame, one point per step) over
/// `horizon` steps against the logged agents.
///
/// Jerk is taken over the ego's last three history positions followed by
/// the trajectory.
pub fn driving_performance(ego: &Trajectory<f64>, log: &ScenarioLog, horizon: usize) -> Result<PerformanceRecord> {
    if ego.len() < horizon + 1 {
        return Err(Error::invalid(format!(
            "ego trajectory has {} points, horizon needs {}",
            ego.len(),
            horizon + 1
        )));
    }
    let reference = Reference::from_path(&log.reference_path)?;
    let (s0, _) = reference.to_frenet(ego.points[0]);
    let (s1, _) = reference.to_frenet(ego.points[horizon]);
    let expected = log.nominal_speed * horizon as f64 * ego.dt;
    let efficiency = if expected > 0.0 { ((s1 - s0) / expected).clamp(0.0, 1.0) } else { 1.0 };

    let mut pts: Vec<Point2<f64>> = log
        .agents
        .get(&log.ego_id)
        .map(|h| h.iter().rev().skip(1).take(3).rev().map(|s| s.planar()).collect())
        .unwrap_or_default();
    pts.extend_from_slice(&ego.points[..=horizon]);
    let jerks = jerk_profile(&Trajectory { points: pts, dt: ego.dt })?;
    let discomfort = jerks.iter().sum::<f64>() / jerks.len() as f64;

    let mut min_gap = f64::INFINITY;
    for id in log.others() {
        for k in 0..=horizon {
            if let Some(p) = agent_position(log, id, k) {
                min_gap = min_gap.min(p.distance(ego.points[k]));
            }
        }
    }
    let unsafety = if min_gap < COLLISION_GAP { 1.0 } else { (1.0 - min_gap / SAFE_GAP).max(0.0) };
    Ok(PerformanceRecord {
        efficiency,
        discomfort,
        unsafety,
        overall: overall(efficiency, discomfort, unsafety),
    })
}
