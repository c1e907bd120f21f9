//! Seeded scenario generator.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EPISODE_STEPS, HISTORY_STEPS, LANE_WIDTH};
use crate::domain::{AgentId, AgentState, ScenarioKind, ScenarioLog, Trajectory, DEFAULT_DT, PREDICTION_STEPS};
use crate::error::{Error, Result};
use crate::geom::Point2;

/// Future steps stored per agent: the episode plus one prediction horizon.
pub const FUTURE_STEPS: usize = EPISODE_STEPS + PREDICTION_STEPS;

/// A longitudinal acceleration held over `[start, end)` seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
struct AccelEvent {
    start: f64,
    end: f64,
    accel: f64,
}

/// A smooth lateral shift of `delta` metres over `[start, start + duration]`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct LaneShift {
    start: f64,
    duration: f64,
    delta: f64,
}

/// Kinematic script of one agent; time 0 is the current frame.
#[derive(Debug, Clone, PartialEq)]
struct AgentPlan {
    /// Position at time 0.
    origin: Point2<f64>,
    heading: Point2<f64>,
    /// Speed over the whole history.
    speed: f64,
    accel: Vec<AccelEvent>,
    shift: Option<LaneShift>,
    max_speed: f64,
}

impl AgentPlan {
    fn straight(origin: Point2<f64>, heading: Point2<f64>, speed: f64) -> Self {
        Self {
            origin,
            heading,
            speed,
            accel: Vec::new(),
            shift: None,
            max_speed: 40.0,
        }
    }

    fn accel_at(&self, t: f64) -> f64 {
        self.accel
            .iter()
            .filter(|e| t >= e.start && t < e.end)
            .map(|e| e.accel)
            .sum()
    }

    /// Lateral offset and its first two derivatives at `t`.
    fn lateral(&self, t: f64) -> (f64, f64, f64) {
        let Some(sh) = self.shift else {
            return (0.0, 0.0, 0.0);
        };
        let u = ((t - sh.start) / sh.duration).clamp(0.0, 1.0);
        if u <= 0.0 || u >= 1.0 {
            return (if u >= 1.0 { sh.delta } else { 0.0 }, 0.0, 0.0);
        }
        let blend = u * u * u * (10.0 - 15.0 * u + 6.0 * u * u);
        let d1 = 30.0 * u * u * (1.0 - u) * (1.0 - u) / sh.duration;
        let d2 = 60.0 * u * (1.0 - u) * (1.0 - 2.0 * u) / (sh.duration * sh.duration);
        (sh.delta * blend, sh.delta * d1, sh.delta * d2)
    }

    /// States at times `-(HISTORY_STEPS-1)·dt ..= FUTURE_STEPS·dt`.
    fn rollout(&self, id: AgentId, dt: f64) -> Vec<AgentState> {
        let total = HISTORY_STEPS + FUTURE_STEPS;
        let t0 = -((HISTORY_STEPS - 1) as f64) * dt;
        let mut s = vec![0.0; total];
        let mut v = vec![0.0; total];
        let mut a = vec![0.0; total];
        v[0] = self.speed;
        for k in 0..total - 1 {
            let t = t0 + k as f64 * dt;
            let next = (v[k] + self.accel_at(t) * dt).clamp(0.0, self.max_speed);
            a[k] = (next - v[k]) / dt;
            v[k + 1] = next;
            s[k + 1] = s[k] + 0.5 * (v[k] + next) * dt;
        }
        a[total - 1] = a[total - 2];
        let s_now = s[HISTORY_STEPS - 1];
        let normal = self.heading.perp();
        (0..total)
            .map(|k| {
                let t = t0 + k as f64 * dt;
                let (d, dd, ddd) = self.lateral(t);
                let p = self.origin + self.heading * (s[k] - s_now) + normal * d;
                let vel = self.heading * v[k] + normal * dd;
                let acc = self.heading * a[k] + normal * ddd;
                AgentState {
                    agent_id: id,
                    timestep: k as u32,
                    position: [p.x, p.y, 0.0],
                    velocity: [vel.x, vel.y, 0.0],
                    acceleration: [acc.x, acc.y, 0.0],
                }
            })
            .collect()
    }
}

/// Tunable generator ranges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub highway_speed: (f64, f64),
    pub intersection_speed: (f64, f64),
    pub merge_speed: (f64, f64),
    /// Probability that a highway neighbor changes lanes away from the ego.
    pub highway_lane_change: f64,
    /// Probability that a highway agent is a same-lane leader.
    pub highway_leader: f64,
    pub highway_leader_dv: (f64, f64),
    /// Initial longitudinal offset of adjacent-lane agents.
    pub highway_adjacent_x: (f64, f64),
    /// Adjacent-lane speed relative to the ego.
    pub highway_adjacent_dv: (f64, f64),
    /// Probability that the intersection conflict agent is a waiting agent
    /// that pulls out, rather than a through agent.
    pub intersection_pull_out: f64,
    /// Probability that a waiting agent pulls out.
    pub pull_out_go: f64,
    /// Probability that a through agent brakes to yield.
    pub through_yield: f64,
    /// How far ahead of the ego (s) a pulling-out agent reaches the ego lane.
    pub pull_out_lead: (f64, f64),
    /// How far ahead of the ego (s) a through agent reaches the crossing.
    pub through_lead: (f64, f64),
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            highway_speed: (24.0, 30.0),
            intersection_speed: (10.0, 14.0),
            merge_speed: (18.0, 24.0),
            highway_lane_change: 0.8,
            highway_leader: 0.2,
            highway_leader_dv: (0.0, 3.0),
            highway_adjacent_x: (-5.0, 45.0),
            highway_adjacent_dv: (-7.0, -1.0),
            intersection_pull_out: 0.5,
            pull_out_go: 0.6,
            through_yield: 0.35,
            pull_out_lead: (0.5, 1.5),
            through_lead: (-0.5, 1.5),
        }
    }
}

fn kind_salt(kind: ScenarioKind) -> u64 {
    match kind {
        ScenarioKind::Highway => 0x4869_6768,
        ScenarioKind::Intersection => 0x496e_7473,
        ScenarioKind::Merge => 0x4d65_7267,
        ScenarioKind::Replayed => 0,
    }
}

fn uniform(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    if range.1 > range.0 {
        rng.random_range(range.0..range.1)
    } else {
        range.0
    }
}

/// Picks a longitudinal slot in `lane` at least `spacing` from every taken slot.
fn free_slot(rng: &mut ChaCha8Rng, taken: &[(i32, f64)], lane: i32, range: (f64, f64), spacing: f64) -> Option<f64> {
    for _ in 0..50 {
        let x = uniform(rng, range);
        if taken.iter().all(|&(l, tx)| l != lane || (tx - x).abs() >= spacing) {
            return Some(x);
        }
    }
    None
}

const EAST: Point2<f64> = Point2 { x: 1.0, y: 0.0 };

fn highway(rng: &mut ChaCha8Rng, n_agents: usize, cfg: &GeneratorConfig) -> (f64, Vec<AgentPlan>) {
    let v_nom = uniform(rng, cfg.highway_speed);
    let mut plans = vec![AgentPlan::straight(Point2::zero(), EAST, v_nom)];
    let mut taken = vec![(0, 0.0)];
    // Each adjacent lane flows at a common speed so same-lane agents keep their gaps.
    let lane_dv = [uniform(rng, cfg.highway_adjacent_dv), uniform(rng, cfg.highway_adjacent_dv)];
    for _ in 1..n_agents {
        let same_lane = rng.random_bool(cfg.highway_leader);
        let lane: i32 = if same_lane {
            0
        } else if rng.random_bool(0.5) {
            1
        } else {
            -1
        };
        // The ego overtakes slower traffic in the adjacent lanes.
        let (range, dv) = if same_lane {
            ((35.0, 70.0), uniform(rng, cfg.highway_leader_dv))
        } else {
            (cfg.highway_adjacent_x, lane_dv[(lane > 0) as usize] + uniform(rng, (-0.3, 0.3)))
        };
        let Some(x) = free_slot(rng, &taken, lane, range, 16.0) else {
            continue;
        };
        taken.push((lane, x));
        let speed = v_nom + dv;
        let mut plan = AgentPlan::straight(Point2::new(x, LANE_WIDTH * lane as f64), EAST, speed);
        let t = uniform(rng, (0.0, 2.5));
        plan.accel.push(AccelEvent {
            start: t,
            end: t + uniform(rng, (0.5, 1.5)),
            accel: uniform(rng, (-0.6, 0.6)),
        });
        if lane != 0 && rng.random_bool(cfg.highway_lane_change) {
            plan.shift = Some(LaneShift {
                start: uniform(rng, (0.0, 2.0)),
                duration: uniform(rng, (1.5, 3.0)),
                delta: LANE_WIDTH * lane as f64,
            });
        }
        plans.push(plan);
    }
    (v_nom, plans)
}

fn intersection(rng: &mut ChaCha8Rng, n_agents: usize, cfg: &GeneratorConfig) -> (f64, Vec<AgentPlan>) {
    let v_nom = uniform(rng, cfg.intersection_speed);
    let mut plans = vec![AgentPlan::straight(Point2::zero(), EAST, v_nom)];
    let crossing = uniform(rng, (18.0, 30.0));
    let t_ego = crossing / v_nom;
    let from_south = rng.random_bool(0.5);
    let heading = if from_south { Point2::new(0.0, 1.0) } else { Point2::new(0.0, -1.0) };
    // Crossing lanes sit to the right of their direction of travel.
    let lane_x = crossing + if from_south { 1.75 } else { -1.75 };

    if rng.random_bool(cfg.intersection_pull_out) {
        // Waiting agent creeping at the stop line; it either pulls out or stops.
        let dist = uniform(rng, (5.0, 9.0));
        let origin = Point2::new(lane_x, 0.0) - heading * dist;
        let creep = uniform(rng, (0.5, 2.0));
        let mut plan = AgentPlan::straight(origin, heading, creep);
        if rng.random_bool(cfg.pull_out_go) {
            // Times the pull-out to reach the ego lane shortly before the ego.
            let accel = uniform(rng, (2.5, 4.0));
            let target = t_ego - uniform(rng, cfg.pull_out_lead);
            let arrival = |go: f64| {
                let rest = dist - creep * go;
                go + (-creep + (creep * creep + 2.0 * accel * rest.max(0.0)).sqrt()) / accel
            };
            let (mut lo, mut hi) = (-1.2, t_ego.max(-1.2));
            for _ in 0..50 {
                let mid = 0.5 * (lo + hi);
                if arrival(mid) < target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            plan.accel.push(AccelEvent {
                start: lo,
                end: lo + 3.0,
                accel,
            });
        } else {
            plan.accel.push(AccelEvent {
                start: -uniform(rng, (0.3, 1.0)),
                end: 10.0,
                accel: -1.5,
            });
        }
        plan.max_speed = 12.0;
        plans.push(plan);
    } else {
        let speed = uniform(rng, (7.0, 12.0));
        let arrival = t_ego - uniform(rng, cfg.through_lead);
        let origin = Point2::new(lane_x, 0.0) - heading * (speed * arrival);
        let mut plan = AgentPlan::straight(origin, heading, speed);
        if rng.random_bool(cfg.through_yield) {
            // Already braking at the current frame; stops 6 m short of the crossing.
            let tau = uniform(rng, (0.3, 1.2));
            let dist = speed * arrival - 6.0;
            if dist > 1.0 {
                // Speed u at time 0 satisfies u² = 2·a·dist with a = (speed − u)/tau.
                let u = (-dist + (dist * dist + 2.0 * dist * speed * tau).sqrt()) / tau;
                plan.accel.push(AccelEvent {
                    start: -tau,
                    end: 10.0,
                    accel: -((speed - u) / tau).min(8.0),
                });
            }
        }
        plans.push(plan);
    }

    // Background: cross traffic well separated in time, and a distant leader.
    for i in 2..n_agents {
        if i == 2 && rng.random_bool(0.5) {
            let x = uniform(rng, (45.0, 70.0));
            let mut leader = AgentPlan::straight(Point2::new(x, 0.0), EAST, v_nom + uniform(rng, (0.0, 2.0)));
            if rng.random_bool(0.5) {
                // Pulls off to the right, away from the ego.
                leader.shift = Some(LaneShift {
                    start: uniform(rng, (0.0, 1.5)),
                    duration: uniform(rng, (1.5, 2.5)),
                    delta: -LANE_WIDTH,
                });
            }
            plans.push(leader);
            continue;
        }
        let speed = uniform(rng, (6.0, 11.0));
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let arrival = t_ego + sign * uniform(rng, (3.5, 6.0));
        // Opposite lane to the conflict agent.
        let h = -heading;
        let lx = crossing + if h.y > 0.0 { 1.75 } else { -1.75 };
        plans.push(AgentPlan::straight(Point2::new(lx, 0.0) - h * (speed * arrival), h, speed));
    }
    (v_nom, plans)
}

fn merge(rng: &mut ChaCha8Rng, n_agents: usize, cfg: &GeneratorConfig) -> (f64, Vec<AgentPlan>) {
    let v_nom = uniform(rng, cfg.merge_speed);
    let mut plans = vec![AgentPlan::straight(Point2::zero(), EAST, v_nom)];
    let x = uniform(rng, (-5.0, 30.0));
    let speed = v_nom + uniform(rng, (-5.0, 1.0));
    let mut merger = AgentPlan::straight(Point2::new(x, -LANE_WIDTH), EAST, speed);
    merger.shift = Some(LaneShift {
        start: uniform(rng, (0.2, 1.5)),
        duration: uniform(rng, (2.0, 3.0)),
        delta: LANE_WIDTH,
    });
    plans.push(merger);
    let mut taken = vec![(0, 0.0), (-1, x)];
    for _ in 2..n_agents {
        let lane: i32 = if rng.random_bool(0.5) { 1 } else { -1 };
        let Some(x) = free_slot(rng, &taken, lane, (-50.0, 70.0), 20.0) else {
            continue;
        };
        taken.push((lane, x));
        plans.push(AgentPlan::straight(
            Point2::new(x, LANE_WIDTH * lane as f64),
            EAST,
            v_nom + uniform(rng, (-3.0, 3.0)),
        ));
    }
    (v_nom, plans)
}

/// Generates a replayable scenario with `n_agents` agents including the ego.
pub fn generate_scenario(kind: ScenarioKind, seed: u64, n_agents: usize) -> Result<ScenarioLog> {
    generate_scenario_with(kind, seed, n_agents, &GeneratorConfig::default())
}

pub fn generate_scenario_with(kind: ScenarioKind, seed: u64, n_agents: usize, cfg: &GeneratorConfig) -> Result<ScenarioLog> {
    if !(2..=8).contains(&n_agents) {
        return Err(Error::invalid(format!("n_agents must lie in [2, 8], got {n_agents}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ kind_salt(kind).rotate_left(17));
    let (v_nom, plans) = match kind {
        ScenarioKind::Highway => highway(&mut rng, n_agents, cfg),
        ScenarioKind::Intersection => intersection(&mut rng, n_agents, cfg),
        ScenarioKind::Merge => merge(&mut rng, n_agents, cfg),
        ScenarioKind::Replayed => return Err(Error::UnsupportedKind(kind.to_string())),
    };
    let dt = DEFAULT_DT;
    let mut agents = BTreeMap::new();
    let mut futures = BTreeMap::new();
    for (i, plan) in plans.iter().enumerate() {
        let id = AgentId(i as u32);
        let states = plan.rollout(id, dt);
        let future = states[HISTORY_STEPS..].iter().map(AgentState::planar).collect();
        futures.insert(id, Trajectory::new(future, dt)?);
        agents.insert(id, states[..HISTORY_STEPS].to_vec());
    }
    let reach = v_nom * (FUTURE_STEPS as f64 * dt) * 1.5 + 50.0;
    Ok(ScenarioLog {
        scenario_id: format!("{kind}-{seed:06}"),
        kind,
        seed,
        dt,
        nominal_speed: v_nom,
        ego_id: AgentId(0),
        agents,
        futures,
        reference_path: vec![Point2::new(-50.0, 0.0), Point2::new(reach, 0.0)],
        predictions: Vec::new(),
    })
}
