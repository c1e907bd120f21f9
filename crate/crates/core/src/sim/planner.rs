//! Sampling Frenet planner against multimodal forecasts.

use serde::{Deserialize, Serialize};

use crate::domain::{PredictionSet, Trajectory, PREDICTION_STEPS};
use crate::error::{Error, Result};
use crate::geom::Point2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    /// Lateral targets in metres from the reference line.
    pub offsets: Vec<f64>,
    /// Target speeds as fractions of the nominal speed.
    pub speed_factors: Vec<f64>,
    pub w_jerk: f64,
    pub w_offset: f64,
    pub w_speed: f64,
    pub w_collision: f64,
    /// Disc radius for ego-to-mode overlap.
    pub collision_radius: f64,
    /// Deceleration of the emergency candidate, m/s².
    pub max_brake: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            offsets: vec![-3.0, -1.5, 0.0, 1.5, 3.0],
            speed_factors: vec![0.5, 0.75, 1.0, 1.25],
            w_jerk: 0.1,
            w_offset: 1.0,
            w_speed: 1.0,
            w_collision: 1e4,
            collision_radius: 2.0,
            max_brake: 8.0,
        }
    }
}

/// Ego kinematics in the reference frame: arc length `s`, lateral `d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrenetState {
    pub s: f64,
    pub d: f64,
    pub vs: f64,
    pub vd: f64,
    pub as_: f64,
    pub ad: f64,
}

/// Straight reference line through the first two path points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reference {
    pub origin: Point2<f64>,
    pub tangent: Point2<f64>,
}

impl Reference {
    pub fn from_path(path: &[Point2<f64>]) -> Result<Self> {
        if path.len() < 2 {
            return Err(Error::invalid("reference path needs at least two points"));
        }
        let d = path[path.len() - 1] - path[0];
        let n = d.norm();
        if !(n > 0.0) {
            return Err(Error::invalid("degenerate reference path"));
        }
        Ok(Self {
            origin: path[0],
            tangent: d * (1.0 / n),
        })
    }

    pub fn to_world(&self, s: f64, d: f64) -> Point2<f64> {
        self.origin + self.tangent * s + self.tangent.perp() * d
    }

    pub fn to_frenet(&self, p: Point2<f64>) -> (f64, f64) {
        let r = p - self.origin;
        (r.dot(self.tangent), r.dot(self.tangent.perp()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateCost {
    pub jerk: f64,
    pub deviation: f64,
    pub collision: f64,
}

impl CandidateCost {
    pub fn total(&self) -> f64 {
        self.jerk + self.deviation + self.collision
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrenetCandidate {
    pub offset: f64,
    pub target_speed: f64,
    /// Positions at steps 1..=15.
    pub trajectory: Trajectory<f64>,
    /// Frenet states at steps 1..=15.
    pub states: Vec<FrenetState>,
    pub cost: CandidateCost,
    pub emergency: bool,
}

impl FrenetCandidate {
    pub fn collision_free(&self) -> bool {
        self.cost.collision == 0.0
    }
}

/// Quintic with given start (p, v, a) and end (p, v, a) over `t`.
fn quintic(p0: f64, v0: f64, a0: f64, p1: f64, v1: f64, a1: f64, t: f64) -> [f64; 6] {
    let (t2, t3) = (t * t, t * t * t);
    let (t4, t5) = (t3 * t, t3 * t2);
    let c0 = p0;
    let c1 = v0;
    let c2 = a0 / 2.0;
    let r0 = p1 - (c0 + c1 * t + c2 * t2);
    let r1 = v1 - (c1 + 2.0 * c2 * t);
    let r2 = a1 - 2.0 * c2;
    let c3 = (10.0 * r0 - 4.0 * r1 * t + 0.5 * r2 * t2) / t3;
    let c4 = (-15.0 * r0 + 7.0 * r1 * t - r2 * t2) / t4;
    let c5 = (6.0 * r0 - 3.0 * r1 * t + 0.5 * r2 * t2) / t5;
    [c0, c1, c2, c3, c4, c5]
}

/// Quartic with start (p, v, a) and end (v, a) over `t`.
fn quartic(p0: f64, v0: f64, a0: f64, v1: f64, a1: f64, t: f64) -> [f64; 6] {
    let c2 = a0 / 2.0;
    let r1 = v1 - (v0 + 2.0 * c2 * t);
    let r2 = a1 - 2.0 * c2;
    let c3 = (3.0 * r1 - r2 * t) / (3.0 * t * t);
    let c4 = (-2.0 * r1 + r2 * t) / (4.0 * t * t * t);
    [p0, v0, c2, c3, c4, 0.0]
}

/// Value, first, second, and third derivative of a degree-5 polynomial.
fn eval(c: &[f64; 6], t: f64) -> [f64; 4] {
    let p = c[0] + t * (c[1] + t * (c[2] + t * (c[3] + t * (c[4] + t * c[5]))));
    let v = c[1] + t * (2.0 * c[2] + t * (3.0 * c[3] + t * (4.0 * c[4] + t * 5.0 * c[5])));
    let a = 2.0 * c[2] + t * (6.0 * c[3] + t * (12.0 * c[4] + t * 20.0 * c[5]));
    let j = 6.0 * c[3] + t * (24.0 * c[4] + t * 60.0 * c[5]);
    [p, v, a, j]
}

/// Counts probability-weighted overlaps between a plan and every mode.
fn collision_cost(points: &[Point2<f64>], predictions: &[PredictionSet<f64>], radius: f64) -> f64 {
    let r2 = radius * radius;
    let mut cost = 0.0;
    for pred in predictions {
        let weights = pred.weights();
        for (mode, w) in pred.modes.iter().zip(weights) {
            if w <= 0.0 {
                continue;
            }
            let hit = mode
                .points
                .iter()
                .zip(points)
                .any(|(a, b)| (*a - *b).norm_sq() < r2);
            if hit {
                cost += w;
            }
        }
    }
    cost
}

struct Builder<'a> {
    state: FrenetState,
    reference: &'a Reference,
    dt: f64,
    nominal_speed: f64,
    cfg: &'a PlannerConfig,
    predictions: &'a [PredictionSet<f64>],
}

impl Builder<'_> {
    fn candidate(&self, lon: &[f64; 6], lat: &[f64; 6], offset: f64, target_speed: f64, emergency: bool) -> Result<FrenetCandidate> {
        let mut states = Vec::with_capacity(PREDICTION_STEPS);
        let mut points = Vec::with_capacity(PREDICTION_STEPS);
        let mut jerk = 0.0;
        for k in 1..=PREDICTION_STEPS {
            let t = k as f64 * self.dt;
            let [s, vs, as_, js] = eval(lon, t);
            let [d, vd, ad, jd] = eval(lat, t);
            jerk += (js * js + jd * jd) * self.dt;
            states.push(FrenetState { s, d, vs, vd, as_, ad });
            points.push(self.reference.to_world(s, d));
        }
        let collision = self.cfg.w_collision * collision_cost(&points, self.predictions, self.cfg.collision_radius);
        let cost = CandidateCost {
            jerk: self.cfg.w_jerk * jerk,
            deviation: self.cfg.w_offset * offset.abs() + self.cfg.w_speed * (target_speed - self.nominal_speed).abs(),
            collision,
        };
        Ok(FrenetCandidate {
            offset,
            target_speed,
            trajectory: Trajectory::new(points, self.dt)?,
            states,
            cost,
            emergency,
        })
    }

    /// Maximum braking to a stop while holding the current lateral position.
    fn emergency(&self) -> Result<FrenetCandidate> {
        let st = self.state;
        let horizon = PREDICTION_STEPS as f64 * self.dt;
        let lat = quintic(st.d, st.vd, st.ad, st.d, 0.0, 0.0, horizon);
        let stop = st.vs.max(0.0) / self.cfg.max_brake;
        let mut states = Vec::with_capacity(PREDICTION_STEPS);
        let mut points = Vec::with_capacity(PREDICTION_STEPS);
        let mut jerk = 0.0;
        let mut prev_a = st.as_;
        for k in 1..=PREDICTION_STEPS {
            let t = k as f64 * self.dt;
            let tt = t.min(stop);
            let s = st.s + st.vs * tt - 0.5 * self.cfg.max_brake * tt * tt;
            let vs = (st.vs - self.cfg.max_brake * tt).max(0.0);
            let as_ = if t < stop { -self.cfg.max_brake } else { 0.0 };
            let [d, vd, ad, jd] = eval(&lat, t);
            let js = (as_ - prev_a) / self.dt;
            prev_a = as_;
            jerk += (js * js + jd * jd) * self.dt;
            states.push(FrenetState { s, d, vs, vd, as_, ad });
            points.push(self.reference.to_world(s, d));
        }
        let collision = self.cfg.w_collision * collision_cost(&points, self.predictions, self.cfg.collision_radius);
        Ok(FrenetCandidate {
            offset: st.d,
            target_speed: 0.0,
            trajectory: Trajectory::new(points, self.dt)?,
            states,
            cost: CandidateCost {
                jerk: self.cfg.w_jerk * jerk,
                deviation: self.cfg.w_offset * st.d.abs() + self.cfg.w_speed * self.nominal_speed,
                collision,
            },
            emergency: true,
        })
    }
}

/// Plans one horizon for the ego from `state`.
///
/// Returns the cheapest collision-free candidate (emergency braking
/// included); when every candidate overlaps some mode, returns the
/// emergency candidate.
pub fn frenet_plan(
    state: FrenetState,
    reference: &Reference,
    nominal_speed: f64,
    dt: f64,
    predictions: &[PredictionSet<f64>],
    cfg: &PlannerConfig,
) -> Result<FrenetCandidate> {
    let builder = Builder {
        state,
        reference,
        dt,
        nominal_speed,
        cfg,
        predictions,
    };
    let horizon = PREDICTION_STEPS as f64 * dt;
    let mut best: Option<FrenetCandidate> = None;
    for &offset in &cfg.offsets {
        let lat = quintic(state.d, state.vd, state.ad, offset, 0.0, 0.0, horizon);
        for &factor in &cfg.speed_factors {
            let target = factor * nominal_speed;
            let lon = quartic(state.s, state.vs, state.as_, target, 0.0, horizon);
            let c = builder.candidate(&lon, &lat, offset, target, false)?;
            if c.collision_free() && better(&c, best.as_ref(), nominal_speed) {
                best = Some(c);
            }
        }
    }
    let emergency = builder.emergency()?;
    match best {
        Some(b) if !emergency.collision_free() || b.cost.total() <= emergency.cost.total() => Ok(b),
        _ => Ok(emergency),
    }
}

fn better(c: &FrenetCandidate, best: Option<&FrenetCandidate>, nominal: f64) -> bool {
    let Some(b) = best else { return true };
    let (ct, bt) = (c.cost.total(), b.cost.total());
    if ct != bt {
        return ct < bt;
    }
    let key = |x: &FrenetCandidate| (x.offset.abs(), (x.target_speed - nominal).abs());
    key(c) < key(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::AgentId;

    fn reference() -> Reference {
        Reference::from_path(&[Point2::new(0.0, 0.0), Point2::new(500.0, 0.0)]).unwrap()
    }

    fn cruise(v: f64) -> FrenetState {
        FrenetState { s: 0.0, d: 0.0, vs: v, vd: 0.0, as_: 0.0, ad: 0.0 }
    }

    fn static_obstacle(at: Point2<f64>) -> PredictionSet<f64> {
        let modes = vec![Trajectory::new(vec![at; PREDICTION_STEPS], 0.1).unwrap(); 6];
        PredictionSet::new(AgentId(1), modes, None).unwrap()
    }

    #[test]
    fn polynomials_hit_boundary_conditions() {
        let c = quintic(1.0, 2.0, 0.5, 4.0, 0.0, 0.0, 1.5);
        let [p, v, a, _] = eval(&c, 1.5);
        assert!((p - 4.0).abs() < 1e-12 && v.abs() < 1e-12 && a.abs() < 1e-12);
        let q = quartic(0.0, 10.0, 1.0, 12.0, 0.0, 1.5);
        let [p0, v0, a0, _] = eval(&q, 0.0);
        assert_eq!((p0, v0, a0), (0.0, 10.0, 1.0));
        let [_, v, a, _] = eval(&q, 1.5);
        assert!((v - 12.0).abs() < 1e-12 && a.abs() < 1e-12);
    }

    #[test]
    fn empty_road_keeps_lane_and_speed() {
        let plan = frenet_plan(cruise(10.0), &reference(), 10.0, 0.1, &[], &PlannerConfig::default()).unwrap();
        assert_eq!(plan.offset, 0.0);
        assert_eq!(plan.target_speed, 10.0);
        assert!(!plan.emergency);
        assert!(plan.cost.total() < 1e-9);
    }

    #[test]
    fn stopped_obstacle_ahead_is_avoided() {
        let obstacle = static_obstacle(Point2::new(12.0, 0.0));
        let cfg = PlannerConfig::default();
        let plan = frenet_plan(cruise(10.0), &reference(), 10.0, 0.1, std::slice::from_ref(&obstacle), &cfg).unwrap();
        assert!(plan.offset != 0.0 || plan.target_speed < 10.0);
        assert!(plan.collision_free());
        for p in &plan.trajectory.points {
            assert!(p.distance(Point2::new(12.0, 0.0)) >= cfg.collision_radius);
        }
    }

    #[test]
    fn everything_blocked_gives_emergency() {
        // A wall of obstacles across every lateral target right in front.
        let preds: Vec<_> = (-8..=8)
            .map(|i| static_obstacle(Point2::new(3.0, i as f64 * 0.5)))
            .collect();
        let plan = frenet_plan(cruise(10.0), &reference(), 10.0, 0.1, &preds, &PlannerConfig::default()).unwrap();
        assert!(plan.emergency);
    }

    #[test]
    fn replanning_is_c1_at_the_handoff() {
        let obstacle = static_obstacle(Point2::new(25.0, 0.0));
        let cfg = PlannerConfig::default();
        let horizon = PREDICTION_STEPS as f64 * 0.1;
        let mut state = cruise(10.0);
        for _ in 0..10 {
            let plan = frenet_plan(state, &reference(), 10.0, 0.1, std::slice::from_ref(&obstacle), &cfg).unwrap();
            let next = plan.states[0];
            // The next plan's polynomials start exactly at the executed state.
            let lat = quintic(next.d, next.vd, next.ad, 1.5, 0.0, 0.0, horizon);
            let lon = quartic(next.s, next.vs, next.as_, 10.0, 0.0, horizon);
            let [s, vs, _, _] = eval(&lon, 0.0);
            let [d, vd, _, _] = eval(&lat, 0.0);
            assert!((s - next.s).abs() < 1e-9 && (vs - next.vs).abs() < 1e-9);
            assert!((d - next.d).abs() < 1e-9 && (vd - next.vd).abs() < 1e-9);
            state = next;
        }
    }

    #[test]
    fn never_costlier_than_emergency_when_something_is_free() {
        let cfg = PlannerConfig::default();
        for x in [6.0, 10.0, 15.0, 20.0, 30.0] {
            for y in [-3.0, -1.5, 0.0, 1.5] {
                let obstacle = static_obstacle(Point2::new(x, y));
                let preds = std::slice::from_ref(&obstacle);
                let state = cruise(10.0);
                let plan = frenet_plan(state, &reference(), 10.0, 0.1, preds, &cfg).unwrap();
                let builder = Builder { state, reference: &reference(), dt: 0.1, nominal_speed: 10.0, cfg: &cfg, predictions: preds };
                let emergency = builder.emergency().unwrap();
                if plan.collision_free() && emergency.collision_free() {
                    assert!(plan.cost.total() <= emergency.cost.total());
                }
            }
        }
    }
}
