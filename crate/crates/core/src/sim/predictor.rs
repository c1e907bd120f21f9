//! Predictor family spanning the accuracy/diversity plane.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::{AgentId, PredictionSet, Trajectory, NUM_MODES, PREDICTION_STEPS};
use crate::error::{Error, Result};
use crate::geom::Point2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "param", rename_all = "snake_case")]
pub enum PredictorKind {
    ConstantVelocity,
    /// Per-mode Gaussian offsets whose scale ramps linearly to `σ` metres.
    NoisyCv(f64),
    /// Maneuver primitives; the first `n` of keep, brake, accelerate,
    /// left, right, hard-left.
    MultimodalManeuver(usize),
    /// `α · truth + (1 − α) · constant velocity`.
    OracleBlend(f64),
}

impl PredictorKind {
    pub fn id(&self) -> String {
        match self {
            PredictorKind::ConstantVelocity => "cv".into(),
            PredictorKind::NoisyCv(s) => format!("noisy_cv({s})"),
            PredictorKind::MultimodalManeuver(n) => format!("multimodal({n})"),
            PredictorKind::OracleBlend(a) => format!("oracle_blend({a})"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            PredictorKind::NoisyCv(s) if !(s >= 0.0 && s.is_finite()) => Err(Error::invalid("noisy_cv sigma must be >= 0")),
            PredictorKind::MultimodalManeuver(n) if !(2..=6).contains(&n) => {
                Err(Error::invalid("multimodal mode count must lie in [2, 6]"))
            }
            PredictorKind::OracleBlend(a) if !(0.0..=1.0).contains(&a) => Err(Error::invalid("oracle_blend alpha must lie in [0, 1]")),
            _ => Ok(()),
        }
    }

    pub fn needs_truth(&self) -> bool {
        matches!(self, PredictorKind::OracleBlend(_))
    }
}

impl fmt::Display for PredictorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id())
    }
}

impl FromStr for PredictorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, arg) = match s.split_once('(') {
            Some((n, rest)) => (
                n,
                Some(rest.strip_suffix(')').ok_or_else(|| Error::invalid(format!("unbalanced parentheses in `{s}`")))?),
            ),
            None => (s, None),
        };
        let num = |a: Option<&str>, default: f64| -> Result<f64> {
            a.map_or(Ok(default), |v| v.parse::<f64>().map_err(|_| Error::invalid(format!("bad predictor argument in `{s}`"))))
        };
        let kind = match name {
            "cv" | "constant_velocity" if arg.is_none() => PredictorKind::ConstantVelocity,
            "noisy_cv" => PredictorKind::NoisyCv(num(arg, 1.0)?),
            "multimodal" | "multimodal_maneuver" => {
                let n = num(arg, 6.0)?;
                if n.fract() != 0.0 || n < 0.0 {
                    return Err(Error::invalid(format!("mode count must be an integer in `{s}`")));
                }
                PredictorKind::MultimodalManeuver(n as usize)
            }
            "oracle_blend" => PredictorKind::OracleBlend(num(arg, 0.5)?),
            _ => return Err(Error::invalid(format!("unknown predictor `{s}`"))),
        };
        kind.validate()?;
        Ok(kind)
    }
}

fn seed_for(base: u64, agent: AgentId, step: usize) -> u64 {
    base.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (u64::from(agent.0) << 32) ^ step as u64
}

/// Inputs for one agent at one replanning step.
pub struct PredictContext<'a> {
    pub agent_id: AgentId,
    /// Observed positions, oldest first, ending at the current frame.
    pub history: &'a [Point2<f64>],
    /// Ground truth for the next `PREDICTION_STEPS`, used by oracle blends.
    pub truth: Option<&'a [Point2<f64>]>,
    pub dt: f64,
    /// Seed for stochastic predictors.
    pub seed: u64,
    pub step: usize,
}

fn cv_points(last: Point2<f64>, vel: Point2<f64>, dt: f64) -> Vec<Point2<f64>> {
    (1..=PREDICTION_STEPS).map(|k| last + vel * (k as f64 * dt)).collect()
}

/// Heading from the most recent non-negligible displacement.
fn heading(history: &[Point2<f64>]) -> Point2<f64> {
    for w in history.windows(2).rev() {
        let d = w[1] - w[0];
        let n = d.norm();
        if n > 1e-6 {
            return d * (1.0 / n);
        }
    }
    Point2::new(1.0, 0.0)
}

/// Lateral-acceleration limit for the hard-left primitive, m/s².
const MAX_LATERAL_ACCEL: f64 = 4.0;

fn maneuver(last: Point2<f64>, dir: Point2<f64>, speed: f64, primitive: usize, dt: f64) -> Vec<Point2<f64>> {
    let horizon = PREDICTION_STEPS as f64 * dt;
    let normal = dir.perp();
    (1..=PREDICTION_STEPS)
        .map(|k| {
            let t = k as f64 * dt;
            let u = t / horizon;
            let blend = u * u * u * (10.0 - 15.0 * u + 6.0 * u * u);
            match primitive {
                1 => {
                    let decel = 4.0;
                    let tt = t.min(speed / decel);
                    last + dir * (speed * tt - 0.5 * decel * tt * tt)
                }
                2 => last + dir * (speed * t + 0.5 * 3.0 * t * t),
                3 => last + dir * (speed * t) + normal * (3.5 * blend),
                4 => last + dir * (speed * t) - normal * (3.5 * blend),
                5 => {
                    // Quarter turn to the left over the horizon, or the tightest
                    // turn the lateral-acceleration limit allows at this speed.
                    let omega = (std::f64::consts::FRAC_PI_2 / horizon).min(MAX_LATERAL_ACCEL / speed.max(1e-9));
                    let r = speed / omega;
                    let th = omega * t;
                    last + dir * (r * th.sin()) + normal * (r * (1.0 - th.cos()))
                }
                _ => last + dir * (speed * t),
            }
        })
        .collect()
}

/// Six-mode, fifteen-step forecast for one agent.
pub fn predict(kind: &PredictorKind, ctx: &PredictContext<'_>) -> Result<PredictionSet<f64>> {
    let h = ctx.history;
    if h.len() < 2 {
        return Err(Error::invalid(format!("history too short for prediction ({} < 2)", h.len())));
    }
    let last = h[h.len() - 1];
    let vel = (last - h[h.len() - 2]) * (1.0 / ctx.dt);
    let cv = cv_points(last, vel, ctx.dt);
    let traj = |pts: Vec<Point2<f64>>| Trajectory::new(pts, ctx.dt);
    let (modes, probs) = match *kind {
        PredictorKind::ConstantVelocity => (vec![traj(cv)?; NUM_MODES], None),
        PredictorKind::NoisyCv(sigma) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed_for(ctx.seed, ctx.agent_id, ctx.step));
            let normal = Normal::new(0.0, 1.0).expect("unit normal");
            let mut modes = Vec::with_capacity(NUM_MODES);
            for _ in 0..NUM_MODES {
                let e = Point2::new(normal.sample(&mut rng), normal.sample(&mut rng)) * sigma;
                let pts = cv
                    .iter()
                    .enumerate()
                    .map(|(k, &p)| p + e * ((k + 1) as f64 / PREDICTION_STEPS as f64))
                    .collect();
                modes.push(traj(pts)?);
            }
            (modes, None)
        }
        PredictorKind::MultimodalManeuver(n) => {
            let dir = heading(h);
            let speed = vel.norm();
            let modes = (0..NUM_MODES)
                .map(|m| traj(maneuver(last, dir, speed, m % n, ctx.dt)))
                .collect::<Result<Vec<_>>>()?;
            // Keep carries the most mass; the other primitives share the rest.
            let keep = 0.4;
            let mut probs: Vec<f64> = (0..NUM_MODES)
                .map(|m| if m % n == 0 { keep } else { (1.0 - keep) / (n - 1) as f64 })
                .collect();
            let total: f64 = probs.iter().sum();
            for p in &mut probs {
                *p /= total;
            }
            (modes, Some(probs))
        }
        PredictorKind::OracleBlend(alpha) => {
            let truth = ctx
                .truth
                .filter(|t| t.len() >= PREDICTION_STEPS)
                .ok_or_else(|| Error::invalid("oracle_blend requires the ground-truth future"))?;
            let pts = cv.iter().zip(truth).map(|(&c, &t)| t * alpha + c * (1.0 - alpha)).collect();
            (vec![traj(pts)?; NUM_MODES], None)
        }
    };
    PredictionSet::new(ctx.agent_id, modes, probs)
}
