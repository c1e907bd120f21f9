//! Scene graphs: adjacency, per-node features, and windows over a log.

use serde::{Deserialize, Serialize};

use crate::domain::{AgentId, AgentState, ScenarioLog, CLASSIFIER_WINDOW};
use crate::error::{Error, Result};
use crate::geom::Point2;

/// Nodes per graph: the ego plus up to seven neighbors.
pub const NUM_NODES: usize = 8;
/// Features per node.
pub const NUM_FEATURES: usize = 14;
/// Edge distance threshold in metres.
pub const EDGE_DISTANCE: f64 = 5.0;
/// Closest-approach distance that counts as a conflict when computing TTC.
pub const CONFLICT_RADIUS: f64 = 2.0;
/// Upper clip for time-to-collision features, seconds.
pub const TTC_CLIP: f64 = 10.0;

/// Time until the closest approach of two constant-velocity points, if that
/// approach comes within `radius` in the future.
pub fn time_to_collision(dp: Point2<f64>, dv: Point2<f64>, radius: f64) -> Option<f64> {
    let vv = dv.norm_sq();
    if vv <= 0.0 {
        return None;
    }
    let t = -dp.dot(dv) / vv;
    if t <= 0.0 {
        return None;
    }
    let closest = (dp + dv * t).norm();
    (closest < radius).then_some(t)
}

/// Row-normalised adjacency with self-loops.
///
/// `A_ij = (1{|p_i - p_j| < d_th} + δ_ij) / rowsum`; the diagonal indicator
/// always fires, so every diagonal numerator is 2.
pub fn build_adjacency(positions: &[Point2<f64>], d_th: f64) -> Result<Vec<Vec<f64>>> {
    if positions.is_empty() {
        return Err(Error::invalid("adjacency needs at least one node"));
    }
    if !(d_th > 0.0) {
        return Err(Error::invalid("distance threshold must be positive"));
    }
    let n = positions.len();
    let mut a = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let linked = positions[i].distance(positions[j]) < d_th;
            a[i][j] = f64::from(u8::from(linked)) + f64::from(u8::from(i == j));
        }
        let sum: f64 = a[i].iter().sum();
        for v in &mut a[i] {
            *v /= sum;
        }
    }
    Ok(a)
}

/// Relative-motion summary of one agent against its neighbors:
/// `[mean distance, min distance, mean closing speed, min TTC (clipped), count / 7]`.
pub fn rel_motion(agent: &AgentState, neighbors: &[&AgentState]) -> [f64; 5] {
    if neighbors.is_empty() {
        return [0.0; 5];
    }
    let p = agent.planar();
    let v = agent.planar_velocity();
    let mut sum_d = 0.0;
    let mut min_d = f64::INFINITY;
    let mut sum_close = 0.0;
    let mut min_ttc = TTC_CLIP;
    for nb in neighbors {
        let dp = nb.planar() - p;
        let dv = nb.planar_velocity() - v;
        let d = dp.norm();
        sum_d += d;
        min_d = min_d.min(d);
        if d > 0.0 {
            sum_close += -dp.dot(dv) / d;
        }
        if let Some(t) = time_to_collision(dp, dv, CONFLICT_RADIUS) {
            min_ttc = min_ttc.min(t);
        }
    }
    let n = neighbors.len() as f64;
    [sum_d / n, min_d, sum_close / n, min_ttc, n / (NUM_NODES - 1) as f64]
}

/// Raw 14-feature vector: position, velocity, acceleration, relative motion.
pub fn node_features(agent: &AgentState, neighbors: &[&AgentState]) -> [f64; NUM_FEATURES] {
    let mut out = [0.0; NUM_FEATURES];
    out[0..3].copy_from_slice(&agent.position);
    out[3..6].copy_from_slice(&agent.velocity);
    out[6..9].copy_from_slice(&agent.acceleration);
    out[9..14].copy_from_slice(&rel_motion(agent, neighbors));
    out
}

/// Fixed per-feature scale applied after moving to the ego frame.
pub const FEATURE_SCALE: [f64; NUM_FEATURES] = [
    0.05, 0.05, 0.05, 0.1, 0.1, 0.1, 0.33, 0.33, 0.33, 0.05, 0.05, 0.1, 0.1, 1.0,
];

/// One frame: node features and the (shared) adjacency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGraph {
    /// `NUM_NODES` rows of `NUM_FEATURES`.
    pub features: Vec<[f64; NUM_FEATURES]>,
}

/// A classifier window of graphs over one adjacency frozen at its first frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSequence {
    pub adjacency: Vec<Vec<f64>>,
    pub graphs: Vec<SceneGraph>,
}

impl GraphSequence {
    pub fn new(adjacency: Vec<Vec<f64>>, graphs: Vec<SceneGraph>) -> Result<Self> {
        let seq = Self { adjacency, graphs };
        seq.check()?;
        Ok(seq)
    }

    pub fn num_nodes(&self) -> usize {
        self.adjacency.len()
    }

    pub fn check(&self) -> Result<()> {
        let n = self.adjacency.len();
        if self.graphs.len() != CLASSIFIER_WINDOW {
            return Err(Error::invalid(format!(
                "graph sequence must have {CLASSIFIER_WINDOW} frames, got {}",
                self.graphs.len()
            )));
        }
        for (i, row) in self.adjacency.iter().enumerate() {
            if row.len() != n {
                return Err(Error::invalid("adjacency must be square"));
            }
            if (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 || !(row[i] > 0.0) {
                return Err(Error::invalid(format!("adjacency row {i} not row-stochastic with self-loop")));
            }
        }
        for g in &self.graphs {
            if g.features.len() != n {
                return Err(Error::invalid("feature rows must match adjacency size"));
            }
            if g.features.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::invalid("non-finite node feature"));
            }
        }
        Ok(())
    }

    /// Applies a node relabelling `perm` (new slot i holds old node perm[i]).
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let adjacency = perm
            .iter()
            .map(|&i| perm.iter().map(|&j| self.adjacency[i][j]).collect())
            .collect();
        let graphs = self
            .graphs
            .iter()
            .map(|g| SceneGraph {
                features: perm.iter().map(|&i| g.features[i]).collect(),
            })
            .collect();
        Self { adjacency, graphs }
    }
}

/// Builds the classifier input from the last `CLASSIFIER_WINDOW` history
/// frames of a log.
///
/// The ego sits in slot 0; the nearest seven others at the window start fill
/// the remaining slots and missing slots become isolated zero nodes.
/// Positions are taken relative to the ego's position at the window start.
pub fn sequence_from_log(log: &ScenarioLog) -> Result<GraphSequence> {
    let hist = log.history_len();
    if hist < CLASSIFIER_WINDOW {
        return Err(Error::invalid(format!(
            "history shorter than classifier window ({hist} < {CLASSIFIER_WINDOW})"
        )));
    }
    let start = hist - CLASSIFIER_WINDOW;
    let ego = log
        .agents
        .get(&log.ego_id)
        .ok_or_else(|| Error::invalid("ego agent missing from histories"))?;
    let origin = ego[start].planar();

    let mut others: Vec<(f64, AgentId)> = log
        .others()
        .map(|id| (log.agents[&id][start].planar().distance(origin), id))
        .collect();
    others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut ids = vec![log.ego_id];
    ids.extend(others.iter().take(NUM_NODES - 1).map(|&(_, id)| id));
    let real = ids.len();

    let mut positions: Vec<Point2<f64>> = ids
        .iter()
        .map(|id| log.agents[id][start].planar() - origin)
        .collect();
    // Virtual nodes are placed far apart so that they only link to themselves.
    for k in real..NUM_NODES {
        positions.push(Point2::new(1e6 * (k as f64 + 1.0), 1e6));
    }
    let adjacency = build_adjacency(&positions, EDGE_DISTANCE)?;

    let mut graphs = Vec::with_capacity(CLASSIFIER_WINDOW);
    for t in start..hist {
        let states: Vec<AgentState> = ids
            .iter()
            .map(|id| {
                let mut s = log.agents[id][t];
                s.position[0] -= origin.x;
                s.position[1] -= origin.y;
                s
            })
            .collect();
        let mut features = Vec::with_capacity(NUM_NODES);
        for (i, s) in states.iter().enumerate() {
            let nbrs: Vec<&AgentState> = states.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, s)| s).collect();
            let mut f = node_features(s, &nbrs);
            for (v, scale) in f.iter_mut().zip(FEATURE_SCALE) {
                *v *= scale;
            }
            features.push(f);
        }
        features.resize(NUM_NODES, [0.0; NUM_FEATURES]);
        graphs.push(SceneGraph { features });
    }
    GraphSequence::new(adjacency, graphs)
}
