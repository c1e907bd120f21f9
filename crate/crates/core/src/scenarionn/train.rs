//! Labels, weighted-sampling training with Adam, and classification stats.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{time_to_collision, GraphSequence, CONFLICT_RADIUS};
use super::model::{CriticalityModel, ModelDims};
use crate::domain::ScenarioLog;
use crate::error::{Error, Result};
use crate::geom::Point2;

/// Gap below which two agents count as colliding, metres.
pub const COLLISION_GAP: f64 = 1.0;
/// TTC below which a pair counts as critical, seconds.
pub const CRITICAL_TTC: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub sequence: GraphSequence,
    pub label: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub dims: ModelDims,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            dims: ModelDims::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: CriticalityModel,
    /// Mean batch loss per epoch.
    pub loss_trace: Vec<f64>,
}

/// Draws sample indices with per-class probability proportional to the
/// inverse class frequency, so both classes are drawn equally often.
pub struct WeightedSampler {
    by_class: [Vec<usize>; 2],
    rng: ChaCha8Rng,
}

impl WeightedSampler {
    pub fn new(labels: &[u8], seed: u64) -> Result<Self> {
        let mut by_class: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
        for (i, &l) in labels.iter().enumerate() {
            if l > 1 {
                return Err(Error::invalid(format!("label {l} at sample {i} is not binary")));
            }
            by_class[l as usize].push(i);
        }
        for (c, members) in by_class.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::WeightedSamplingUndefined(1 - c as u8));
            }
        }
        Ok(Self {
            by_class,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn draw(&mut self) -> usize {
        let class = &self.by_class[usize::from(self.rng.random_bool(0.5))];
        class[self.rng.random_range(0..class.len())]
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn step(&mut self, model: &mut CriticalityModel, grad: &CriticalityModel, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        let mut k = 0;
        for ((_, p), (_, g)) in model.tensors_mut().into_iter().zip(grad.tensors()) {
            for (w, &gi) in p.data.iter_mut().zip(&g.data) {
                self.m[k] = cfg.beta1 * self.m[k] + (1.0 - cfg.beta1) * gi;
                self.v[k] = cfg.beta2 * self.v[k] + (1.0 - cfg.beta2) * gi * gi;
                let m_hat = self.m[k] / bc1;
                let v_hat = self.v[k] / bc2;
                *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
                k += 1;
            }
        }
    }
}

/// Trains a freshly initialised model (seeded by `config.seed`).
pub fn train(samples: &[LabeledSample], config: &TrainConfig) -> Result<TrainOutcome> {
    let model = CriticalityModel::init(config.dims, config.seed);
    train_from(model, samples, config)
}

/// Continues training `model` for `config.epochs` epochs of `⌈n / batch⌉`
/// weighted-sampled batches each.
pub fn train_from(mut model: CriticalityModel, samples: &[LabeledSample], config: &TrainConfig) -> Result<TrainOutcome> {
    if config.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    let mut sampler = WeightedSampler::new(&labels, config.seed ^ 0x5eed)?;
    for s in samples {
        s.sequence.check()?;
    }
    let n_params = model.num_params();
    let mut adam = Adam {
        m: vec![0.0; n_params],
        v: vec![0.0; n_params],
        t: 0,
    };
    let batches = samples.len().div_ceil(config.batch_size);
    let mut loss_trace = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..batches {
            let mut grad = CriticalityModel::zeros(config.dims);
            let mut batch_loss = 0.0;
            let scale = 1.0 / config.batch_size as f64;
            for _ in 0..config.batch_size {
                let s = &samples[sampler.draw()];
                let cache = model.forward_cached(&s.sequence)?;
                let y = f64::from(s.label);
                batch_loss += super::model::loss_bce(cache.prob, y) * scale;
                let clamped = cache.prob < super::model::PROB_CLAMP || cache.prob > 1.0 - super::model::PROB_CLAMP;
                let dlogit = if clamped { 0.0 } else { scale * (cache.prob - y) };
                model.backprop(&s.sequence, &cache, dlogit, &mut grad);
            }
            adam.step(&mut model, &grad, config);
            epoch_loss += batch_loss / batches as f64;
        }
        loss_trace.push(epoch_loss);
    }
    Ok(TrainOutcome { model, loss_trace })
}

/// Finite-difference velocity of a trajectory at step `k`.
fn velocity(points: &[Point2<f64>], k: usize, dt: f64) -> Point2<f64> {
    if points.len() < 2 {
        return Point2::zero();
    }
    let k = k.min(points.len() - 2);
    (points[k + 1] - points[k]) * (1.0 / dt)
}

/// 1 iff some agent pair (ego's logged future included) comes within 1 m,
/// or has a time-to-collision below 3 s, within the first `horizon` future
/// steps.
pub fn label_criticality(log: &ScenarioLog, horizon: usize) -> u8 {
    let trajs: Vec<&[Point2<f64>]> = log.futures.values().map(|t| t.points.as_slice()).collect();
    for a in 0..trajs.len() {
        for b in a + 1..trajs.len() {
            let steps = horizon.min(trajs[a].len()).min(trajs[b].len());
            for k in 0..steps {
                let dp = trajs[b][k] - trajs[a][k];
                if dp.norm() < COLLISION_GAP {
                    return 1;
                }
                let dv = velocity(trajs[b], k, log.dt) - velocity(trajs[a], k, log.dt);
                if time_to_collision(dp, dv, CONFLICT_RADIUS).is_some_and(|t| t < CRITICAL_TTC) {
                    return 1;
                }
            }
        }
    }
    0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    /// NaN when nothing was predicted positive.
    pub precision: f64,
    /// NaN when there are no positives.
    pub recall: f64,
}

pub fn classification_stats(probs: &[f64], labels: &[u8], threshold: f64) -> ClassStats {
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&p, &l) in probs.iter().zip(labels) {
        match (p >= threshold, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    ClassStats {
        tp,
        fp,
        tn,
        fn_,
        precision: tp as f64 / (tp + fp) as f64,
        recall: tp as f64 / (tp + fn_) as f64,
    }
}
