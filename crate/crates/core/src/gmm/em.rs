//! Expectation-maximization for full-covariance planar mixtures.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Component, Gmm2D, Sym2, COVARIANCE_FLOOR};
use crate::error::{Error, Result};
use crate::geom::Point2;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub max_iter: usize,
    /// Stop once the log-likelihood improves by less than this.
    pub tol: f64,
    /// Eigenvalue floor for every fitted covariance, m².
    pub floor: f64,
    /// Seed for k-means++ initialization.
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-8,
            floor: COVARIANCE_FLOOR,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmFit<T> {
    pub gmm: Gmm2D<T>,
    /// Total log-likelihood after each E-step.
    pub log_likelihood: Vec<T>,
    pub converged: bool,
}

/// Fits `n_components` Gaussians to `points` by EM.
///
/// The M-step clamps covariance eigenvalues at `config.floor`, which is the
/// constrained maximizer, so the log-likelihood stays non-decreasing.
pub fn fit_em<T: Scalar>(points: &[Point2<T>], n_components: usize, config: &EmConfig) -> Result<EmFit<T>> {
    if points.is_empty() {
        return Err(Error::invalid("cannot fit a mixture to no points"));
    }
    if n_components == 0 {
        return Err(Error::invalid("need at least one component"));
    }
    if n_components > points.len() {
        return Err(Error::TooManyComponents {
            components: n_components,
            points: points.len(),
        });
    }
    let floor = T::lit(config.floor);
    let n = points.len();

    // Hard assignment to k-means++ centers seeds the first M-step.
    let centers = kmeans_pp(points, n_components, config.seed);
    let mut resp = vec![vec![T::zero(); n_components]; n];
    for (i, p) in points.iter().enumerate() {
        let nearest = nearest_center(*p, &centers);
        resp[i][nearest] = T::one();
    }
    let mut comps = m_step(points, &resp, &centers, floor);

    let mut trace: Vec<T> = Vec::new();
    let mut converged = false;
    for _ in 0..config.max_iter.max(1) {
        let ll = e_step(points, &comps, &mut resp);
        if let Some(&prev) = trace.last() {
            if ll - prev < T::lit(config.tol) {
                trace.push(ll);
                converged = true;
                break;
            }
        }
        trace.push(ll);
        let means: Vec<Point2<T>> = comps.iter().map(|c| c.mean).collect();
        comps = m_step(points, &resp, &means, floor);
    }

    normalize_weights(&mut comps);
    Ok(EmFit {
        gmm: Gmm2D::new(comps)?,
        log_likelihood: trace,
        converged,
    })
}

fn nearest_center<T: Scalar>(p: Point2<T>, centers: &[Point2<T>]) -> usize {
    let mut best = 0;
    let mut best_d = T::infinity();
    for (k, c) in centers.iter().enumerate() {
        let d = (p - *c).norm_sq();
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

fn kmeans_pp<T: Scalar>(points: &[Point2<T>], k: usize, seed: u64) -> Vec<Point2<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = vec![points[rng.random_range(0..points.len())]];
    let mut d2: Vec<f64> = points.iter().map(|p| (*p - centers[0]).norm_sq().as_f64()).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = points.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        } else {
            rng.random_range(0..points.len())
        };
        let c = points[idx];
        centers.push(c);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min((*p - c).norm_sq().as_f64());
        }
    }
    centers
}

fn m_step<T: Scalar>(points: &[Point2<T>], resp: &[Vec<T>], fallback: &[Point2<T>], floor: T) -> Vec<Component<T>> {
    let n = T::of_usize(points.len());
    (0..fallback.len())
        .map(|k| {
            let nk: T = resp.iter().map(|r| r[k]).sum();
            if !(nk > T::zero()) {
                return Component {
                    weight: T::zero(),
                    mean: fallback[k],
                    cov: Sym2::scaled_identity(floor),
                };
            }
            let mut sum = Point2::zero();
            for (p, r) in points.iter().zip(resp) {
                sum += *p * r[k];
            }
            let mean = sum * (T::one() / nk);
            let mut scatter = Sym2::zero();
            for (p, r) in points.iter().zip(resp) {
                scatter = scatter.add(&Sym2::outer(*p - mean).scale(r[k]));
            }
            Component {
                weight: nk / n,
                mean,
                cov: scatter.scale(T::one() / nk).floor_eigenvalues(floor),
            }
        })
        .collect()
}

fn log_density<T: Scalar>(p: Point2<T>, c: &Component<T>) -> T {
    let det = c.cov.det();
    let d = p - c.mean;
    // C⁻¹ = adj(C) / det
    let quad = (c.cov.yy * d.x * d.x - T::lit(2.0) * c.cov.xy * d.x * d.y + c.cov.xx * d.y * d.y) / det;
    -(T::lit(2.0) * T::PI()).ln() - T::lit(0.5) * det.ln() - T::lit(0.5) * quad
}

/// Fills responsibilities and returns the total log-likelihood.
fn e_step<T: Scalar>(points: &[Point2<T>], comps: &[Component<T>], resp: &mut [Vec<T>]) -> T {
    let mut total = T::zero();
    let mut logs = vec![T::zero(); comps.len()];
    for (p, r) in points.iter().zip(resp.iter_mut()) {
        for (l, c) in logs.iter_mut().zip(comps) {
            *l = if c.weight > T::zero() {
                c.weight.ln() + log_density(*p, c)
            } else {
                T::neg_infinity()
            };
        }
        let max = logs.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = logs.iter().map(|&l| (l - max).exp()).sum();
        let lse = max + sum.ln();
        for (ri, &l) in r.iter_mut().zip(&logs) {
            *ri = (l - lse).exp();
        }
        total += lse;
    }
    total
}

fn normalize_weights<T: Scalar>(comps: &mut [Component<T>]) {
    let sum: T = comps.iter().map(|c| c.weight).sum();
    for c in comps.iter_mut() {
        c.weight /= sum;
    }
}
