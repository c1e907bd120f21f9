//! Planar Gaussian mixtures: construction from predicted modes, EM fitting,
//! and collapse to a single covariance by the law of total covariance.

mod eigen;
mod em;

pub use eigen::{diversity_area, eigen2, Cov2, Eigen2, Sym2};
pub use em::{fit_em, EmConfig, EmFit};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domain::PredictionSet;
use crate::error::{Error, Result};
use crate::geom::Point2;
use crate::scalar::Scalar;

/// Eigenvalue floor applied to fitted and constructed covariances, m².
pub const COVARIANCE_FLOOR: f64 = 1e-6;

const WEIGHT_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Component<T> {
    pub weight: T,
    pub mean: Point2<T>,
    pub cov: Sym2<T>,
}

/// A 2D Gaussian mixture with weights summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gmm2D<T> {
    components: Vec<Component<T>>,
}

impl<T: Scalar> Gmm2D<T> {
    /// Validates weights and covariances. The eigenvalue floor is a policy of
    /// the constructors ([`fit_em`], [`modes_as_gmm`]), not of this check.
    pub fn new(components: Vec<Component<T>>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::invalid("mixture needs at least one component"));
        }
        let mut sum = 0.0;
        for (k, c) in components.iter().enumerate() {
            let w = c.weight.as_f64();
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::invalid(format!("component {k}: weight {w} is not a nonnegative number")));
            }
            sum += w;
            if !c.cov.is_finite() || !c.mean.is_finite() {
                return Err(Error::invalid(format!("component {k}: non-finite parameters")));
            }
            let e = c.cov.eigen();
            let tol = T::lit(1e-12) * (T::one() + e.lambda1.abs());
            if e.lambda2 < -tol {
                return Err(Error::invalid(format!("component {k}: covariance not positive semi-definite")));
            }
        }
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::invalid(format!("mixture weights sum to {sum}, expected 1")));
        }
        Ok(Self { components })
    }

    pub fn components(&self) -> &[Component<T>] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    /// Mixture mean `Σ w_k μ_k`.
    pub fn mean(&self) -> Point2<T> {
        self.components
            .iter()
            .fold(Point2::zero(), |acc, c| acc + c.mean * c.weight)
    }

    /// Between-component and within-component parts of the mixture
    /// covariance.
    pub fn covariance_parts(&self) -> (Sym2<T>, Sym2<T>) {
        let mean = self.mean();
        let mut between = Sym2::zero();
        let mut within = Sym2::zero();
        for c in &self.components {
            between = between.add(&Sym2::outer(c.mean - mean).scale(c.weight));
            within = within.add(&c.cov.scale(c.weight));
        }
        // Weights sum to one, so a shared covariance is the within term as is.
        let shared = self.components[0].cov;
        if self.components.iter().all(|c| c.cov == shared) {
            within = shared;
        }
        (between, within)
    }

    /// Draws one sample from the mixture.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Point2<T>
    where
        StandardNormal: Distribution<T>,
    {
        let u = T::lit(rng.random::<f64>());
        let mut acc = T::zero();
        let mut chosen = &self.components[self.components.len() - 1];
        for c in &self.components {
            acc += c.weight;
            if u < acc {
                chosen = c;
                break;
            }
        }
        let z1: T = StandardNormal.sample(rng);
        let z2: T = StandardNormal.sample(rng);
        chosen.mean + cholesky_apply(&chosen.cov, z1, z2)
    }
}

/// `L z` for the lower Cholesky factor of a PSD 2×2 matrix.
fn cholesky_apply<T: Scalar>(m: &Sym2<T>, z1: T, z2: T) -> Point2<T> {
    if m.xx > T::zero() {
        let l11 = m.xx.sqrt();
        let l21 = m.xy / l11;
        let l22 = (m.yy - l21 * l21).max(T::zero()).sqrt();
        Point2::new(l11 * z1, l21 * z1 + l22 * z2)
    } else {
        Point2::new(T::zero(), m.yy.max(T::zero()).sqrt() * z2)
    }
}

/// Collapses a mixture to one covariance:
/// `Σ = Σ_k w_k (μ_k − μ̄)(μ_k − μ̄)ᵀ + Σ_k w_k C_k`.
pub fn collapse<T: Scalar>(gmm: &Gmm2D<T>) -> Cov2<T> {
    let (between, within) = gmm.covariance_parts();
    Cov2::from_matrix(between.add(&within))
}

/// One component per predicted mode at step `t`: weight from the mode
/// probabilities (uniform when absent), mean at the mode's position, and
/// isotropic covariance `sigma0² I`.
pub fn modes_as_gmm<T: Scalar>(pred: &PredictionSet<T>, t: usize, sigma0: T) -> Result<Gmm2D<T>> {
    if t >= pred.horizon() {
        return Err(Error::invalid(format!("timestep {t} outside horizon {}", pred.horizon())));
    }
    if !(sigma0 > T::zero()) {
        return Err(Error::invalid("sigma0 must be positive"));
    }
    let cov = Sym2::scaled_identity(sigma0 * sigma0).floor_eigenvalues(T::lit(COVARIANCE_FLOOR));
    let components = pred
        .modes
        .iter()
        .zip(pred.weights())
        .map(|(mode, weight)| Component {
            weight,
            mean: mode.points[t],
            cov,
        })
        .collect();
    Gmm2D::new(components)
}
