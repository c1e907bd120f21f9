//! Closed-form eigen-decomposition of symmetric 2×2 matrices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Point2;
use crate::scalar::Scalar;

/// Symmetric 2×2 matrix `[[xx, xy], [xy, yy]]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Sym2<T> {
    pub xx: T,
    pub xy: T,
    pub yy: T,
}

impl<T: Scalar> Sym2<T> {
    pub fn new(xx: T, xy: T, yy: T) -> Self {
        Self { xx, xy, yy }
    }

    pub fn zero() -> Self {
        Self::new(T::zero(), T::zero(), T::zero())
    }

    pub fn scaled_identity(s: T) -> Self {
        Self::new(s, T::zero(), s)
    }

    /// Outer product `v vᵀ`.
    pub fn outer(v: Point2<T>) -> Self {
        Self::new(v.x * v.x, v.x * v.y, v.y * v.y)
    }

    /// Checks symmetry of a general 2×2 matrix within `1e-9`.
    pub fn from_rows(m: [[T; 2]; 2]) -> Result<Self> {
        let skew = (m[0][1] - m[1][0]).abs();
        if !(skew <= T::lit(1e-9)) {
            return Err(Error::NotSymmetric(skew.as_f64()));
        }
        Ok(Self::new(m[0][0], (m[0][1] + m[1][0]) / T::lit(2.0), m[1][1]))
    }

    pub fn rows(&self) -> [[T; 2]; 2] {
        [[self.xx, self.xy], [self.xy, self.yy]]
    }

    pub fn det(&self) -> T {
        self.xx * self.yy - self.xy * self.xy
    }

    pub fn trace(&self) -> T {
        self.xx + self.yy
    }

    pub fn scale(&self, s: T) -> Self {
        Self::new(self.xx * s, self.xy * s, self.yy * s)
    }

    pub fn add(&self, other: &Self) -> Self {
        Self::new(self.xx + other.xx, self.xy + other.xy, self.yy + other.yy)
    }

    /// `x ↦ M x`.
    pub fn apply(&self, v: Point2<T>) -> Point2<T> {
        Point2::new(self.xx * v.x + self.xy * v.y, self.xy * v.x + self.yy * v.y)
    }

    /// `R M Rᵀ` for a rotation by `theta`.
    pub fn rotated(&self, theta: T) -> Self {
        let (s, c) = theta.sin_cos();
        let r = [[c, -s], [s, c]];
        let m = self.rows();
        let mut out = [[T::zero(); 2]; 2];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                let mut acc = T::zero();
                for k in 0..2 {
                    for l in 0..2 {
                        acc += r[i][k] * m[k][l] * r[j][l];
                    }
                }
                *cell = acc;
            }
        }
        Self::new(out[0][0], (out[0][1] + out[1][0]) / T::lit(2.0), out[1][1])
    }

    pub fn is_finite(&self) -> bool {
        self.xx.is_finite() && self.xy.is_finite() && self.yy.is_finite()
    }

    pub fn eigen(&self) -> Eigen2<T> {
        Eigen2::of(self)
    }

    /// Raises every eigenvalue below `floor` to `floor`, keeping the
    /// eigenvectors. Matrices already above the floor are returned unchanged.
    pub fn floor_eigenvalues(&self, floor: T) -> Self {
        let e = self.eigen();
        if e.lambda2 >= floor {
            return *self;
        }
        Eigen2 {
            lambda1: e.lambda1.max(floor),
            lambda2: floor,
            q: e.q,
        }
        .reconstruct()
    }
}

/// Eigenvalues `lambda1 >= lambda2` with eigenvectors as the columns of `q`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Eigen2<T> {
    pub lambda1: T,
    pub lambda2: T,
    /// `q[row][col]`; column 0 pairs with `lambda1`.
    pub q: [[T; 2]; 2],
}

impl<T: Scalar> Eigen2<T> {
    fn of(m: &Sym2<T>) -> Self {
        let two = T::lit(2.0);
        let (a, b, c) = (m.xx, m.xy, m.yy);
        let mean = (a + c) / two;
        let half_diff = (a - c) / two;
        let radius = half_diff.hypot(b);
        let det = m.det();

        // The root of larger magnitude comes from mean ± radius without
        // cancellation; the other from det / root.
        let (mut l1, mut l2) = if mean > T::zero() {
            let l1 = mean + radius;
            (l1, det / l1)
        } else if mean < T::zero() {
            let l2 = mean - radius;
            (det / l2, l2)
        } else {
            (radius, -radius)
        };
        if l2 > l1 {
            l2 = l1;
        }
        if !l1.is_finite() || !l2.is_finite() {
            l1 = mean + radius;
            l2 = mean - radius;
        }

        // (λ1 - c, b) and (b, λ1 - a) both span the λ1 eigenspace; pick the
        // form whose leading term is a sum of nonnegatives.
        let v = if half_diff >= T::zero() {
            Point2::new(half_diff + radius, b)
        } else {
            Point2::new(b, radius - half_diff)
        };
        let n = v.norm();
        let v1 = if n > T::zero() && n.is_finite() {
            v * (T::one() / n)
        } else {
            Point2::new(T::one(), T::zero())
        };
        let v2 = v1.perp();
        Self {
            lambda1: l1,
            lambda2: l2,
            q: [[v1.x, v2.x], [v1.y, v2.y]],
        }
    }

    /// Semi-axis lengths of the one-sigma ellipse.
    pub fn semi_axes(&self) -> (T, T) {
        (self.lambda1.max(T::zero()).sqrt(), self.lambda2.max(T::zero()).sqrt())
    }

    /// `Q diag(λ1, λ2) Qᵀ`.
    pub fn reconstruct(&self) -> Sym2<T> {
        let q = &self.q;
        let (l1, l2) = (self.lambda1, self.lambda2);
        Sym2::new(
            q[0][0] * q[0][0] * l1 + q[0][1] * q[0][1] * l2,
            q[0][0] * q[1][0] * l1 + q[0][1] * q[1][1] * l2,
            q[1][0] * q[1][0] * l1 + q[1][1] * q[1][1] * l2,
        )
    }

    pub fn q_det(&self) -> T {
        self.q[0][0] * self.q[1][1] - self.q[0][1] * self.q[1][0]
    }
}

/// Eigen-decomposition of a symmetric 2×2 matrix given by rows.
pub fn eigen2<T: Scalar>(m: [[T; 2]; 2]) -> Result<Eigen2<T>> {
    Ok(Sym2::from_rows(m)?.eigen())
}

/// Collapsed mixture covariance together with its decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cov2<T> {
    pub matrix: Sym2<T>,
    pub eigen: Eigen2<T>,
}

impl<T: Scalar> Cov2<T> {
    pub fn from_matrix(matrix: Sym2<T>) -> Self {
        Self {
            matrix,
            eigen: matrix.eigen(),
        }
    }

    pub fn lambda1(&self) -> T {
        self.eigen.lambda1
    }

    pub fn lambda2(&self) -> T {
        self.eigen.lambda2
    }

    pub fn floored(&self, floor: T) -> Self {
        Self::from_matrix(self.matrix.floor_eigenvalues(floor))
    }
}

/// One-sigma ellipse area without the factor π: `√det Σ = √(λ1 λ2)`.
pub fn diversity_area<T: Scalar>(cov: &Cov2<T>) -> T {
    cov.matrix.det().max(T::zero()).sqrt()
}
