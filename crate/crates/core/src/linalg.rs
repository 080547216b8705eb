//! Minimal 2-vector and 2x2 matrix arithmetic.
//!
//! Everything in this crate is bivariate (wind speed, temperature), so the
//! linear algebra is written out explicitly instead of pulling in a matrix
//! library. Coordinate 0 is wind, coordinate 1 is temperature throughout.

use serde::{Deserialize, Serialize};

/// A point or offset in (wind, temperature) space.
pub type Vec2 = [f64; 2];

pub fn add(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] + b[0], a[1] + b[1]]
}

pub fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

pub fn scale(a: Vec2, c: f64) -> Vec2 {
    [a[0] * c, a[1] * c]
}

pub fn dot(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

/// Euclidean norm.
pub fn norm(a: Vec2) -> f64 {
    a[0].hypot(a[1])
}

pub fn dist(a: Vec2, b: Vec2) -> f64 {
    norm(sub(a, b))
}

/// Row-major 2x2 matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Mat2(pub [[f64; 2]; 2]);

impl Mat2 {
    pub const fn new(m00: f64, m01: f64, m10: f64, m11: f64) -> Self {
        Mat2([[m00, m01], [m10, m11]])
    }

    /// Symmetric matrix from the (wind, cross, temperature) entries.
    pub const fn symmetric(m00: f64, m01: f64, m11: f64) -> Self {
        Mat2([[m00, m01], [m01, m11]])
    }

    pub const fn identity() -> Self {
        Mat2::new(1.0, 0.0, 0.0, 1.0)
    }

    pub const fn zeros() -> Self {
        Mat2::new(0.0, 0.0, 0.0, 0.0)
    }

    pub const fn diag(d0: f64, d1: f64) -> Self {
        Mat2::new(d0, 0.0, 0.0, d1)
    }

    /// Outer product `a bᵀ`.
    pub fn outer(a: Vec2, b: Vec2) -> Self {
        Mat2::new(a[0] * b[0], a[0] * b[1], a[1] * b[0], a[1] * b[1])
    }

    pub fn det(&self) -> f64 {
        self.0[0][0] * self.0[1][1] - self.0[0][1] * self.0[1][0]
    }

    pub fn trace(&self) -> f64 {
        self.0[0][0] + self.0[1][1]
    }

    pub fn transpose(&self) -> Self {
        Mat2::new(self.0[0][0], self.0[1][0], self.0[0][1], self.0[1][1])
    }

    pub fn add(&self, o: &Mat2) -> Self {
        Mat2::new(
            self.0[0][0] + o.0[0][0],
            self.0[0][1] + o.0[0][1],
            self.0[1][0] + o.0[1][0],
            self.0[1][1] + o.0[1][1],
        )
    }

    pub fn sub(&self, o: &Mat2) -> Self {
        Mat2::new(
            self.0[0][0] - o.0[0][0],
            self.0[0][1] - o.0[0][1],
            self.0[1][0] - o.0[1][0],
            self.0[1][1] - o.0[1][1],
        )
    }

    pub fn scale(&self, c: f64) -> Self {
        Mat2::new(
            self.0[0][0] * c,
            self.0[0][1] * c,
            self.0[1][0] * c,
            self.0[1][1] * c,
        )
    }

    pub fn mul_vec(&self, v: Vec2) -> Vec2 {
        [
            self.0[0][0] * v[0] + self.0[0][1] * v[1],
            self.0[1][0] * v[0] + self.0[1][1] * v[1],
        ]
    }

    pub fn mul(&self, o: &Mat2) -> Self {
        Mat2::new(
            self.0[0][0] * o.0[0][0] + self.0[0][1] * o.0[1][0],
            self.0[0][0] * o.0[0][1] + self.0[0][1] * o.0[1][1],
            self.0[1][0] * o.0[0][0] + self.0[1][1] * o.0[1][0],
            self.0[1][0] * o.0[0][1] + self.0[1][1] * o.0[1][1],
        )
    }

    /// Inverse, or `None` when the determinant vanishes.
    pub fn inverse(&self) -> Option<Mat2> {
        let d = self.det();
        if d == 0.0 || !d.is_finite() {
            return None;
        }
        Some(Mat2::new(
            self.0[1][1] / d,
            -self.0[0][1] / d,
            -self.0[1][0] / d,
            self.0[0][0] / d,
        ))
    }

    /// `(S + Sᵀ)/2`.
    pub fn symmetrize(&self) -> Mat2 {
        let off = 0.5 * (self.0[0][1] + self.0[1][0]);
        Mat2::symmetric(self.0[0][0], off, self.0[1][1])
    }

    /// Eigenvalues of a symmetric matrix, ascending.
    pub fn sym_eigenvalues(&self) -> (f64, f64) {
        let a = self.0[0][0];
        let b = 0.5 * (self.0[0][1] + self.0[1][0]);
        let c = self.0[1][1];
        let half_tr = 0.5 * (a + c);
        let disc = (0.25 * (a - c) * (a - c) + b * b).sqrt();
        (half_tr - disc, half_tr + disc)
    }

    /// Symmetrize, then clamp both eigenvalues to at least `floor`.
    pub fn floor_eigenvalues(&self, floor: f64) -> Mat2 {
        let s = self.symmetrize();
        let a = s.0[0][0];
        let b = s.0[0][1];
        let c = s.0[1][1];
        let (lo, hi) = s.sym_eigenvalues();
        if lo >= floor {
            return s;
        }
        if b == 0.0 {
            return Mat2::diag(a.max(floor), c.max(floor));
        }
        // Eigenvector for hi: (b, hi - a), normalized; lo's is its rotation.
        let (vx, vy) = {
            let n = (b * b + (hi - a) * (hi - a)).sqrt();
            (b / n, (hi - a) / n)
        };
        let l_hi = hi.max(floor);
        let l_lo = lo.max(floor);
        Mat2::symmetric(
            l_hi * vx * vx + l_lo * vy * vy,
            (l_hi - l_lo) * vx * vy,
            l_hi * vy * vy + l_lo * vx * vx,
        )
    }

    /// Lower Cholesky factor of a symmetric positive definite matrix.
    pub fn cholesky(&self) -> Option<Mat2> {
        let a = self.0[0][0];
        if a <= 0.0 {
            return None;
        }
        let l11 = a.sqrt();
        let l21 = self.0[1][0] / l11;
        let rest = self.0[1][1] - l21 * l21;
        if rest <= 0.0 {
            return None;
        }
        Some(Mat2::new(l11, 0.0, l21, rest.sqrt()))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }
}

/// Neumaier compensated accumulator.
///
/// Sums of the same multiset agree to an ulp regardless of term order,
/// which keeps reductions permutation- and schedule-invariant.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    compensation: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

/// Compensated 2-vector accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedVec2([CompensatedSum; 2]);

impl CompensatedVec2 {
    pub fn add(&mut self, v: Vec2) {
        self.0[0].add(v[0]);
        self.0[1].add(v[1]);
    }

    pub fn add_scaled(&mut self, v: Vec2, c: f64) {
        self.0[0].add(v[0] * c);
        self.0[1].add(v[1] * c);
    }

    pub fn value(&self) -> Vec2 {
        [self.0[0].value(), self.0[1].value()]
    }
}

/// Compensated 2x2 matrix accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedMat2([[CompensatedSum; 2]; 2]);

impl CompensatedMat2 {
    pub fn add_scaled(&mut self, m: &Mat2, c: f64) {
        for i in 0..2 {
            for j in 0..2 {
                self.0[i][j].add(m.0[i][j] * c);
            }
        }
    }

    pub fn value(&self) -> Mat2 {
        Mat2::new(
            self.0[0][0].value(),
            self.0[0][1].value(),
            self.0[1][0].value(),
            self.0[1][1].value(),
        )
    }
}

/// Sample mean of a set of points.
pub fn mean_point(points: &[Vec2]) -> Vec2 {
    let n = points.len() as f64;
    let mut acc = [0.0, 0.0];
    for p in points {
        acc = add(acc, *p);
    }
    scale(acc, 1.0 / n)
}

/// Unbiased sample covariance of a set of points (n >= 2).
pub fn sample_covariance(points: &[Vec2]) -> Mat2 {
    let n = points.len();
    if n < 2 {
        return Mat2::zeros();
    }
    let m = mean_point(points);
    let mut acc = Mat2::zeros();
    for p in points {
        let d = sub(*p, m);
        acc = acc.add(&Mat2::outer(d, d));
    }
    acc.scale(1.0 / (n as f64 - 1.0))
}

/// Pearson correlation of paired samples; 0 when either variance vanishes.
pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return 0.0;
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let dx = x - mx;
        let dy = y - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_roundtrip() {
        let m = Mat2::new(2.0, 0.3, 0.1, 4.0);
        let inv = m.inverse().unwrap();
        let id = m.mul(&inv);
        assert!((id.0[0][0] - 1.0).abs() < 1e-12);
        assert!(id.0[0][1].abs() < 1e-12);
        assert!(id.0[1][0].abs() < 1e-12);
        assert!((id.0[1][1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn eigenvalues_of_diagonal() {
        let (lo, hi) = Mat2::diag(4.0, 9.0).sym_eigenvalues();
        assert_eq!(lo, 4.0);
        assert_eq!(hi, 9.0);
    }

    #[test]
    fn floor_restores_pd() {
        let m = Mat2::symmetric(1.0, 2.0, 1.0); // eigenvalues -1, 3
        let floored = m.floor_eigenvalues(1e-8);
        let (lo, _) = floored.sym_eigenvalues();
        // Reconstruction cancels to within an ulp of the large eigenvalue.
        assert!(lo >= 1e-8 - 1e-15, "lo = {lo:e}");
        // The large eigenvalue is untouched.
        let (_, hi) = floored.sym_eigenvalues();
        assert!((hi - 3.0).abs() < 1e-12);
    }

    #[test]
    fn cholesky_reconstructs() {
        let m = Mat2::symmetric(2.0, 0.5, 3.0);
        let l = m.cholesky().unwrap();
        let back = l.mul(&l.transpose());
        assert!((back.0[0][0] - 2.0).abs() < 1e-14);
        assert!((back.0[1][0] - 0.5).abs() < 1e-14);
        assert!((back.0[1][1] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn pearson_perfect_and_degenerate() {
        let xs = [1.0, 2.0, 3.0];
        assert!((pearson(&xs, &[2.0, 4.0, 6.0]) - 1.0).abs() < 1e-14);
        assert_eq!(pearson(&xs, &[5.0, 5.0, 5.0]), 0.0);
    }
}
