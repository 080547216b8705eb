//! The wind-truncated bivariate normal distribution.
//!
//! `N2_0(mu, sigma)` is a bivariate normal with location `mu` and scale matrix
//! `sigma`, restricted to the half plane where the wind coordinate is
//! nonnegative and renormalized by `Phi(mu_W / sigma_W)`. Density, closed-form
//! moments and sampling are provided; scalar standard-normal utilities are
//! re-exported from here for the rest of the crate.

mod special;

use crate::linalg::{self, Mat2, Vec2};
use crate::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;

pub use special::{erf, erfc, hazard_ratio, ln_std_normal_cdf, std_normal_cdf, std_normal_pdf};

/// Relative eigenvalue threshold below which a scale matrix is rejected.
const PD_REL_FLOOR: f64 = 1e-10;
/// Wind acceptance probability below which sampling switches from rejection
/// to the inverse-CDF wind marginal plus a conditional temperature draw.
const REJECTION_MIN_ACCEPT: f64 = 0.05;

/// Standard normal quantile.
pub fn std_normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!(
            "normal quantile requires p in (0,1), got {p}"
        )));
    }
    Ok(special::std_normal_quantile_unchecked(p))
}

/// Mean vector and covariance matrix of a [`TruncBivNormal`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments2 {
    pub mean: Vec2,
    pub cov: Mat2,
}

/// Bivariate normal truncated from below at zero in the wind coordinate.
#[derive(Debug, Clone, Copy)]
pub struct TruncBivNormal {
    mu: Vec2,
    sigma: Mat2,
    // Cached quantities; all derived from (mu, sigma) at construction.
    sigma_w: f64,
    wind_ratio: f64, // mu_W / sigma_W
    ln_norm: f64,    // ln(2 pi) + ln(det)/2 + ln Phi(mu_W/sigma_W)
    inv_sigma: Mat2,
    chol: Mat2,
}

impl TruncBivNormal {
    /// Build the distribution, validating symmetry and positive definiteness.
    ///
    /// The scale matrix is rejected when its smallest eigenvalue is below
    /// `1e-10` times its trace, a scale-aware singularity threshold.
    pub fn new(mu: Vec2, sigma: Mat2) -> Result<Self> {
        if !mu.iter().all(|v| v.is_finite()) || !sigma.is_finite() {
            return Err(Error::InvalidDistribution(
                "non-finite location or scale".into(),
            ));
        }
        let asym = (sigma.0[0][1] - sigma.0[1][0]).abs();
        if asym > 1e-8 * (1.0 + sigma.trace().abs()) {
            return Err(Error::InvalidDistribution(format!(
                "scale matrix is not symmetric (off-diagonal gap {asym:e})"
            )));
        }
        let sigma = sigma.symmetrize();
        let (lo, _) = sigma.sym_eigenvalues();
        if !(lo > PD_REL_FLOOR * sigma.trace()) {
            return Err(Error::InvalidDistribution(format!(
                "scale matrix is not positive definite (min eigenvalue {lo:e})"
            )));
        }
        let det = sigma.det();
        let sigma_w = sigma.0[0][0].sqrt();
        let wind_ratio = mu[0] / sigma_w;
        let ln_norm = (2.0 * std::f64::consts::PI).ln()
            + 0.5 * det.ln()
            + special::ln_std_normal_cdf(wind_ratio);
        let inv_sigma = sigma.inverse().ok_or_else(|| {
            Error::InvalidDistribution("scale matrix is numerically singular".into())
        })?;
        let chol = sigma.cholesky().ok_or_else(|| {
            Error::InvalidDistribution("scale matrix has no Cholesky factor".into())
        })?;
        Ok(Self {
            mu,
            sigma,
            sigma_w,
            wind_ratio,
            ln_norm,
            inv_sigma,
            chol,
        })
    }

    pub fn mu(&self) -> Vec2 {
        self.mu
    }

    pub fn sigma(&self) -> Mat2 {
        self.sigma
    }

    /// Density at `x`; exactly zero when the wind coordinate is negative.
    pub fn pdf(&self, x: Vec2) -> f64 {
        if x[0] < 0.0 {
            return 0.0;
        }
        self.log_pdf_in_support(x).exp()
    }

    /// Log density; `-inf` outside the support.
    pub fn log_pdf(&self, x: Vec2) -> f64 {
        if x[0] < 0.0 {
            return f64::NEG_INFINITY;
        }
        self.log_pdf_in_support(x)
    }

    fn log_pdf_in_support(&self, x: Vec2) -> f64 {
        let d = linalg::sub(x, self.mu);
        let q = linalg::dot(d, self.inv_sigma.mul_vec(d));
        -0.5 * q - self.ln_norm
    }

    /// Closed-form mean and covariance.
    ///
    /// Truncating the wind coordinate shifts and shrinks the whole wind
    /// column of the scale matrix: with `t = mu_W/sigma_W`,
    /// `h = phi(t)/Phi(t)` and `v = sigma e_W / sigma_W`,
    /// the mean is `mu + h v` and the covariance `sigma - (t h + h^2) v v^T`.
    pub fn moments(&self) -> Moments2 {
        let t = self.wind_ratio;
        let h = special::hazard_ratio(t);
        let v = [self.sigma_w, self.sigma.0[0][1] / self.sigma_w];
        let mean = linalg::add(self.mu, linalg::scale(v, h));
        let shrink = t * h + h * h;
        let cov = self.sigma.sub(&Mat2::outer(v, v).scale(shrink));
        Moments2 { mean, cov }
    }

    /// Draw `n` points.
    ///
    /// Rejection against the untruncated normal while the wind acceptance
    /// probability is at least 5%, otherwise an exact inverse-CDF draw of the
    /// truncated wind marginal followed by the conditional temperature draw;
    /// expected cost stays bounded in every parameter regime.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Vec2> {
        let accept = special::std_normal_cdf(self.wind_ratio);
        let mut out = Vec::with_capacity(n);
        if accept >= REJECTION_MIN_ACCEPT {
            while out.len() < n {
                let g = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
                let x = linalg::add(self.mu, self.chol.mul_vec(g));
                if x[0] >= 0.0 {
                    out.push(x);
                }
            }
        } else {
            let s2w = self.sigma.0[0][0];
            let swt = self.sigma.0[0][1];
            let cond_sd = (self.sigma.0[1][1] - swt * swt / s2w).max(0.0).sqrt();
            for _ in 0..n {
                let u: f64 = rng.random();
                // Upper-tail form keeps precision when Phi(t) is tiny:
                // 1 - (Phi(-t) + u (1 - Phi(-t))) = (1-u) Phi(t).
                let tail = ((1.0 - u) * accept).max(f64::MIN_POSITIVE);
                let q = -special::std_normal_quantile_unchecked(tail.min(1.0 - 1e-16));
                let w = (self.mu[0] + self.sigma_w * q).max(0.0);
                let g: f64 = rng.sample(StandardNormal);
                let t = self.mu[1] + swt / s2w * (w - self.mu[0]) + cond_sd * g;
                out.push([w, t]);
            }
        }
        out
    }
}
