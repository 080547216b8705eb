//! Multivariate forecast verification.
//!
//! Scores probabilistic forecasts (energy score, reliability index from
//! multivariate rank histograms, determinant sharpness) and point forecasts
//! (Euclidean error of the mean and of the geometric median). Raw ensembles
//! are scored exactly; predictive distributions through Monte Carlo samples.

use crate::linalg::{self, Mat2, Vec2};
use crate::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Iterate-movement tolerance for the geometric median.
pub const GEOMEDIAN_TOL: f64 = 1e-9;
const GEOMEDIAN_MAX_ITER: usize = 1000;
/// Step damping applied when an iterate lands on a data point.
const ANCHOR_DAMPING: f64 = 0.5;

/// Energy score of a finite ensemble against a verifying observation.
///
/// `(1/M) sum_j ||f_j - x|| - (1/(2 M^2)) sum_j sum_k ||f_j - f_k||`.
pub fn energy_score_ensemble(members: &[Vec2], x: Vec2) -> Result<f64> {
    if members.is_empty() {
        return Err(Error::EmptyInput(
            "energy score of an empty ensemble".into(),
        ));
    }
    let m = members.len() as f64;
    let mut miss = 0.0;
    for f in members {
        miss += linalg::dist(*f, x);
    }
    let mut spread = 0.0;
    for f in members {
        for g in members {
            spread += linalg::dist(*f, *g);
        }
    }
    Ok(miss / m - spread / (2.0 * m * m))
}

/// Monte Carlo energy score from a predictive sample.
///
/// The spread term pairs consecutive draws, with divisor `2(n-1)`:
/// `(1/n) sum_j ||X_j - x|| - (1/(2(n-1))) sum_{j<n} ||X_j - X_{j+1}||`.
pub fn energy_score_mc(sample: &[Vec2], x: Vec2) -> Result<f64> {
    let n = sample.len();
    if n < 2 {
        return Err(Error::Domain(format!(
            "Monte Carlo energy score needs at least 2 draws, got {n}"
        )));
    }
    let mut miss = 0.0;
    for s in sample {
        miss += linalg::dist(*s, x);
    }
    let mut spread = 0.0;
    for w in sample.windows(2) {
        spread += linalg::dist(w[0], w[1]);
    }
    Ok(miss / n as f64 - spread / (2.0 * (n as f64 - 1.0)))
}

fn leq2(a: Vec2, b: Vec2) -> bool {
    a[0] <= b[0] && a[1] <= b[1]
}

/// Multivariate rank of `x` among `members`, in `1..=M+1`.
///
/// Componentwise pre-ranks over the pooled set; ties in the pre-rank of the
/// observation are broken uniformly at random.
pub fn multivariate_rank<R: Rng + ?Sized>(members: &[Vec2], x: Vec2, rng: &mut R) -> u32 {
    let prerank = |v: Vec2| -> u32 {
        let mut c = u32::from(leq2(x, v));
        for w in members {
            c += u32::from(leq2(*w, v));
        }
        c
    };
    let pre_x = prerank(x);
    let mut below = 0u32;
    let mut ties = 0u32;
    for f in members {
        let p = prerank(*f);
        if p < pre_x {
            below += 1;
        } else if p == pre_x {
            ties += 1;
        }
    }
    below + 1 + rng.random_range(0..=ties)
}

/// Univariate rank of `x` among scalar `members`, ties broken at random.
pub fn univariate_rank<R: Rng + ?Sized>(members: &[f64], x: f64, rng: &mut R) -> u32 {
    let below = members.iter().filter(|m| **m < x).count() as u32;
    let ties = members.iter().filter(|m| **m == x).count() as u32;
    below + 1 + rng.random_range(0..=ties)
}

/// Histogram of verification ranks over `1..=M+1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankHistogram {
    /// counts[r-1] is the number of cases with rank r.
    pub counts: Vec<u64>,
    pub n_cases: u64,
}

impl RankHistogram {
    pub fn new(n_bins: usize) -> Self {
        RankHistogram {
            counts: vec![0; n_bins],
            n_cases: 0,
        }
    }

    pub fn record(&mut self, rank: u32) {
        self.counts[(rank - 1) as usize] += 1;
        self.n_cases += 1;
    }

    pub fn from_ranks(ranks: &[u32], n_bins: usize) -> Self {
        let mut h = RankHistogram::new(n_bins);
        for r in ranks {
            h.record(*r);
        }
        h
    }

    /// CSV export, one `rank,count` line per bin.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("rank,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            out.push_str(&format!("{},{}\n", i + 1, c));
        }
        out
    }
}

/// Reliability index: L1 distance of the rank histogram from uniformity.
pub fn reliability_index(h: &RankHistogram) -> Result<f64> {
    if h.n_cases == 0 || h.counts.is_empty() {
        return Err(Error::EmptyInput(
            "reliability index of an empty histogram".into(),
        ));
    }
    let uniform = 1.0 / h.counts.len() as f64;
    Ok(h.counts
        .iter()
        .map(|c| (*c as f64 / h.n_cases as f64 - uniform).abs())
        .sum())
}

/// Determinant sharpness `det(cov)^(1/(2d))` for a 2x2 covariance.
pub fn determinant_sharpness(cov: &Mat2) -> Result<f64> {
    let det = cov.det();
    let tol = 1e-12 * cov.trace() * cov.trace();
    if det < -tol.max(f64::MIN_POSITIVE) {
        return Err(Error::InvalidDistribution(format!(
            "covariance has negative determinant {det:e}"
        )));
    }
    Ok(det.max(0.0).powf(0.25))
}

fn dist_d<const D: usize>(a: &[f64; D], b: &[f64; D]) -> f64 {
    let mut s = 0.0;
    for i in 0..D {
        s += (a[i] - b[i]) * (a[i] - b[i]);
    }
    s.sqrt()
}

/// Sum of Euclidean distances from `alpha` to all points.
pub fn geomedian_objective<const D: usize>(points: &[[f64; D]], alpha: &[f64; D]) -> f64 {
    points.iter().map(|p| dist_d(p, alpha)).sum()
}

/// Geometric (spatial) median by damped Weiszfeld iteration.
///
/// When an iterate lands on a data point, the subgradient condition decides
/// optimality; otherwise the step over the remaining points is damped by 1/2.
/// Stops when the iterate moves less than `tol`.
pub fn geometric_median<const D: usize>(points: &[[f64; D]], tol: f64) -> Result<[f64; D]> {
    if points.is_empty() {
        return Err(Error::EmptyInput("geometric median of no points".into()));
    }
    if points.len() == 1 {
        return Ok(points[0]);
    }
    // Start from the coordinate-wise mean.
    let mut alpha = [0.0; D];
    for p in points {
        for i in 0..D {
            alpha[i] += p[i];
        }
    }
    for a in alpha.iter_mut() {
        *a /= points.len() as f64;
    }

    for _ in 0..GEOMEDIAN_MAX_ITER {
        let mut weight_sum = 0.0;
        let mut weighted = [0.0; D];
        let mut pull = [0.0; D]; // sum of unit vectors toward non-anchor points
        let mut anchors = 0usize;
        for p in points {
            let d = dist_d(p, &alpha);
            let point_scale = 1.0 + dist_d(p, &[0.0; D]);
            if d < 1e-13 * point_scale {
                anchors += 1;
                continue;
            }
            let w = 1.0 / d;
            weight_sum += w;
            for i in 0..D {
                weighted[i] += p[i] * w;
                pull[i] += (p[i] - alpha[i]) * w;
            }
        }
        if weight_sum == 0.0 {
            // All points coincide with the iterate.
            return Ok(alpha);
        }
        let mut next = [0.0; D];
        for i in 0..D {
            next[i] = weighted[i] / weight_sum;
        }
        if anchors > 0 {
            // Subgradient optimality at a data point: the pull of the other
            // points must not exceed the anchor multiplicity.
            let pull_norm = {
                let mut s = 0.0;
                for v in pull {
                    s += v * v;
                }
                s.sqrt()
            };
            if pull_norm <= anchors as f64 {
                return Ok(alpha);
            }
            for i in 0..D {
                next[i] = alpha[i] + ANCHOR_DAMPING * (next[i] - alpha[i]);
            }
        }
        let moved = dist_d(&next, &alpha);
        alpha = next;
        if moved < tol {
            break;
        }
    }
    // Vertex optima are approached only linearly, so the loop can stop short
    // of a data point; snap to the nearest one when that lowers the objective.
    let mut nearest = points[0];
    let mut nearest_d = f64::INFINITY;
    for p in points {
        let d = dist_d(p, &alpha);
        if d < nearest_d {
            nearest_d = d;
            nearest = *p;
        }
    }
    if geomedian_objective(points, &nearest) < geomedian_objective(points, &alpha) {
        return Ok(nearest);
    }
    Ok(alpha)
}

/// A forecast to verify: a finite ensemble, or a sampleable predictive law.
pub enum CaseForecast<'a> {
    Ensemble(&'a [Vec2]),
    Predictive(&'a dyn PredictiveDist),
}

/// Sampling interface implemented by the predictive distributions.
pub trait PredictiveDist {
    fn sample_n(&self, n: usize, rng: &mut dyn rand::RngCore) -> Vec<Vec2>;
    /// Closed-form mean when one exists; otherwise the sample mean is used.
    fn exact_mean(&self) -> Option<Vec2> {
        None
    }
}

/// Per-case verification quantities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseScore {
    pub es: f64,
    pub ds: f64,
    pub rank: u32,
    pub covered: [bool; 2],
    pub point_mean: Vec2,
    pub point_median: Vec2,
}

fn coverage(members: &[Vec2], obs: Vec2) -> [bool; 2] {
    let mut cov = [false, false];
    for (i, c) in cov.iter_mut().enumerate() {
        let lo = members.iter().map(|m| m[i]).fold(f64::INFINITY, f64::min);
        let hi = members
            .iter()
            .map(|m| m[i])
            .fold(f64::NEG_INFINITY, f64::max);
        *c = lo <= obs[i] && obs[i] <= hi;
    }
    cov
}

/// Score one raw-ensemble case.
pub fn score_ensemble_case<R: Rng + ?Sized>(
    members: &[Vec2],
    obs: Vec2,
    rng: &mut R,
) -> Result<CaseScore> {
    let es = energy_score_ensemble(members, obs)?;
    let ds = determinant_sharpness(&linalg::sample_covariance(members))?;
    let rank = multivariate_rank(members, obs, rng);
    Ok(CaseScore {
        es,
        ds,
        rank,
        covered: coverage(members, obs),
        point_mean: linalg::mean_point(members),
        point_median: geometric_median(members, GEOMEDIAN_TOL)?,
    })
}

/// Score one predictive-distribution case with `n_mc` Monte Carlo draws.
///
/// The rank is computed against the first `m_rank` draws, so histograms stay
/// comparable with the raw ensemble's `m_rank + 1` bins.
pub fn score_predictive_case<R: Rng>(
    dist: &dyn PredictiveDist,
    obs: Vec2,
    n_mc: usize,
    m_rank: usize,
    rng: &mut R,
) -> Result<CaseScore> {
    if n_mc < m_rank || n_mc < 2 {
        return Err(Error::InvalidConfig(format!(
            "n_mc = {n_mc} too small (need >= 2 and >= {m_rank} rank members)"
        )));
    }
    let sample = dist.sample_n(n_mc, rng);
    let es = energy_score_mc(&sample, obs)?;
    let ds = determinant_sharpness(&linalg::sample_covariance(&sample))?;
    let rank_members = &sample[..m_rank];
    let rank = multivariate_rank(rank_members, obs, rng);
    let covered = coverage(rank_members, obs);
    let point_mean = dist
        .exact_mean()
        .unwrap_or_else(|| linalg::mean_point(&sample));
    let point_median = geometric_median(&sample, GEOMEDIAN_TOL)?;
    Ok(CaseScore {
        es,
        ds,
        rank,
        covered,
        point_mean,
        point_median,
    })
}

/// Aggregate verification scores for one forecasting method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub mean_es: f64,
    pub delta: f64,
    pub mean_ds: f64,
    pub ee_median: f64,
    pub ee_mean: f64,
    pub corr_median: f64,
    pub corr_mean: f64,
    pub coverage_wind: f64,
    pub coverage_temp: f64,
    pub n_cases: u64,
}

/// Reduce per-case scores (paired with their observations) to a report.
pub fn aggregate(
    scored: &[(CaseScore, Vec2)],
    m_rank: usize,
) -> Result<(VerificationReport, RankHistogram)> {
    if scored.is_empty() {
        return Err(Error::EmptyInput("no cases to verify".into()));
    }
    let n = scored.len() as f64;
    let mut hist = RankHistogram::new(m_rank + 1);
    let (mut es, mut ds, mut ee_med, mut ee_mean) = (0.0, 0.0, 0.0, 0.0);
    let (mut cov_w, mut cov_t) = (0u64, 0u64);
    let mut med_w = Vec::with_capacity(scored.len());
    let mut med_t = Vec::with_capacity(scored.len());
    let mut mean_w = Vec::with_capacity(scored.len());
    let mut mean_t = Vec::with_capacity(scored.len());
    for (s, obs) in scored {
        hist.record(s.rank);
        es += s.es;
        ds += s.ds;
        ee_med += linalg::dist(s.point_median, *obs);
        ee_mean += linalg::dist(s.point_mean, *obs);
        cov_w += u64::from(s.covered[0]);
        cov_t += u64::from(s.covered[1]);
        med_w.push(s.point_median[0]);
        med_t.push(s.point_median[1]);
        mean_w.push(s.point_mean[0]);
        mean_t.push(s.point_mean[1]);
    }
    let report = VerificationReport {
        mean_es: es / n,
        delta: reliability_index(&hist)?,
        mean_ds: ds / n,
        ee_median: ee_med / n,
        ee_mean: ee_mean / n,
        corr_median: linalg::pearson(&med_w, &med_t),
        corr_mean: linalg::pearson(&mean_w, &mean_t),
        coverage_wind: cov_w as f64 / n,
        coverage_temp: cov_t as f64 / n,
        n_cases: scored.len() as u64,
    };
    Ok((report, hist))
}

/// Score and aggregate a batch of forecast cases.
///
/// Raw ensembles must have exactly `m_rank` members so that every case feeds
/// the same `m_rank + 1`-bin rank histogram; predictive distributions are
/// scored from `n_mc` draws and ranked against `m_rank` of them.
pub fn evaluate<R: Rng>(
    cases: &[(CaseForecast, Vec2)],
    n_mc: usize,
    m_rank: usize,
    rng: &mut R,
) -> Result<(VerificationReport, RankHistogram)> {
    if cases.is_empty() {
        return Err(Error::EmptyInput("no cases to verify".into()));
    }
    let mut scored = Vec::with_capacity(cases.len());
    for (forecast, obs) in cases {
        let s = match forecast {
            CaseForecast::Ensemble(members) => {
                if members.len() != m_rank {
                    return Err(Error::MemberMismatch {
                        got: members.len(),
                        expected: m_rank,
                    });
                }
                score_ensemble_case(members, *obs, rng)?
            }
            CaseForecast::Predictive(dist) => {
                score_predictive_case(*dist, *obs, n_mc, m_rank, rng)?
            }
        };
        scored.push((s, *obs));
    }
    aggregate(&scored, m_rank)
}
