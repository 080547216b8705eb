//! Gaussian-copula baseline.
//!
//! Wind and temperature are calibrated separately with univariate mixture
//! models (truncated normal components for wind, normal for temperature),
//! then coupled by a single latent correlation estimated once on a held-out
//! pre-period and carried forward. Sampling draws correlated latent normals
//! and maps each coordinate through its margin's quantile function.
//!
//! The univariate EM updates are the one-dimensional instances of the
//! bivariate formulas in [`crate::em`]: the same hazard-ratio corrections
//! with the scale matrix collapsed to a variance.

use crate::bma::{Group, GroupSpec};
use crate::data::{ForecastCase, TrainingWindow};
use crate::dists::{hazard_ratio, ln_std_normal_cdf, std_normal_cdf, std_normal_quantile};
use crate::em::EmConfig;
use crate::linalg::{self, Vec2};
use crate::verify::PredictiveDist;
use crate::{Error, Result};
use chrono::NaiveDate;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Which coordinate of a forecast case a margin models.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variable {
    Wind,
    Temp,
}

impl Variable {
    fn index(self) -> usize {
        match self {
            Variable::Wind => 0,
            Variable::Temp => 1,
        }
    }
}

/// Component family of a univariate margin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginFamily {
    /// Normal truncated from below at zero.
    TruncNormal,
    Normal,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct UniBmaRaw {
    family: MarginFamily,
    groups: Vec<Group>,
    weights: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
    var: f64,
}

/// Univariate mixture model: per-group intercept/slope, common variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "UniBmaRaw", into = "UniBmaRaw")]
pub struct UniBmaModel {
    family: MarginFamily,
    spec: GroupSpec,
    /// Per-member weight of each group, grouped mass summing to one.
    weights: Vec<f64>,
    /// Per-group (intercept, slope).
    coeffs: Vec<(f64, f64)>,
    var: f64,
}

impl TryFrom<UniBmaRaw> for UniBmaModel {
    type Error = Error;
    fn try_from(raw: UniBmaRaw) -> Result<Self> {
        UniBmaModel::new(
            raw.family,
            GroupSpec::new(raw.groups)?,
            raw.weights,
            raw.a.into_iter().zip(raw.b).collect(),
            raw.var,
        )
    }
}

impl From<UniBmaModel> for UniBmaRaw {
    fn from(m: UniBmaModel) -> UniBmaRaw {
        UniBmaRaw {
            family: m.family,
            groups: m.spec.groups().to_vec(),
            weights: m.weights,
            a: m.coeffs.iter().map(|c| c.0).collect(),
            b: m.coeffs.iter().map(|c| c.1).collect(),
            var: m.var,
        }
    }
}

impl UniBmaModel {
    pub fn new(
        family: MarginFamily,
        spec: GroupSpec,
        weights: Vec<f64>,
        coeffs: Vec<(f64, f64)>,
        var: f64,
    ) -> Result<Self> {
        if weights.len() != spec.n_groups() || coeffs.len() != spec.n_groups() {
            return Err(Error::InvalidConfig(
                "weights/coefficients must be per group".into(),
            ));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidConfig("weights must be nonnegative".into()));
        }
        let mass: f64 = weights
            .iter()
            .zip(spec.groups())
            .map(|(w, g)| w * g.members.len() as f64)
            .sum();
        if (mass - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidConfig(format!(
                "margin mixture mass {mass} differs from 1"
            )));
        }
        if !(var > 0.0) || !var.is_finite() {
            return Err(Error::InvalidDistribution(format!(
                "margin variance {var} must be positive"
            )));
        }
        Ok(UniBmaModel {
            family,
            spec,
            weights,
            coeffs,
            var,
        })
    }

    pub fn family(&self) -> MarginFamily {
        self.family
    }

    pub fn spec(&self) -> &GroupSpec {
        &self.spec
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn coeffs(&self) -> &[(f64, f64)] {
        &self.coeffs
    }

    pub fn var(&self) -> f64 {
        self.var
    }

    fn sd(&self) -> f64 {
        self.var.sqrt()
    }

    fn location(&self, member: usize, f: f64) -> f64 {
        let (a, b) = self.coeffs[self.spec.group_of(member)];
        a + b * f
    }

    fn member_weight(&self, member: usize) -> f64 {
        self.weights[self.spec.group_of(member)]
    }

    fn check_members(&self, f: &[f64]) -> Result<()> {
        if f.len() != self.spec.n_members() {
            return Err(Error::MemberMismatch {
                got: f.len(),
                expected: self.spec.n_members(),
            });
        }
        Ok(())
    }

    // Component CDF at x.
    fn component_cdf(&self, mu: f64, x: f64) -> f64 {
        let sd = self.sd();
        match self.family {
            MarginFamily::Normal => std_normal_cdf((x - mu) / sd),
            MarginFamily::TruncNormal => {
                if x < 0.0 {
                    return 0.0;
                }
                let t = mu / sd;
                let lower = std_normal_cdf(-t);
                ((std_normal_cdf((x - mu) / sd) - lower) / std_normal_cdf(t)).clamp(0.0, 1.0)
            }
        }
    }

    fn component_pdf(&self, mu: f64, x: f64) -> f64 {
        let sd = self.sd();
        let z = (x - mu) / sd;
        let base = (-0.5 * z * z).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt());
        match self.family {
            MarginFamily::Normal => base,
            MarginFamily::TruncNormal => {
                if x < 0.0 {
                    0.0
                } else {
                    base / std_normal_cdf(mu / sd)
                }
            }
        }
    }

    // Component quantile; brackets the mixture quantile.
    fn component_quantile(&self, mu: f64, p: f64) -> f64 {
        let sd = self.sd();
        match self.family {
            MarginFamily::Normal => mu + sd * crate::dists::std_normal_quantile(p).unwrap_or(0.0),
            MarginFamily::TruncNormal => {
                let t = mu / sd;
                // Upper-tail form: 1 - F_target = (1-p) Phi(t).
                let tail = ((1.0 - p) * std_normal_cdf(t)).clamp(1e-300, 1.0 - 1e-16);
                let z = -crate::dists::std_normal_quantile(tail).unwrap_or(0.0);
                (mu + sd * z).max(0.0)
            }
        }
    }

    /// Mixture CDF given the case's member forecasts for this variable.
    pub fn cdf(&self, f: &[f64], x: f64) -> Result<f64> {
        self.check_members(f)?;
        let mut acc = 0.0;
        for (l, fm) in f.iter().enumerate() {
            acc += self.member_weight(l) * self.component_cdf(self.location(l, *fm), x);
        }
        Ok(acc.clamp(0.0, 1.0))
    }

    fn pdf(&self, f: &[f64], x: f64) -> f64 {
        f.iter()
            .enumerate()
            .map(|(l, fm)| self.member_weight(l) * self.component_pdf(self.location(l, *fm), x))
            .sum()
    }

    /// Mixture quantile by monotone bisection to 1e-9.
    pub fn quantile(&self, f: &[f64], p: f64) -> Result<f64> {
        self.check_members(f)?;
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Domain(format!(
                "quantile requires p in (0,1), got {p}"
            )));
        }
        let mus: Vec<f64> = f
            .iter()
            .enumerate()
            .map(|(l, fm)| self.location(l, *fm))
            .collect();
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for mu in &mus {
            let q = self.component_quantile(*mu, p);
            lo = lo.min(q);
            hi = hi.max(q);
        }
        if lo >= hi {
            return Ok(lo);
        }
        for _ in 0..200 {
            if hi - lo <= 1e-9 {
                break;
            }
            let mid = 0.5 * (lo + hi);
            if self.cdf(f, mid)? < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    /// Closed-form mean of the margin mixture.
    pub fn mean(&self, f: &[f64]) -> Result<f64> {
        self.check_members(f)?;
        let sd = self.sd();
        let mut acc = 0.0;
        for (l, fm) in f.iter().enumerate() {
            let mu = self.location(l, *fm);
            let comp_mean = match self.family {
                MarginFamily::Normal => mu,
                MarginFamily::TruncNormal => mu + sd * hazard_ratio(mu / sd),
            };
            acc += self.member_weight(l) * comp_mean;
        }
        Ok(acc)
    }

    // Quantiles for an ascending probability batch: safeguarded Newton with
    // a warm start from the previous solution. Same accuracy as `quantile`.
    fn quantiles_sorted_ascending(&self, f: &[f64], ps: &[f64]) -> Result<Vec<f64>> {
        if ps.is_empty() {
            return Ok(Vec::new());
        }
        let mus: Vec<f64> = f
            .iter()
            .enumerate()
            .map(|(l, fm)| self.location(l, *fm))
            .collect();
        let bracket = |p: f64| -> (f64, f64) {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for mu in &mus {
                let q = self.component_quantile(*mu, p);
                lo = lo.min(q);
                hi = hi.max(q);
            }
            (lo, hi)
        };
        let p_first = ps[0];
        let p_last = ps[ps.len() - 1];
        let (global_lo, _) = bracket(p_first);
        let (_, global_hi) = bracket(p_last);
        let mut out = Vec::with_capacity(ps.len());
        let mut lo = global_lo;
        for &p in ps {
            let mut hi = global_hi;
            let mut x = lo.clamp(global_lo, hi);
            for _ in 0..200 {
                let err = self.cdf(f, x)? - p;
                if err.abs() < 1e-12 || hi - lo <= 1e-9 {
                    break;
                }
                if err < 0.0 {
                    lo = x.max(lo);
                } else {
                    hi = x.min(hi);
                }
                let d = self.pdf(f, x);
                let newton = if d > 0.0 { x - err / d } else { f64::NAN };
                x = if newton.is_finite() && newton > lo && newton < hi {
                    newton
                } else {
                    0.5 * (lo + hi)
                };
            }
            out.push(x);
            lo = x; // probabilities ascend, so quantiles do too
        }
        Ok(out)
    }
}

/// The fitted copula: two margins plus the global latent correlation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CopulaModel {
    pub wind_margin: UniBmaModel,
    pub temp_margin: UniBmaModel,
    pub latent_corr: f64,
}

impl CopulaModel {
    pub fn new(
        wind_margin: UniBmaModel,
        temp_margin: UniBmaModel,
        latent_corr: f64,
    ) -> Result<Self> {
        if !(latent_corr.abs() < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "latent correlation {latent_corr} must be inside (-1, 1)"
            )));
        }
        Ok(CopulaModel {
            wind_margin,
            temp_margin,
            latent_corr,
        })
    }
}

/// On-disk copula model with its correlation-estimation window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CopulaModelFile {
    pub wind_margin: UniBmaModel,
    pub temp_margin: UniBmaModel,
    pub latent_corr: f64,
    pub corr_window: CorrWindow,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrWindow {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

// ---------------------------------------------------------------------------
// Univariate EM (the 1-D instance of the em module's updates)
// ---------------------------------------------------------------------------

struct ScalarObs {
    f: Vec<f64>, // member values for this variable
    x: f64,      // observation
}

fn scalar_cases(window: &TrainingWindow, variable: Variable) -> Vec<ScalarObs> {
    let i = variable.index();
    window
        .cases
        .iter()
        .map(|c| ScalarObs {
            f: c.members.iter().map(|m| m[i]).collect(),
            x: c.obs[i],
        })
        .collect()
}

fn ln_component_1d(family: MarginFamily, mu: f64, sd: f64, x: f64) -> f64 {
    let z = (x - mu) / sd;
    let base = -0.5 * z * z - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
    match family {
        MarginFamily::Normal => base,
        MarginFamily::TruncNormal => {
            if x < 0.0 {
                f64::NEG_INFINITY
            } else {
                base - ln_std_normal_cdf(mu / sd)
            }
        }
    }
}

fn margin_loglik(model: &UniBmaModel, cases: &[ScalarObs]) -> f64 {
    let sd = model.sd();
    let mut total = 0.0;
    for c in cases {
        let mut terms = Vec::with_capacity(c.f.len());
        for (l, f) in c.f.iter().enumerate() {
            let w = model.member_weight(l);
            terms.push(if w > 0.0 {
                w.ln() + ln_component_1d(model.family, model.location(l, *f), sd, c.x)
            } else {
                f64::NEG_INFINITY
            });
        }
        let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        total += max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln();
    }
    total
}

fn margin_e_step(model: &UniBmaModel, cases: &[ScalarObs]) -> Vec<Vec<f64>> {
    let sd = model.sd();
    cases
        .iter()
        .map(|c| {
            let terms: Vec<f64> =
                c.f.iter()
                    .enumerate()
                    .map(|(l, f)| {
                        let w = model.member_weight(l);
                        if w > 0.0 {
                            w.ln() + ln_component_1d(model.family, model.location(l, *f), sd, c.x)
                        } else {
                            f64::NEG_INFINITY
                        }
                    })
                    .collect();
            let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln();
            terms.iter().map(|t| (t - lse).exp()).collect()
        })
        .collect()
}

// One 1-D fixed-point sweep: per-group intercept/slope, then the common
// variance, all with hazard corrections for the truncated family.
fn margin_m_step(
    model: &UniBmaModel,
    resp: &[Vec<f64>],
    cases: &[ScalarObs],
    config: &EmConfig,
) -> Result<(Vec<(f64, f64)>, f64)> {
    let sd = model.sd();
    let truncated = model.family == MarginFamily::TruncNormal;
    let haz = |mu: f64| -> f64 {
        if truncated {
            hazard_ratio(mu / sd)
        } else {
            0.0
        }
    };
    let spec = &model.spec;
    let mut coeffs = Vec::with_capacity(spec.n_groups());
    for (k, g) in spec.groups().iter().enumerate() {
        let (a_old, b_old) = model.coeffs[k];
        let mut z_sum = 0.0;
        let mut acc = 0.0;
        for (c, row) in cases.iter().zip(resp) {
            for &l in &g.members {
                let z = row[l];
                if z == 0.0 {
                    continue;
                }
                let f = c.f[l];
                acc += z * ((c.x - b_old * f) - sd * haz(a_old + b_old * f));
                z_sum += z;
            }
        }
        if z_sum < 1e-10 {
            return Err(Error::RankDeficient(format!(
                "no responsibility mass on margin group {}",
                g.label
            )));
        }
        let a_new = acc / z_sum;
        let mut num = 0.0;
        let mut den = 0.0;
        for (c, row) in cases.iter().zip(resp) {
            for &l in &g.members {
                let z = row[l];
                if z == 0.0 {
                    continue;
                }
                let f = c.f[l];
                num += z * ((c.x - a_new) - sd * haz(a_new + b_old * f)) * f;
                den += z * f * f;
            }
        }
        if den.abs() < 1e-12 {
            return Err(Error::RankDeficient(format!(
                "margin group {} has a singular member Gram sum",
                g.label
            )));
        }
        coeffs.push((a_new, num / den));
    }

    let mut scatter = 0.0;
    for (c, row) in cases.iter().zip(resp) {
        for (l, z) in row.iter().enumerate() {
            if *z == 0.0 {
                continue;
            }
            let (a, b) = coeffs[spec.group_of(l)];
            let mu = a + b * c.f[l];
            let r = c.x - mu;
            let t = mu / sd;
            let corr = if truncated { t * hazard_ratio(t) } else { 0.0 };
            scatter += z * (r * r + corr * sd * sd);
        }
    }
    let var = (scatter / cases.len() as f64).max(config.sigma_floor);
    Ok((coeffs, var))
}

fn margin_weights(resp: &[Vec<f64>], spec: &GroupSpec, min_weight: f64) -> Vec<f64> {
    let n = resp.len() as f64;
    let mut member_mean = vec![0.0; spec.n_members()];
    for row in resp {
        for (l, v) in row.iter().enumerate() {
            member_mean[l] += v;
        }
    }
    let mut weights: Vec<f64> = spec
        .groups()
        .iter()
        .map(|g| {
            g.members.iter().map(|l| member_mean[*l]).sum::<f64>() / (n * g.members.len() as f64)
        })
        .collect();
    for w in weights.iter_mut() {
        if *w < min_weight {
            *w = min_weight;
        }
    }
    let mass: f64 = weights
        .iter()
        .zip(spec.groups())
        .map(|(w, g)| w * g.members.len() as f64)
        .sum();
    for w in weights.iter_mut() {
        *w /= mass;
    }
    weights
}

fn margin_initialize(
    cases: &[ScalarObs],
    spec: &GroupSpec,
    family: MarginFamily,
    config: &EmConfig,
) -> Result<UniBmaModel> {
    let mut coeffs = Vec::with_capacity(spec.n_groups());
    for g in spec.groups() {
        let (mut n, mut sf, mut sff, mut sx, mut sfx) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for c in cases {
            for &l in &g.members {
                let f = c.f[l];
                n += 1.0;
                sf += f;
                sff += f * f;
                sx += c.x;
                sfx += f * c.x;
            }
        }
        let det = n * sff - sf * sf;
        if det.abs() > 1e-10 * (n * sff).abs().max(1.0) {
            let b = (n * sfx - sf * sx) / det;
            let a = (sx - b * sf) / n;
            coeffs.push((a, b));
        } else {
            // Mean residual against a unit slope.
            coeffs.push(((sx - sf) / n, 1.0));
        }
    }
    let n = cases.len() as f64;
    let mean = cases.iter().map(|c| c.x).sum::<f64>() / n;
    let var = if cases.len() > 1 {
        cases.iter().map(|c| (c.x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    }
    .max(config.sigma_floor);
    UniBmaModel::new(
        family,
        spec.clone(),
        vec![1.0 / spec.n_members() as f64; spec.n_groups()],
        coeffs,
        var,
    )
}

/// Fit one univariate margin on a training window.
///
/// Wind margins use truncated-normal components, temperature margins normal
/// ones; stopping rules and floors come from the same [`EmConfig`] as the
/// bivariate fit, and the best observed-likelihood iterate is returned.
pub fn fit_margin(
    window: &TrainingWindow,
    variable: Variable,
    spec: &GroupSpec,
    config: &EmConfig,
) -> Result<UniBmaModel> {
    config.validate()?;
    if window.is_empty() {
        return Err(Error::EmptyInput("empty training window".into()));
    }
    for c in &window.cases {
        if c.members.len() != spec.n_members() {
            return Err(Error::MemberMismatch {
                got: c.members.len(),
                expected: spec.n_members(),
            });
        }
    }
    let family = match variable {
        Variable::Wind => MarginFamily::TruncNormal,
        Variable::Temp => MarginFamily::Normal,
    };
    let cases = scalar_cases(window, variable);
    let mut model = margin_initialize(&cases, spec, family, config)?;
    let mut prev = margin_loglik(&model, &cases);
    let mut best = (model.clone(), prev);
    for _ in 0..config.max_iter {
        let resp = margin_e_step(&model, &cases);
        let weights = margin_weights(&resp, spec, config.min_weight);
        let (coeffs, var) = margin_m_step(&model, &resp, &cases, config)?;
        if !var.is_finite() || coeffs.iter().any(|(a, b)| !a.is_finite() || !b.is_finite()) {
            return Err(Error::Divergence(
                "margin parameters became non-finite".into(),
            ));
        }
        let next = UniBmaModel::new(family, spec.clone(), weights, coeffs, var)?;
        let delta = model
            .coeffs
            .iter()
            .zip(&next.coeffs)
            .map(|((a0, b0), (a1, b1))| (a0 - a1).abs().max((b0 - b1).abs()))
            .fold((model.var - next.var).abs(), f64::max);
        model = next;
        let ll = margin_loglik(&model, &cases);
        if ll > best.1 {
            best = (model.clone(), ll);
        }
        let rel = (ll - prev).abs() / prev.abs().max(1.0);
        prev = ll;
        if rel < config.tol_loglik || delta < config.tol_param {
            break;
        }
    }
    Ok(best.0)
}

/// Pearson correlation of the latent Gaussian pairs of historical cases.
///
/// Each case's observation is pushed through that day's fitted margin CDFs
/// (clamped away from 0 and 1) and the standard normal quantile.
pub fn estimate_latent_corr(
    history: &[(&ForecastCase, &UniBmaModel, &UniBmaModel)],
) -> Result<f64> {
    const MIN_PAIRS: usize = 10;
    const CDF_CLAMP: f64 = 1e-9;
    let mut zw = Vec::with_capacity(history.len());
    let mut zt = Vec::with_capacity(history.len());
    for (case, wind_margin, temp_margin) in history {
        let fw: Vec<f64> = case.members.iter().map(|m| m[0]).collect();
        let ft: Vec<f64> = case.members.iter().map(|m| m[1]).collect();
        let uw = wind_margin
            .cdf(&fw, case.obs[0])?
            .clamp(CDF_CLAMP, 1.0 - CDF_CLAMP);
        let ut = temp_margin
            .cdf(&ft, case.obs[1])?
            .clamp(CDF_CLAMP, 1.0 - CDF_CLAMP);
        let (a, b) = (std_normal_quantile(uw)?, std_normal_quantile(ut)?);
        if a.is_finite() && b.is_finite() {
            zw.push(a);
            zt.push(b);
        }
    }
    if zw.len() < MIN_PAIRS {
        return Err(Error::InsufficientHistory {
            got: zw.len(),
            need: MIN_PAIRS,
        });
    }
    Ok(linalg::pearson(&zw, &zt).clamp(-0.999, 0.999))
}

/// Draw `n` points from the copula-coupled predictive distribution.
pub fn copula_sample<R: Rng>(
    cm: &CopulaModel,
    members: &[Vec2],
    n: usize,
    rng: &mut R,
) -> Result<Vec<Vec2>> {
    let fw: Vec<f64> = members.iter().map(|m| m[0]).collect();
    let ft: Vec<f64> = members.iter().map(|m| m[1]).collect();
    let rho = cm.latent_corr;
    let ortho = (1.0 - rho * rho).sqrt();
    let mut uw = Vec::with_capacity(n);
    let mut ut = Vec::with_capacity(n);
    for _ in 0..n {
        let z1: f64 = rng.sample(StandardNormal);
        let z2: f64 = rho * z1 + ortho * rng.sample::<f64, _>(StandardNormal);
        uw.push(std_normal_cdf(z1).clamp(1e-16, 1.0 - 1e-16));
        ut.push(std_normal_cdf(z2).clamp(1e-16, 1.0 - 1e-16));
    }
    let wind = batch_quantiles(&cm.wind_margin, &fw, &uw)?;
    let temp = batch_quantiles(&cm.temp_margin, &ft, &ut)?;
    Ok(wind.into_iter().zip(temp).map(|(w, t)| [w, t]).collect())
}

// Quantiles for an unsorted probability batch via one sorted sweep.
fn batch_quantiles(margin: &UniBmaModel, f: &[f64], ps: &[f64]) -> Result<Vec<f64>> {
    let mut order: Vec<usize> = (0..ps.len()).collect();
    order.sort_by(|a, b| ps[*a].total_cmp(&ps[*b]));
    let sorted: Vec<f64> = order.iter().map(|i| ps[*i]).collect();
    let qs = margin.quantiles_sorted_ascending(f, &sorted)?;
    let mut out = vec![0.0; ps.len()];
    for (slot, q) in order.into_iter().zip(qs) {
        out[slot] = q;
    }
    Ok(out)
}

/// Predictive interface for one forecast case under a fitted copula.
pub struct CopulaPredictive<'a> {
    pub model: &'a CopulaModel,
    pub members: &'a [Vec2],
}

impl PredictiveDist for CopulaPredictive<'_> {
    fn sample_n(&self, n: usize, mut rng: &mut dyn rand::RngCore) -> Vec<Vec2> {
        copula_sample(self.model, self.members, n, &mut rng)
            .expect("copula sampling with validated model")
    }

    fn exact_mean(&self) -> Option<Vec2> {
        let fw: Vec<f64> = self.members.iter().map(|m| m[0]).collect();
        let ft: Vec<f64> = self.members.iter().map(|m| m[1]).collect();
        Some([
            self.model.wind_margin.mean(&fw).ok()?,
            self.model.temp_margin.mean(&ft).ok()?,
        ])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bma::GroupSpec;
    use chrono::NaiveDate;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn day(offset: i64) -> NaiveDate {
        NaiveDate::from_ymd_opt(2020, 1, 1).unwrap() + chrono::Duration::days(offset)
    }

    fn window_from(cases: Vec<ForecastCase>) -> TrainingWindow {
        TrainingWindow::new(cases, 40, day(40)).unwrap()
    }

    fn margin(
        family: MarginFamily,
        weights: Vec<f64>,
        coeffs: Vec<(f64, f64)>,
        var: f64,
    ) -> UniBmaModel {
        UniBmaModel::new(
            family,
            GroupSpec::singletons(weights.len()),
            weights,
            coeffs,
            var,
        )
        .unwrap()
    }

    #[test]
    fn temperature_margin_recovers_single_normal_component() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let (a, b, var) = (1.2f64, 0.9f64, 0.25f64);
        let cases: Vec<ForecastCase> = (0..2000)
            .map(|i| {
                let f = rng.random_range(-6.0..6.0);
                let eps: f64 = rng.sample(StandardNormal);
                ForecastCase {
                    station_id: format!("s{}", i % 5),
                    date: day((i % 40) as i64),
                    members: vec![[2.0, f]],
                    obs: [2.0, a + b * f + var.sqrt() * eps],
                }
            })
            .collect();
        let w = window_from(cases);
        let m = fit_margin(
            &w,
            Variable::Temp,
            &GroupSpec::singletons(1),
            &EmConfig::default(),
        )
        .unwrap();
        assert_eq!(m.family(), MarginFamily::Normal);
        assert!((m.coeffs()[0].0 - a).abs() < 0.05, "a {}", m.coeffs()[0].0);
        assert!((m.coeffs()[0].1 - b).abs() < 0.05);
        assert!((m.var() - var).abs() < 0.1 * var);
    }

    #[test]
    fn wind_margin_reduces_to_normal_fit_without_truncation() {
        // mu/sd stays above 8 for both the initializer's variance and the
        // truth, so the hazard corrections are below 1e-13.
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let (a, b, sd) = (10.0, 1.1, 0.4);
        let cases: Vec<ForecastCase> = (0..1500)
            .map(|i| {
                let f = rng.random_range(3.0..7.0);
                let eps: f64 = rng.sample(StandardNormal);
                ForecastCase {
                    station_id: format!("s{}", i % 5),
                    date: day((i % 40) as i64),
                    members: vec![[f, 0.0]],
                    obs: [a + b * f + sd * eps, 0.0],
                }
            })
            .collect();
        let w = window_from(cases);
        let spec = GroupSpec::singletons(1);
        let cfg = EmConfig::default();
        let trunc = fit_margin(&w, Variable::Wind, &spec, &cfg).unwrap();
        // Reference: the same data fitted as a plain normal margin by
        // relabelling wind values as temperatures.
        let relabeled: Vec<ForecastCase> = w
            .cases
            .iter()
            .map(|c| ForecastCase {
                station_id: c.station_id.clone(),
                date: c.date,
                members: vec![[1.0, c.members[0][0]]],
                obs: [1.0, c.obs[0]],
            })
            .collect();
        let normal = fit_margin(&window_from(relabeled), Variable::Temp, &spec, &cfg).unwrap();
        assert!((trunc.coeffs()[0].0 - normal.coeffs()[0].0).abs() < 1e-4);
        assert!((trunc.coeffs()[0].1 - normal.coeffs()[0].1).abs() < 1e-4);
        assert!((trunc.var() - normal.var()).abs() < 1e-4);
    }

    #[test]
    fn identical_members_collapse_to_symmetric_fit() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let cases: Vec<ForecastCase> = (0..300)
            .map(|i| {
                let f = rng.random_range(2.0..6.0);
                let eps: f64 = rng.sample(StandardNormal);
                ForecastCase {
                    station_id: "s".into(),
                    date: day((i % 40) as i64),
                    members: vec![[f, 0.0]; 3],
                    obs: [(0.5 + 0.9 * f + 0.3 * eps).max(0.0), 0.0],
                }
            })
            .collect();
        let w = window_from(cases);
        let m = fit_margin(
            &w,
            Variable::Wind,
            &GroupSpec::singletons(3),
            &EmConfig::default(),
        )
        .unwrap();
        for w_k in m.weights() {
            assert!((w_k - 1.0 / 3.0).abs() < 1e-9, "weights {:?}", m.weights());
        }
        for k in 1..3 {
            assert!((m.coeffs()[k].0 - m.coeffs()[0].0).abs() < 1e-9);
            assert!((m.coeffs()[k].1 - m.coeffs()[0].1).abs() < 1e-9);
        }
    }

    #[test]
    fn cdf_limits_and_median() {
        let wind = margin(MarginFamily::TruncNormal, vec![1.0], vec![(0.5, 0.8)], 1.0);
        let f = [2.0];
        assert_eq!(wind.cdf(&f, -1e-12).unwrap(), 0.0);
        assert!(wind.cdf(&f, 60.0).unwrap() > 1.0 - 1e-12);
        let temp = margin(MarginFamily::Normal, vec![1.0], vec![(1.0, 1.0)], 2.0);
        // Single normal component: CDF at its mean is one half.
        assert!((temp.cdf(&[4.0], 5.0).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn quantile_inverts_cdf() {
        let m = margin(
            MarginFamily::TruncNormal,
            vec![0.5, 0.3, 0.2],
            vec![(0.2, 0.9), (1.0, 0.7), (0.5, 1.1)],
            0.8,
        );
        let f = [1.0, 3.0, 2.0];
        for p in [0.05, 0.3, 0.5, 0.9, 0.99] {
            let q = m.quantile(&f, p).unwrap();
            assert!((m.cdf(&f, q).unwrap() - p).abs() < 1e-6, "p={p}");
        }
        // Independent fine-grid inversion of the CDF at p = 0.9.
        let p = 0.9;
        let q = m.quantile(&f, p).unwrap();
        let (mut lo, mut hi) = (0.0, 50.0);
        while hi - lo > 1e-7 {
            let mid = 0.5 * (lo + hi);
            if m.cdf(&f, mid).unwrap() < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert!((q - 0.5 * (lo + hi)).abs() < 1e-6);
        assert!(m.quantile(&f, 0.0).is_err());
        assert!(m.quantile(&f, 1.0).is_err());
    }

    #[test]
    fn cdf_and_quantile_monotone() {
        let m = margin(
            MarginFamily::Normal,
            vec![0.6, 0.4],
            vec![(0.0, 1.0), (2.0, 0.5)],
            1.5,
        );
        let f = [1.0, -2.0];
        let mut prev = f64::NEG_INFINITY;
        for i in 1..60 {
            let q = m.quantile(&f, i as f64 / 60.0).unwrap();
            assert!(q >= prev - 1e-9);
            prev = q;
        }
        for margin in [
            m,
            margin(MarginFamily::TruncNormal, vec![1.0], vec![(0.5, 0.8)], 0.9),
        ] {
            let f = &f[..margin.spec().n_members()];
            let mut prev = 0.0;
            let mut x = -6.0;
            while x < 10.0 {
                let c = margin.cdf(f, x).unwrap();
                assert!(c >= prev, "cdf decreased at {x}");
                prev = c;
                x += 0.05;
            }
        }
    }

    #[test]
    fn latent_corr_estimation() {
        // Perfectly dependent pairs clamp at 0.999.
        let wind = margin(MarginFamily::TruncNormal, vec![1.0], vec![(0.0, 1.0)], 1.0);
        let temp = margin(MarginFamily::Normal, vec![1.0], vec![(0.0, 1.0)], 1.0);
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let cases: Vec<ForecastCase> = (0..100)
            .map(|_| {
                let u: f64 = rng.random_range(0.02..0.98);
                let fw = 3.0;
                let ft = 0.0;
                ForecastCase {
                    station_id: "s".into(),
                    date: day(0),
                    members: vec![[fw, ft]],
                    obs: [
                        wind.quantile(&[fw], u).unwrap(),
                        temp.quantile(&[ft], u).unwrap(),
                    ],
                }
            })
            .collect();
        let history: Vec<(&ForecastCase, &UniBmaModel, &UniBmaModel)> =
            cases.iter().map(|c| (c, &wind, &temp)).collect();
        let rho = estimate_latent_corr(&history).unwrap();
        assert!((rho - 0.999).abs() < 1e-12);

        // Too little history errors.
        assert!(matches!(
            estimate_latent_corr(&history[..5]),
            Err(Error::InsufficientHistory { got: 5, need: 10 })
        ));

        // Independent margins: estimate near zero.
        let n = 2000;
        let cases: Vec<ForecastCase> = (0..n)
            .map(|_| {
                let (u, v): (f64, f64) = (rng.random_range(1e-6..1.0), rng.random_range(1e-6..1.0));
                ForecastCase {
                    station_id: "s".into(),
                    date: day(0),
                    members: vec![[3.0, 0.0]],
                    obs: [
                        wind.quantile(&[3.0], u).unwrap(),
                        temp.quantile(&[0.0], v).unwrap(),
                    ],
                }
            })
            .collect();
        let history: Vec<(&ForecastCase, &UniBmaModel, &UniBmaModel)> =
            cases.iter().map(|c| (c, &wind, &temp)).collect();
        let rho = estimate_latent_corr(&history).unwrap();
        assert!(rho.abs() < 3.0 / (n as f64).sqrt() + 0.02, "rho {rho}");
    }

    #[test]
    fn latent_corr_recovers_half() {
        let wind = margin(MarginFamily::TruncNormal, vec![1.0], vec![(1.0, 0.8)], 0.7);
        let temp = margin(MarginFamily::Normal, vec![1.0], vec![(0.5, 0.9)], 1.2);
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let rho_true = 0.5f64;
        let ortho = (1.0 - rho_true * rho_true).sqrt();
        let n = 2000;
        let cases: Vec<ForecastCase> = (0..n)
            .map(|_| {
                let z1: f64 = rng.sample(StandardNormal);
                let z2: f64 = rho_true * z1 + ortho * rng.sample::<f64, _>(StandardNormal);
                let fw = rng.random_range(1.0..5.0);
                let ft = rng.random_range(-3.0..3.0);
                ForecastCase {
                    station_id: "s".into(),
                    date: day(0),
                    members: vec![[fw, ft]],
                    obs: [
                        wind.quantile(&[fw], std_normal_cdf(z1).clamp(1e-12, 1.0 - 1e-12))
                            .unwrap(),
                        temp.quantile(&[ft], std_normal_cdf(z2).clamp(1e-12, 1.0 - 1e-12))
                            .unwrap(),
                    ],
                }
            })
            .collect();
        let history: Vec<(&ForecastCase, &UniBmaModel, &UniBmaModel)> =
            cases.iter().map(|c| (c, &wind, &temp)).collect();
        let rho = estimate_latent_corr(&history).unwrap();
        assert!((rho - rho_true).abs() < 0.05, "rho {rho}");
    }

    fn ks_distance(mut sample: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
        sample.sort_by(f64::total_cmp);
        let n = sample.len() as f64;
        let mut d: f64 = 0.0;
        for (i, x) in sample.iter().enumerate() {
            let f = cdf(*x);
            d = d.max((f - i as f64 / n).abs());
            d = d.max((f - (i as f64 + 1.0) / n).abs());
        }
        d
    }

    #[test]
    fn copula_sampling_preserves_margins_and_dependence() {
        let wind = margin(
            MarginFamily::TruncNormal,
            vec![0.6, 0.4],
            vec![(0.3, 0.9), (0.8, 0.7)],
            0.6,
        );
        let temp = margin(
            MarginFamily::Normal,
            vec![0.6, 0.4],
            vec![(0.5, 0.95), (-0.5, 1.0)],
            1.1,
        );
        let members: Vec<Vec2> = vec![[2.0, 1.0], [3.5, -0.5]];
        let fw = [2.0, 3.5];

        // Independence at zero latent correlation.
        let cm = CopulaModel::new(wind.clone(), temp.clone(), 0.0).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let n = 10_000;
        let sample = copula_sample(&cm, &members, n, &mut rng).unwrap();
        let ws: Vec<f64> = sample.iter().map(|x| x[0]).collect();
        let ts: Vec<f64> = sample.iter().map(|x| x[1]).collect();
        let corr = linalg::pearson(&ws, &ts);
        assert!(corr.abs() < 3.0 / (n as f64).sqrt() + 0.02, "corr {corr}");
        assert!(sample.iter().all(|x| x[0] >= 0.0));

        // Near-comonotone coupling: strong rank correlation.
        let cm = CopulaModel::new(wind.clone(), temp.clone(), 0.999).unwrap();
        let sample = copula_sample(&cm, &members, n, &mut rng).unwrap();
        let mut wr: Vec<usize> = (0..n).collect();
        wr.sort_by(|a, b| sample[*a][0].total_cmp(&sample[*b][0]));
        let mut tr: Vec<usize> = (0..n).collect();
        tr.sort_by(|a, b| sample[*a][1].total_cmp(&sample[*b][1]));
        let mut rank_w = vec![0.0; n];
        let mut rank_t = vec![0.0; n];
        for (r, i) in wr.into_iter().enumerate() {
            rank_w[i] = r as f64;
        }
        for (r, i) in tr.into_iter().enumerate() {
            rank_t[i] = r as f64;
        }
        assert!(linalg::pearson(&rank_w, &rank_t) > 0.95);

        // Margin preservation: KS distance of the wind coordinate.
        let cm = CopulaModel::new(wind.clone(), temp, 0.4).unwrap();
        let sample = copula_sample(&cm, &members, 100_000, &mut rng).unwrap();
        let ws: Vec<f64> = sample.iter().map(|x| x[0]).collect();
        let d = ks_distance(ws, |x| wind.cdf(&fw, x).unwrap());
        assert!(d < 0.01, "KS distance {d}");
    }

    #[test]
    fn batch_quantiles_match_bisection() {
        let m = margin(
            MarginFamily::TruncNormal,
            vec![0.5, 0.5],
            vec![(0.5, 1.0), (1.5, 0.8)],
            0.9,
        );
        let f = [2.0, 1.0];
        let ps: Vec<f64> = vec![0.731, 0.002, 0.5, 0.998, 0.25, 0.25, 0.9991];
        let batch = batch_quantiles(&m, &f, &ps).unwrap();
        for (p, q) in ps.iter().zip(&batch) {
            let want = m.quantile(&f, *p).unwrap();
            assert!((q - want).abs() < 1e-7, "p={p}: {q} vs {want}");
        }
    }

    #[test]
    fn copula_model_file_roundtrip() {
        let wind = margin(
            MarginFamily::TruncNormal,
            vec![1.0],
            vec![(0.1, 1.0 / 3.0)],
            0.7,
        );
        let temp = margin(MarginFamily::Normal, vec![1.0], vec![(0.2, 0.9)], 1.3);
        let file = CopulaModelFile {
            wind_margin: wind,
            temp_margin: temp,
            latent_corr: 0.1221,
            corr_window: CorrWindow {
                start: day(-120),
                end: day(-1),
            },
        };
        let json = serde_json::to_string_pretty(&file).unwrap();
        let back: CopulaModelFile = serde_json::from_str(&json).unwrap();
        assert_eq!(file, back);
    }
}
