//! Maximum-likelihood fitting of mixture models by a truncated-data EM
//! algorithm.
//!
//! The E step computes latent membership responsibilities; the M step updates
//! weights exactly and takes one fixed-point sweep of the hazard-corrected
//! location and scale equations (the stationarity system is nonlinear, so a
//! single sweep per cycle is used and the best observed-likelihood iterate is
//! returned). Wind truncation enters through the hazard ratio
//! `phi(mu_W/sigma_W) / Phi(mu_W/sigma_W)`, which corrects residuals by the
//! wind column of the scale matrix.
//!
//! The scale update adds `t h(t)` times the rank-one matrix
//! `[[s2w, swt], [swt, swt^2/s2w]]` (the wind column's outer product over
//! `s2w`) to the responsibility-weighted scatter. This is the form obtained
//! by differentiating the complete-data log-likelihood; the
//! `sigma_update_consistency` tests check it against a direct evaluation of
//! that objective and against unit equivariance.

use crate::bma::{AffineMap2, BmaMode, BmaModel, GroupSpec, LocationParams};
use crate::data::TrainingWindow;
use crate::dists::{hazard_ratio, ln_std_normal_cdf};
use crate::linalg::{self, Mat2, Vec2};
use crate::{Error, Result};
use serde::Serialize;

/// Stopping rules and numerical guards for [`fit`].
#[derive(Debug, Clone, Copy)]
pub struct EmConfig {
    pub max_iter: usize,
    /// Relative observed log-likelihood change that counts as converged.
    pub tol_loglik: f64,
    /// Maximum absolute parameter change that counts as converged.
    pub tol_param: f64,
    /// Per-member weight floor, renormalized after flooring.
    pub min_weight: f64,
    /// Eigenvalue floor for the scale matrix.
    pub sigma_floor: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iter: 500,
            tol_loglik: 1e-6,
            tol_param: 1e-6,
            min_weight: 1e-4,
            sigma_floor: 1e-8,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter < 1 {
            return Err(Error::InvalidConfig("max_iter must be at least 1".into()));
        }
        if self.tol_loglik <= 0.0
            || self.tol_param <= 0.0
            || self.min_weight <= 0.0
            || self.sigma_floor <= 0.0
        {
            return Err(Error::InvalidConfig(
                "EM tolerances and floors must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Latent allocation probabilities: `z[case][member]`, rows summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct Responsibilities {
    pub z: Vec<Vec<f64>>,
}

/// One EM iterate.
#[derive(Debug, Clone)]
pub struct EmState {
    pub model: BmaModel,
    pub responsibilities: Responsibilities,
    pub loglik: f64,
    pub iteration: usize,
}

impl EmState {
    /// Evaluate a model on a window: responsibilities plus log-likelihood.
    pub fn at(model: BmaModel, window: &TrainingWindow, iteration: usize) -> Result<Self> {
        let responsibilities = e_step(&model, window)?;
        let loglik = log_likelihood(&model, window)?;
        Ok(EmState {
            model,
            responsibilities,
            loglik,
            iteration,
        })
    }
}

/// Fit trace and convergence outcome.
#[derive(Debug, Clone, Serialize)]
pub struct FitDiagnostics {
    pub iterations: usize,
    pub loglik_trace: Vec<f64>,
    pub converged: bool,
    pub best_iter: usize,
    /// Groups whose initial regression was rank-deficient and fell back.
    pub init_fallback_groups: Vec<String>,
}

// Scale-matrix quantities shared by every component in one iteration.
struct SigmaCache {
    inv: Mat2,
    ln_norm_base: f64, // ln(2 pi) + ln(det)/2
    sigma_w: f64,
    /// Hazard correction direction: the wind column over sigma_W.
    corr_vec: Vec2,
    /// Its outer product: the scale-update correction matrix.
    corr_mat: Mat2,
}

impl SigmaCache {
    fn new(sigma: &Mat2) -> Result<Self> {
        let det = sigma.det();
        if !(det > 0.0) || sigma.0[0][0] <= 0.0 {
            return Err(Error::InvalidDistribution(format!(
                "scale matrix has nonpositive determinant {det}"
            )));
        }
        let sigma_w = sigma.0[0][0].sqrt();
        let corr_vec = [sigma_w, sigma.0[0][1] / sigma_w];
        Ok(SigmaCache {
            inv: sigma
                .inverse()
                .ok_or_else(|| Error::InvalidDistribution("singular scale matrix".into()))?,
            ln_norm_base: (2.0 * std::f64::consts::PI).ln() + 0.5 * det.ln(),
            sigma_w,
            corr_vec,
            corr_mat: Mat2::outer(corr_vec, corr_vec),
        })
    }

    // Log of the truncated component density at x (wind of x nonnegative).
    fn ln_component(&self, mu: Vec2, x: Vec2) -> f64 {
        let d = linalg::sub(x, mu);
        let q = linalg::dot(d, self.inv.mul_vec(d));
        -0.5 * q - self.ln_norm_base - ln_std_normal_cdf(mu[0] / self.sigma_w)
    }
}

fn check_window(model: &BmaModel, window: &TrainingWindow) -> Result<()> {
    if window.is_empty() {
        return Err(Error::EmptyInput("empty training window".into()));
    }
    for c in &window.cases {
        if c.members.len() != model.spec().n_members() {
            return Err(Error::MemberMismatch {
                got: c.members.len(),
                expected: model.spec().n_members(),
            });
        }
        if c.obs[0] < 0.0 {
            return Err(Error::Domain(format!(
                "observation at {} {} has negative wind",
                c.station_id, c.date
            )));
        }
    }
    Ok(())
}

// Per-member log mixture terms for one case.
fn case_log_terms(model: &BmaModel, cache: &SigmaCache, members: &[Vec2], obs: Vec2) -> Vec<f64> {
    let mut terms = Vec::with_capacity(members.len());
    for (l, f) in members.iter().enumerate() {
        let w = model.member_weight(l);
        if w > 0.0 {
            let mu = model.component_location(l, *f);
            terms.push(w.ln() + cache.ln_component(mu, obs));
        } else {
            terms.push(f64::NEG_INFINITY);
        }
    }
    terms
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return f64::NEG_INFINITY;
    }
    let mut sum = linalg::CompensatedSum::default();
    for t in terms {
        sum.add((t - max).exp());
    }
    max + sum.value().ln()
}

/// Observed-data log-likelihood of the window under the model.
pub fn log_likelihood(model: &BmaModel, window: &TrainingWindow) -> Result<f64> {
    check_window(model, window)?;
    let cache = SigmaCache::new(&model.sigma())?;
    let mut total = 0.0;
    for c in &window.cases {
        let lp = log_sum_exp(&case_log_terms(model, &cache, &c.members, c.obs));
        if !lp.is_finite() {
            return Err(Error::DegenerateLikelihood {
                station: c.station_id.clone(),
                date: c.date,
            });
        }
        total += lp;
    }
    Ok(total)
}

/// E step: responsibilities of every member for every case.
pub fn e_step(model: &BmaModel, window: &TrainingWindow) -> Result<Responsibilities> {
    check_window(model, window)?;
    let cache = SigmaCache::new(&model.sigma())?;
    let mut z = Vec::with_capacity(window.len());
    for c in &window.cases {
        let terms = case_log_terms(model, &cache, &c.members, c.obs);
        let lse = log_sum_exp(&terms);
        if !lse.is_finite() {
            return Err(Error::DegenerateLikelihood {
                station: c.station_id.clone(),
                date: c.date,
            });
        }
        z.push(terms.iter().map(|t| (t - lse).exp()).collect());
    }
    Ok(Responsibilities { z })
}

/// First M-step half: group weights from responsibility column means.
///
/// Each member's column mean is averaged back over its group so exchangeable
/// members keep a single weight.
pub fn m_step_weights(resp: &Responsibilities, spec: &GroupSpec) -> Vec<f64> {
    let n = resp.z.len() as f64;
    let mut member_mean = vec![linalg::CompensatedSum::default(); spec.n_members()];
    for row in &resp.z {
        for (l, v) in row.iter().enumerate() {
            member_mean[l].add(*v);
        }
    }
    spec.groups()
        .iter()
        .map(|g| {
            let mut acc = linalg::CompensatedSum::default();
            for l in &g.members {
                acc.add(member_mean[*l].value());
            }
            acc.value() / (n * g.members.len() as f64)
        })
        .collect()
}

/// Expected complete-data log-likelihood for fixed responsibilities.
///
/// Direct summation of `z * (ln w + ln g)`; the oracle the fixed-point sweep
/// is checked against.
pub fn complete_data_loglik(
    model: &BmaModel,
    window: &TrainingWindow,
    resp: &Responsibilities,
) -> Result<f64> {
    check_window(model, window)?;
    let cache = SigmaCache::new(&model.sigma())?;
    let mut total = 0.0;
    for (c, row) in window.cases.iter().zip(&resp.z) {
        for (l, z) in row.iter().enumerate() {
            if *z > 0.0 {
                let w = model.member_weight(l);
                let mu = model.component_location(l, c.members[l]);
                total += z * (w.ln() + cache.ln_component(mu, c.obs));
            }
        }
    }
    Ok(total)
}

// One hazard-corrected update of the affine maps for a set of members
// (one group in full mode, all members in parsimonious mode).
fn update_affine(
    old: &AffineMap2,
    cache: &SigmaCache,
    window: &TrainingWindow,
    resp: &Responsibilities,
    members: &[usize],
    label: &str,
) -> Result<AffineMap2> {
    // Intercept: hazard evaluated at the old location. Compensated sums keep
    // the reductions independent of member order within a group.
    let mut z_sum = linalg::CompensatedSum::default();
    let mut acc = linalg::CompensatedVec2::default();
    let mut f_acc = linalg::CompensatedVec2::default();
    for (c, row) in window.cases.iter().zip(&resp.z) {
        for &l in members {
            let z = row[l];
            if z == 0.0 {
                continue;
            }
            let f = c.members[l];
            let mu_old = old.apply(f);
            let h = hazard_ratio(mu_old[0] / cache.sigma_w);
            let resid = linalg::sub(
                linalg::sub(c.obs, old.b.mul_vec(f)),
                linalg::scale(cache.corr_vec, h),
            );
            acc.add_scaled(resid, z);
            f_acc.add_scaled(f, z);
            z_sum.add(z);
        }
    }
    let z_sum = z_sum.value();
    if z_sum < 1e-10 {
        return Err(Error::RankDeficient(format!(
            "no responsibility mass on {label}"
        )));
    }
    let a_new = linalg::scale(acc.value(), 1.0 / z_sum);
    let f_bar = linalg::scale(f_acc.value(), 1.0 / z_sum);

    // Slope: hazard evaluated with the fresh intercept, old slope. The
    // linear system B (S + c fbar fbar^T) = Rc + s_r fbar^T is solved through
    // the centered Gram S, whose conditioning does not degrade when member
    // values sit far from the origin (temperatures in kelvin).
    let mut rc = linalg::CompensatedMat2::default();
    let mut s_cent = linalg::CompensatedMat2::default();
    let mut raw_rhs = linalg::CompensatedMat2::default();
    let mut raw_gram = linalg::CompensatedMat2::default();
    let mut s_r = linalg::CompensatedVec2::default();
    for (c, row) in window.cases.iter().zip(&resp.z) {
        for &l in members {
            let z = row[l];
            if z == 0.0 {
                continue;
            }
            let f = c.members[l];
            let mu_tilde = linalg::add(a_new, old.b.mul_vec(f));
            let h = hazard_ratio(mu_tilde[0] / cache.sigma_w);
            let resid = linalg::sub(linalg::sub(c.obs, a_new), linalg::scale(cache.corr_vec, h));
            let df = linalg::sub(f, f_bar);
            rc.add_scaled(&Mat2::outer(resid, df), z);
            s_cent.add_scaled(&Mat2::outer(df, df), z);
            s_r.add_scaled(resid, z);
            raw_rhs.add_scaled(&Mat2::outer(resid, f), z);
            raw_gram.add_scaled(&Mat2::outer(f, f), z);
        }
    }
    let s_cent = s_cent.value();
    let (s_lo, s_hi) = s_cent.sym_eigenvalues();
    let b_new = if s_lo > 1e-12 * s_hi.max(1.0) {
        let s_inv = s_cent
            .inverse()
            .expect("positive eigenvalues imply invertibility");
        let rc = rc.value();
        let s_r = s_r.value();
        let si_fbar = s_inv.mul_vec(f_bar);
        let q = linalg::dot(f_bar, si_fbar);
        let v = linalg::scale(
            linalg::add(rc.mul_vec(si_fbar), linalg::scale(s_r, q)),
            1.0 / (1.0 + z_sum * q),
        );
        rc.add(&Mat2::outer(
            linalg::sub(s_r, linalg::scale(v, z_sum)),
            f_bar,
        ))
        .mul(&s_inv)
    } else {
        // Centered Gram is degenerate (members on a line through their
        // mean); the raw system can still be solvable.
        let gram = raw_gram.value();
        let (lo, hi) = gram.sym_eigenvalues();
        let gram_inv = gram
            .inverse()
            .filter(|_| lo.abs() > 1e-12 * hi.abs().max(1.0));
        let Some(gram_inv) = gram_inv else {
            return Err(Error::RankDeficient(format!(
                "member Gram matrix for {label} is singular"
            )));
        };
        raw_rhs.value().mul(&gram_inv)
    };
    Ok(AffineMap2 { a: a_new, b: b_new })
}

/// Second M-step half: one fixed-point sweep of the location maps and the
/// shared scale matrix. The returned scale matrix is symmetrized and
/// eigenvalue-floored at `sigma_floor`.
pub fn m_step_location_scale(
    model: &BmaModel,
    resp: &Responsibilities,
    window: &TrainingWindow,
    config: &EmConfig,
) -> Result<(LocationParams, Mat2)> {
    check_window(model, window)?;
    if resp.z.len() != window.len() {
        return Err(Error::InvalidConfig(
            "responsibility row count differs from window size".into(),
        ));
    }
    let cache = SigmaCache::new(&model.sigma())?;
    let spec = model.spec();

    let params = match model.params() {
        LocationParams::PerGroup(maps) => {
            let mut out = Vec::with_capacity(maps.len());
            for (k, g) in spec.groups().iter().enumerate() {
                out.push(update_affine(
                    &maps[k], &cache, window, resp, &g.members, &g.label,
                )?);
            }
            LocationParams::PerGroup(out)
        }
        LocationParams::Shared(map) => {
            let all: Vec<usize> = (0..spec.n_members()).collect();
            LocationParams::Shared(update_affine(
                map,
                &cache,
                window,
                resp,
                &all,
                "shared location map",
            )?)
        }
    };

    // Scale update: scatter about the fresh locations plus the t h(t)
    // correction, averaged over all cases and members.
    let affine_of = |l: usize| -> &AffineMap2 {
        match &params {
            LocationParams::PerGroup(maps) => &maps[spec.group_of(l)],
            LocationParams::Shared(map) => map,
        }
    };
    let mut scatter = linalg::CompensatedMat2::default();
    for (c, row) in window.cases.iter().zip(&resp.z) {
        for (l, z) in row.iter().enumerate() {
            if *z == 0.0 {
                continue;
            }
            let mu_new = affine_of(l).apply(c.members[l]);
            let r = linalg::sub(c.obs, mu_new);
            let t = mu_new[0] / cache.sigma_w;
            let correction = t * hazard_ratio(t);
            scatter.add_scaled(
                &Mat2::outer(r, r).add(&cache.corr_mat.scale(correction)),
                *z,
            );
        }
    }
    let sigma = scatter
        .value()
        .scale(1.0 / window.len() as f64)
        .floor_eigenvalues(config.sigma_floor);
    Ok((params, sigma))
}

fn floor_and_renormalize(weights: &mut [f64], spec: &GroupSpec, min_weight: f64) {
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
}

fn max_param_delta(a: &BmaModel, b: &BmaModel) -> f64 {
    let mut d: f64 = 0.0;
    for (x, y) in a.weights().iter().zip(b.weights()) {
        d = d.max((x - y).abs());
    }
    let maps = |m: &BmaModel| -> Vec<AffineMap2> {
        match m.params() {
            LocationParams::PerGroup(v) => v.clone(),
            LocationParams::Shared(s) => vec![*s],
        }
    };
    for (ma, mb) in maps(a).iter().zip(maps(b).iter()) {
        for i in 0..2 {
            d = d.max((ma.a[i] - mb.a[i]).abs());
            for j in 0..2 {
                d = d.max((ma.b.0[i][j] - mb.b.0[i][j]).abs());
            }
        }
    }
    for i in 0..2 {
        for j in 0..2 {
            d = d.max((a.sigma().0[i][j] - b.sigma().0[i][j]).abs());
        }
    }
    d
}

// Least-squares regression of observations on the given members' forecasts,
// solved through centered moments; None when the design is rank deficient.
fn regress(window: &TrainingWindow, members: &[usize]) -> Option<AffineMap2> {
    let mut n = 0.0f64;
    let mut f_sum = linalg::CompensatedVec2::default();
    let mut y_sum = linalg::CompensatedVec2::default();
    for c in &window.cases {
        for &l in members {
            f_sum.add(c.members[l]);
            y_sum.add(c.obs);
            n += 1.0;
        }
    }
    if n == 0.0 {
        return None;
    }
    let f_bar = linalg::scale(f_sum.value(), 1.0 / n);
    let y_bar = linalg::scale(y_sum.value(), 1.0 / n);
    let mut s_ff = linalg::CompensatedMat2::default();
    let mut s_yf = linalg::CompensatedMat2::default();
    for c in &window.cases {
        for &l in members {
            let df = linalg::sub(c.members[l], f_bar);
            let dy = linalg::sub(c.obs, y_bar);
            s_ff.add_scaled(&Mat2::outer(df, df), 1.0);
            s_yf.add_scaled(&Mat2::outer(dy, df), 1.0);
        }
    }
    let s_ff = s_ff.value();
    let (lo, hi) = s_ff.sym_eigenvalues();
    if lo <= 1e-12 * hi.max(1.0) {
        return None;
    }
    let b = s_yf.value().mul(&s_ff.inverse()?);
    Some(AffineMap2 {
        a: linalg::sub(y_bar, b.mul_vec(f_bar)),
        b,
    })
}

fn fallback_affine(window: &TrainingWindow, members: &[usize]) -> AffineMap2 {
    // Mean residual against an identity slope.
    let mut acc = [0.0, 0.0];
    let mut n = 0.0;
    for c in &window.cases {
        for &l in members {
            acc = linalg::add(acc, linalg::sub(c.obs, c.members[l]));
            n += 1.0;
        }
    }
    AffineMap2 {
        a: linalg::scale(acc, 1.0 / n),
        b: Mat2::identity(),
    }
}

/// Starting model: per-group (or pooled) regression coefficients, the
/// observation covariance as the scale matrix, and equal weights.
pub fn initialize(
    window: &TrainingWindow,
    spec: &GroupSpec,
    mode: BmaMode,
    config: &EmConfig,
) -> Result<(BmaModel, Vec<String>)> {
    if window.is_empty() {
        return Err(Error::EmptyInput("empty training window".into()));
    }
    let mut fallbacks = Vec::new();
    let params = match mode {
        BmaMode::Full => {
            let mut maps = Vec::with_capacity(spec.n_groups());
            for g in spec.groups() {
                match regress(window, &g.members) {
                    Some(map) => maps.push(map),
                    None => {
                        fallbacks.push(g.label.clone());
                        maps.push(fallback_affine(window, &g.members));
                    }
                }
            }
            LocationParams::PerGroup(maps)
        }
        BmaMode::Parsimonious => {
            let all: Vec<usize> = (0..spec.n_members()).collect();
            match regress(window, &all) {
                Some(map) => LocationParams::Shared(map),
                None => {
                    fallbacks.push("shared location map".into());
                    LocationParams::Shared(fallback_affine(window, &all))
                }
            }
        }
    };
    let obs: Vec<Vec2> = window.cases.iter().map(|c| c.obs).collect();
    let sigma0 = linalg::sample_covariance(&obs).floor_eigenvalues(config.sigma_floor);
    let weights = vec![1.0 / spec.n_members() as f64; spec.n_groups()];
    Ok((
        BmaModel::new(spec.clone(), weights, params, sigma0)?,
        fallbacks,
    ))
}

/// Full EM fit on one training window.
///
/// Alternates the E step, the exact weight update, and one location/scale
/// sweep until the observed log-likelihood stalls or `max_iter` is reached,
/// then returns the iterate with the highest observed log-likelihood (the
/// sweep is a fixed-point step, so single cycles need not be monotone).
pub fn fit(
    window: &TrainingWindow,
    spec: &GroupSpec,
    mode: BmaMode,
    config: &EmConfig,
    init: Option<BmaModel>,
) -> Result<(BmaModel, FitDiagnostics)> {
    config.validate()?;
    let (mut model, init_fallback_groups) = match init {
        Some(m) => {
            if m.spec() != spec {
                return Err(Error::InvalidConfig(
                    "initial model has a different group structure".into(),
                ));
            }
            (m, Vec::new())
        }
        None => initialize(window, spec, mode, config)?,
    };
    check_window(&model, window)?;

    let ll0 = log_likelihood(&model, window)?;
    let mut trace = vec![ll0];
    let mut best = (model.clone(), ll0, 0usize);
    let mut prev_ll = ll0;
    let mut converged = false;

    for iter in 1..=config.max_iter {
        let resp = e_step(&model, window)?;
        debug_assert!(resp
            .z
            .iter()
            .all(|row| (row.iter().sum::<f64>() - 1.0).abs() < 1e-9));
        let mut weights = m_step_weights(&resp, spec);
        floor_and_renormalize(&mut weights, spec, config.min_weight);
        let (params, sigma) = m_step_location_scale(&model, &resp, window, config)?;
        if !sigma.is_finite() {
            return Err(Error::Divergence("scale matrix became non-finite".into()));
        }
        let next = BmaModel::new(spec.clone(), weights, params, sigma)?;
        let delta = max_param_delta(&model, &next);
        if !delta.is_finite() {
            return Err(Error::Divergence("parameters became non-finite".into()));
        }
        model = next;
        let ll = log_likelihood(&model, window)?;
        trace.push(ll);
        if ll > best.1 {
            best = (model.clone(), ll, iter);
        }
        let rel_change = (ll - prev_ll).abs() / prev_ll.abs().max(1.0);
        prev_ll = ll;
        if rel_change < config.tol_loglik || delta < config.tol_param {
            converged = true;
            break;
        }
    }

    let iterations = trace.len() - 1;
    let (best_model, _, best_iter) = best;
    Ok((
        best_model,
        FitDiagnostics {
            iterations,
            loglik_trace: trace,
            converged,
            best_iter,
            init_fallback_groups,
        },
    ))
}
