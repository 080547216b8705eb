//! Synthetic ensemble generator with known ground truth.
//!
//! Each case has a latent signal drawn from a station-free climatology; the
//! observation adds one error draw to the signal and the members add their
//! own error draws scaled by the dispersion factor (plus a fixed bias). At
//! dispersion 1 and zero bias the observation is exchangeable with the
//! members, so rank histograms are uniform; smaller factors reproduce the
//! underdispersion of raw ensembles, and the shared climatological and error
//! correlation fixes the wind-temperature correlation of the observations.

use crate::bma::GroupKind;
use crate::data::{DatasetManifest, ForecastCase, Units};
use crate::linalg::{Mat2, Vec2};
use crate::{Error, Result};
use chrono::NaiveDate;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

// Climatology and error scales (wind m/s, temperature K).
const CLIM_MEAN: Vec2 = [5.0, 285.0];
const CLIM_SD: Vec2 = [1.2, 3.0];
const ERR_SD: Vec2 = [0.8, 2.0];

/// Generator settings; the same seed always produces identical cases.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_stations: usize,
    pub n_days: usize,
    pub m: usize,
    /// Target wind-temperature correlation of the observations.
    pub truth_corr: f64,
    pub member_bias: Vec2,
    /// Ensemble spread over observation-error spread; below 1 yields
    /// underdispersion.
    pub dispersion_factor: f64,
    pub grouping: GroupKind,
    pub seed: u64,
    pub start_date: NaiveDate,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_stations == 0 || self.n_days == 0 || self.m == 0 {
            return Err(Error::InvalidConfig(
                "stations, days and members must be positive".into(),
            ));
        }
        if !(self.dispersion_factor > 0.0) {
            return Err(Error::InvalidConfig(
                "dispersion factor must be positive".into(),
            ));
        }
        if !(self.truth_corr.abs() < 1.0) {
            return Err(Error::InvalidConfig(
                "truth correlation must be inside (-1, 1)".into(),
            ));
        }
        if self.grouping.member_count() != self.m {
            return Err(Error::InvalidConfig(format!(
                "grouping {} expects {} members, config has {}",
                self.grouping,
                self.grouping.member_count(),
                self.m
            )));
        }
        Ok(())
    }

    /// Manifest describing the generated dataset.
    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            ensemble_name: "synthetic".into(),
            m: self.m,
            member_labels: (1..=self.m).map(|i| format!("m{i}")).collect(),
            grouping: self.grouping,
            variables: Units::default(),
        }
    }
}

fn correlated_chol(sd: Vec2, rho: f64) -> Mat2 {
    Mat2::symmetric(sd[0] * sd[0], rho * sd[0] * sd[1], sd[1] * sd[1])
        .cholesky()
        .expect("valid correlation")
}

fn draw2<R: Rng>(chol: &Mat2, rng: &mut R) -> Vec2 {
    let g: Vec2 = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
    chol.mul_vec(g)
}

/// Generate all (station, day) cases for the configuration.
pub fn generate(cfg: &SynthConfig) -> Result<Vec<ForecastCase>> {
    cfg.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let clim_chol = correlated_chol(CLIM_SD, cfg.truth_corr);
    let err_chol = correlated_chol(ERR_SD, cfg.truth_corr);
    let mut cases = Vec::with_capacity(cfg.n_stations * cfg.n_days);
    for day in 0..cfg.n_days {
        let date = cfg.start_date + chrono::Duration::days(day as i64);
        for station in 0..cfg.n_stations {
            // Latent signal plus observation error, truncated to keep the
            // observed wind nonnegative.
            let (signal, obs) = loop {
                let s = draw2(&clim_chol, &mut rng);
                let signal = [CLIM_MEAN[0] + s[0], CLIM_MEAN[1] + s[1]];
                let eta = draw2(&err_chol, &mut rng);
                let obs = [signal[0] + eta[0], signal[1] + eta[1]];
                if obs[0] >= 0.0 {
                    break (signal, obs);
                }
            };
            let members = (0..cfg.m)
                .map(|_| {
                    let eps = draw2(&err_chol, &mut rng);
                    [
                        (signal[0] + cfg.member_bias[0] + cfg.dispersion_factor * eps[0]).max(0.0),
                        signal[1] + cfg.member_bias[1] + cfg.dispersion_factor * eps[1],
                    ]
                })
                .collect();
            cases.push(ForecastCase {
                station_id: format!("st{:03}", station + 1),
                date,
                members,
                obs,
            });
        }
    }
    Ok(cases)
}
