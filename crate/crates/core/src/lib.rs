//! Joint calibration of ensemble forecasts of wind speed and temperature.
//!
//! The predictive model is a mixture of bivariate normal components truncated
//! from below at zero in the wind coordinate, one component per ensemble
//! member, with affine location maps and a shared scale matrix. Parameters are
//! estimated by maximum likelihood on a rolling training window using a
//! truncated-data EM algorithm. A Gaussian-copula baseline couples separately
//! calibrated univariate margins, and a verification suite scores both against
//! the raw ensemble (energy score, reliability index, determinant sharpness,
//! Euclidean error of mean/median point forecasts).
//!
//! Modules follow the pipeline order: [`dists`] (truncated bivariate normal),
//! [`bma`] (mixture models), [`em`] (fitting), [`copula`] (baseline),
//! [`verify`] (scores), [`data`] (ingestion and rolling windows), and
//! [`synth`] (synthetic ensembles with known ground truth).

pub mod bma;
pub mod copula;
pub mod data;
pub mod dists;
pub mod em;
mod error;
pub mod linalg;
pub mod synth;
pub mod verify;

pub use error::{Error, Result};
pub use linalg::{Mat2, Vec2};
