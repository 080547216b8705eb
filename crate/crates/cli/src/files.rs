//! Run-directory file formats: run metadata, per-date predictions, reports.
//!
//! Layout under the calibrate `--output` directory:
//! `run.json`, `models/DATE.json`, `predictions/DATE.csv`, and after
//! `verify`: `report.json` and `rankhist_<method>.csv`.

use crate::Method;
use bivar_calib::verify::{CaseScore, VerificationReport};
use bivar_calib::{Error, Result, Vec2};
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Everything a calibrate run was configured with, plus what it skipped.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub method: Method,
    pub grouping: String,
    pub dataset: PathBuf,
    pub ensemble: String,
    pub m: usize,
    pub training_days: u32,
    pub mc_samples: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub corr_start: Option<NaiveDate>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub corr_end: Option<NaiveDate>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval_start: Option<NaiveDate>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval_end: Option<NaiveDate>,
    /// Target dates skipped because their fit failed, with the reason.
    pub skipped_dates: Vec<SkippedDate>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkippedDate {
    pub date: NaiveDate,
    pub reason: String,
}

pub fn run_config_path(output: &Path) -> PathBuf {
    output.join("run.json")
}

pub fn write_run_config(output: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::write(
        run_config_path(output),
        serde_json::to_string_pretty(cfg)? + "\n",
    )?;
    Ok(())
}

pub fn read_run_config(output: &Path) -> Result<RunConfig> {
    Ok(serde_json::from_str(&std::fs::read_to_string(
        run_config_path(output),
    )?)?)
}

/// One scored evaluation case as stored in `predictions/DATE.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub station_id: String,
    pub date: NaiveDate,
    pub obs: Vec2,
    pub score: CaseScore,
}

pub const PREDICTIONS_HEADER: &str = "station_id,date,obs_wind,obs_temp,mean_wind,mean_temp,\
median_wind,median_temp,es,ds,mv_rank,covered_wind,covered_temp";

pub fn predictions_to_csv(rows: &[PredictionRow]) -> String {
    let mut out = String::from(PREDICTIONS_HEADER);
    out.push('\n');
    for r in rows {
        let s = &r.score;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.station_id,
            r.date.format("%Y-%m-%d"),
            r.obs[0],
            r.obs[1],
            s.point_mean[0],
            s.point_mean[1],
            s.point_median[0],
            s.point_median[1],
            s.es,
            s.ds,
            s.rank,
            u8::from(s.covered[0]),
            u8::from(s.covered[1]),
        );
    }
    out
}

pub fn predictions_from_csv(text: &str, path: &Path) -> Result<Vec<PredictionRow>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Load {
        line: 1,
        reason: format!("{}: empty predictions file", path.display()),
    })?;
    if header.trim_end() != PREDICTIONS_HEADER {
        return Err(Error::Load {
            line: 1,
            reason: format!("{}: unexpected predictions header", path.display()),
        });
    }
    let mut rows = Vec::new();
    for (idx, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 13 {
            return Err(Error::Load {
                line: idx + 2,
                reason: format!("{}: expected 13 fields, got {}", path.display(), f.len()),
            });
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| Error::Load {
                line: idx + 2,
                reason: format!("{}: bad number {s:?}", path.display()),
            })
        };
        rows.push(PredictionRow {
            station_id: f[0].to_string(),
            date: NaiveDate::parse_from_str(f[1], "%Y-%m-%d").map_err(|_| Error::Load {
                line: idx + 2,
                reason: format!("{}: bad date {:?}", path.display(), f[1]),
            })?,
            obs: [parse(f[2])?, parse(f[3])?],
            score: CaseScore {
                point_mean: [parse(f[4])?, parse(f[5])?],
                point_median: [parse(f[6])?, parse(f[7])?],
                es: parse(f[8])?,
                ds: parse(f[9])?,
                rank: parse(f[10])? as u32,
                covered: [parse(f[11])? != 0.0, parse(f[12])? != 0.0],
            },
        });
    }
    Ok(rows)
}

/// `report.json`: the verification table row for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub method: String,
    pub n_cases: u64,
    pub es: f64,
    pub delta: f64,
    pub ds: f64,
    pub ee_median: f64,
    pub ee_mean: f64,
    pub corr_median: f64,
    pub corr_mean: f64,
    pub coverage_wind: f64,
    pub coverage_temp: f64,
}

impl ReportFile {
    pub fn new(method: Method, report: &VerificationReport) -> Self {
        ReportFile {
            method: method.to_string(),
            n_cases: report.n_cases,
            es: report.mean_es,
            delta: report.delta,
            ds: report.mean_ds,
            ee_median: report.ee_median,
            ee_mean: report.ee_mean,
            corr_median: report.corr_median,
            corr_mean: report.corr_mean,
            coverage_wind: report.coverage_wind,
            coverage_temp: report.coverage_temp,
        }
    }
}
