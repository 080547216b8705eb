//! Dataset ingestion and rolling training windows.
//!
//! A dataset is a CSV of forecast cases, one row per (station, date), with a
//! JSON manifest sidecar describing the ensemble. Rows with missing or
//! unparseable fields are dropped and counted; physically impossible values
//! (negative wind) abort the load with the offending line number.

use crate::bma::GroupKind;
use crate::linalg::Vec2;
use crate::{Error, Result};
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// One (station, date) record: ensemble member vectors plus the observation.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastCase {
    pub station_id: String,
    pub date: NaiveDate,
    pub members: Vec<Vec2>,
    pub obs: Vec2,
}

/// Variable units recorded in the manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Units {
    pub wind: String,
    pub temp: String,
}

impl Default for Units {
    fn default() -> Self {
        Units {
            wind: "m/s".into(),
            temp: "K".into(),
        }
    }
}

/// Ensemble metadata stored as the dataset's JSON sidecar.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub ensemble_name: String,
    pub m: usize,
    pub member_labels: Vec<String>,
    pub grouping: GroupKind,
    pub variables: Units,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.member_labels.len() != self.m {
            return Err(Error::InvalidConfig(format!(
                "{} labels for {} members",
                self.member_labels.len(),
                self.m
            )));
        }
        let mut labels = self.member_labels.clone();
        labels.sort();
        labels.dedup();
        if labels.len() != self.m {
            return Err(Error::InvalidConfig("duplicate member labels".into()));
        }
        if self.grouping.member_count() != self.m {
            return Err(Error::InvalidConfig(format!(
                "grouping {} expects {} members, manifest says {}",
                self.grouping,
                self.grouping.member_count(),
                self.m
            )));
        }
        Ok(())
    }
}

/// A loaded dataset: retained cases, manifest, and the dropped-row count.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub cases: Vec<ForecastCase>,
    pub manifest: DatasetManifest,
    pub dropped_rows: usize,
}

/// Manifest sidecar path: `<dataset>.manifest.json` next to the CSV.
pub fn manifest_path(dataset: &Path) -> PathBuf {
    dataset.with_extension("manifest.json")
}

fn expected_header(m: usize) -> String {
    let mut h = String::from("station_id,date,obs_wind,obs_temp");
    for i in 1..=m {
        let _ = write!(h, ",m{i}_wind,m{i}_temp");
    }
    h
}

/// Load a dataset CSV and its manifest sidecar.
///
/// Incomplete rows (wrong field count, unparseable or non-finite numbers)
/// are dropped and counted. Negative wind values and malformed headers are
/// hard errors carrying the line number.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest =
        serde_json::from_str(&std::fs::read_to_string(manifest_path(path))?)?;
    manifest.validate()?;
    if manifest.variables.wind != "m/s" || manifest.variables.temp != "K" {
        return Err(Error::Load {
            line: 0,
            reason: format!(
                "unit mismatch: expected m/s and K, manifest has {} and {}",
                manifest.variables.wind, manifest.variables.temp
            ),
        });
    }
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Load {
        line: 1,
        reason: "missing header".into(),
    })?;
    if header.trim_end() != expected_header(manifest.m) {
        return Err(Error::Load {
            line: 1,
            reason: format!("header does not match the {}-member schema", manifest.m),
        });
    }

    let n_fields = 4 + 2 * manifest.m;
    let mut cases = Vec::new();
    let mut dropped = 0usize;
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != n_fields {
            dropped += 1;
            continue;
        }
        let station_id = fields[0].trim().to_string();
        let date = match NaiveDate::parse_from_str(fields[1].trim(), "%Y-%m-%d") {
            Ok(d) => d,
            Err(_) => {
                dropped += 1;
                continue;
            }
        };
        let mut nums = Vec::with_capacity(n_fields - 2);
        let mut ok = true;
        for f in &fields[2..] {
            match f.trim().parse::<f64>() {
                Ok(v) if v.is_finite() => nums.push(v),
                _ => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok || station_id.is_empty() {
            dropped += 1;
            continue;
        }
        let obs = [nums[0], nums[1]];
        if obs[0] < 0.0 {
            return Err(Error::Load {
                line: line_no,
                reason: format!("negative wind observation {}", obs[0]),
            });
        }
        let mut members = Vec::with_capacity(manifest.m);
        for k in 0..manifest.m {
            let w = nums[2 + 2 * k];
            if w < 0.0 {
                return Err(Error::Load {
                    line: line_no,
                    reason: format!("negative wind forecast {} in member {}", w, k + 1),
                });
            }
            members.push([w, nums[3 + 2 * k]]);
        }
        cases.push(ForecastCase {
            station_id,
            date,
            members,
            obs,
        });
    }
    cases.sort_by(|a, b| (a.date, &a.station_id).cmp(&(b.date, &b.station_id)));
    Ok(Dataset {
        cases,
        manifest,
        dropped_rows: dropped,
    })
}

/// Write a dataset CSV plus its manifest sidecar.
///
/// Floats use the shortest decimal form that parses back to the same bits,
/// so a write/load round trip reproduces every value exactly.
pub fn save_dataset(path: &Path, cases: &[ForecastCase], manifest: &DatasetManifest) -> Result<()> {
    manifest.validate()?;
    let mut out = expected_header(manifest.m);
    out.push('\n');
    for c in cases {
        if c.members.len() != manifest.m {
            return Err(Error::MemberMismatch {
                got: c.members.len(),
                expected: manifest.m,
            });
        }
        let _ = write!(
            out,
            "{},{},{},{}",
            c.station_id,
            c.date.format("%Y-%m-%d"),
            c.obs[0],
            c.obs[1]
        );
        for m in &c.members {
            let _ = write!(out, ",{},{}", m[0], m[1]);
        }
        out.push('\n');
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, out)?;
    std::fs::write(
        manifest_path(path),
        serde_json::to_string_pretty(manifest)? + "\n",
    )?;
    Ok(())
}

/// The training cases available for one target date.
#[derive(Debug, Clone)]
pub struct TrainingWindow {
    pub cases: Vec<ForecastCase>,
    pub n_days: u32,
    pub target_date: NaiveDate,
}

impl TrainingWindow {
    pub fn new(cases: Vec<ForecastCase>, n_days: u32, target_date: NaiveDate) -> Result<Self> {
        if cases.is_empty() {
            return Err(Error::EmptyInput("training window has no cases".into()));
        }
        let start = target_date - chrono::Duration::days(n_days as i64);
        for c in &cases {
            if c.date < start || c.date >= target_date {
                return Err(Error::InvalidConfig(format!(
                    "case dated {} outside window [{start}, {target_date})",
                    c.date
                )));
            }
        }
        Ok(TrainingWindow {
            cases,
            n_days,
            target_date,
        })
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    /// First and last calendar day covered by the window.
    pub fn date_span(&self) -> (NaiveDate, NaiveDate) {
        (
            self.target_date - chrono::Duration::days(self.n_days as i64),
            self.target_date - chrono::Duration::days(1),
        )
    }
}

/// One rolling step: the training window and that date's evaluation cases.
#[derive(Debug, Clone)]
pub struct RollingFold {
    pub target_date: NaiveDate,
    pub window: TrainingWindow,
    pub eval_cases: Vec<ForecastCase>,
}

/// Rolling calendar-day windows across all stations.
///
/// Targets start once `n_days` of history exist (measured from the first
/// date in the data); gaps shrink a window's case count but never stretch
/// its calendar span. Evaluation cases never join their own window.
pub fn rolling_windows(cases: &[ForecastCase], n_days: u32) -> Result<Vec<RollingFold>> {
    if n_days < 1 {
        return Err(Error::InvalidConfig(
            "window length must be positive".into(),
        ));
    }
    let mut by_date: BTreeMap<NaiveDate, Vec<&ForecastCase>> = BTreeMap::new();
    for c in cases {
        by_date.entry(c.date).or_default().push(c);
    }
    let Some(first_date) = by_date.keys().next().copied() else {
        return Ok(Vec::new());
    };
    let mut folds = Vec::new();
    for (&target, bucket) in &by_date {
        if (target - first_date).num_days() < n_days as i64 {
            continue;
        }
        let start = target - chrono::Duration::days(n_days as i64);
        let window_cases: Vec<ForecastCase> = by_date
            .range(start..target)
            .flat_map(|(_, cs)| cs.iter().map(|c| (*c).clone()))
            .collect();
        if window_cases.is_empty() {
            continue;
        }
        folds.push(RollingFold {
            target_date: target,
            window: TrainingWindow::new(window_cases, n_days, target)?,
            eval_cases: bucket.iter().map(|c| (*c).clone()).collect(),
        });
    }
    Ok(folds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn date(y: i32, m: u32, d: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(y, m, d).unwrap()
    }

    fn case(station: &str, d: NaiveDate, seed: f64) -> ForecastCase {
        ForecastCase {
            station_id: station.into(),
            date: d,
            members: (0..3)
                .map(|k| [1.0 + seed + k as f64 * 0.1, 280.0 - seed])
                .collect(),
            obs: [2.0 + seed, 279.0],
        }
    }

    fn manifest3() -> DatasetManifest {
        DatasetManifest {
            ensemble_name: "test".into(),
            m: 3,
            member_labels: vec!["a".into(), "b".into(), "c".into()],
            grouping: GroupKind::Uwme8,
            variables: Units::default(),
        }
    }

    #[test]
    fn manifest_grouping_must_match_member_count() {
        assert!(manifest3().validate().is_err());
        let mut ok = manifest3();
        ok.m = 8;
        ok.member_labels = (1..=8).map(|i| format!("m{i}")).collect();
        assert!(ok.validate().is_ok());
    }

    #[test]
    fn save_load_roundtrip_exact() {
        let dir = std::env::temp_dir().join("bivar_calib_data_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.csv");
        let mut manifest = manifest3();
        manifest.m = 8;
        manifest.member_labels = (1..=8).map(|i| format!("m{i}")).collect();
        // Awkward values: shortest-roundtrip formatting must preserve bits.
        let mut cases = Vec::new();
        for i in 0..100 {
            let d = date(2020, 1, 1) + chrono::Duration::days(i % 17);
            let x = 1.0 / (i as f64 + 3.0);
            cases.push(ForecastCase {
                station_id: format!("s{}", i % 10),
                date: d,
                members: (0..8)
                    .map(|k| [x * (k + 1) as f64, 273.15 + x * 7.0 - k as f64 / 3.0])
                    .collect(),
                obs: [x * 2.0, 280.0 + x],
            });
        }
        save_dataset(&path, &cases, &manifest).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(loaded.dropped_rows, 0);
        assert_eq!(loaded.cases.len(), cases.len());
        let mut sorted = cases.clone();
        sorted.sort_by(|a, b| (a.date, &a.station_id).cmp(&(b.date, &b.station_id)));
        assert_eq!(loaded.cases, sorted);
    }

    #[test]
    fn incomplete_rows_dropped_and_counted() {
        let dir = std::env::temp_dir().join("bivar_calib_data_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("dropped.csv");
        let manifest = DatasetManifest {
            ensemble_name: "t".into(),
            m: 8,
            member_labels: (1..=8).map(|i| format!("m{i}")).collect(),
            grouping: GroupKind::Uwme8,
            variables: Units::default(),
        };
        std::fs::write(
            manifest_path(&path),
            serde_json::to_string(&manifest).unwrap(),
        )
        .unwrap();
        let full = |s: &str| {
            let mut row = format!("{s},2020-01-01,2.0,280.0");
            for _ in 0..8 {
                row.push_str(",1.5,279.0");
            }
            row
        };
        let mut text = expected_header(8);
        text.push('\n');
        text.push_str(&full("s1"));
        text.push('\n');
        // Missing the last member pair.
        text.push_str("s2,2020-01-01,2.0,280.0");
        for _ in 0..7 {
            text.push_str(",1.5,279.0");
        }
        text.push('\n');
        text.push_str(&full("s3"));
        text.push('\n');
        // NaN member temperature.
        let mut bad = "s4,2020-01-01,2.0,280.0".to_string();
        for i in 0..8 {
            bad.push_str(if i == 5 { ",1.5,NaN" } else { ",1.5,279.0" });
        }
        text.push_str(&bad);
        text.push('\n');
        std::fs::write(&path, text).unwrap();
        let ds = load_dataset(&path).unwrap();
        assert_eq!(ds.cases.len(), 2);
        assert_eq!(ds.dropped_rows, 2);
    }

    #[test]
    fn empty_data_section_is_not_an_error() {
        let dir = std::env::temp_dir().join("bivar_calib_data_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("empty.csv");
        let manifest = DatasetManifest {
            ensemble_name: "t".into(),
            m: 8,
            member_labels: (1..=8).map(|i| format!("m{i}")).collect(),
            grouping: GroupKind::Uwme8,
            variables: Units::default(),
        };
        std::fs::write(
            manifest_path(&path),
            serde_json::to_string(&manifest).unwrap(),
        )
        .unwrap();
        std::fs::write(&path, expected_header(8) + "\n").unwrap();
        let ds = load_dataset(&path).unwrap();
        assert!(ds.cases.is_empty());
        assert_eq!(ds.dropped_rows, 0);
    }

    #[test]
    fn hard_errors_name_the_line() {
        let dir = std::env::temp_dir().join("bivar_calib_data_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("neg.csv");
        let manifest = DatasetManifest {
            ensemble_name: "t".into(),
            m: 8,
            member_labels: (1..=8).map(|i| format!("m{i}")).collect(),
            grouping: GroupKind::Uwme8,
            variables: Units::default(),
        };
        std::fs::write(
            manifest_path(&path),
            serde_json::to_string(&manifest).unwrap(),
        )
        .unwrap();
        let mut text = expected_header(8);
        text.push('\n');
        let mut row = String::from("s1,2020-01-01,-0.5,280.0");
        for _ in 0..8 {
            row.push_str(",1.5,279.0");
        }
        text.push_str(&row);
        text.push('\n');
        std::fs::write(&path, text).unwrap();
        match load_dataset(&path) {
            Err(Error::Load { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected load error, got {other:?}"),
        }

        // Malformed header.
        std::fs::write(&path, "station,oops\n").unwrap();
        assert!(matches!(
            load_dataset(&path),
            Err(Error::Load { line: 1, .. })
        ));
    }

    #[test]
    fn first_target_needs_full_history() {
        let d0 = date(2020, 3, 1);
        let cases: Vec<ForecastCase> = (0..50)
            .map(|i| case("s1", d0 + chrono::Duration::days(i), 0.0))
            .collect();
        let folds = rolling_windows(&cases, 40).unwrap();
        assert_eq!(folds.len(), 10);
        assert_eq!(folds[0].target_date, d0 + chrono::Duration::days(40));
        assert_eq!(folds[0].window.len(), 40);
        assert!(rolling_windows(&cases, 0).is_err());
    }

    #[test]
    fn gaps_shrink_windows_without_stretching() {
        let d0 = date(2020, 3, 1);
        let mut cases = Vec::new();
        for i in 0..30 {
            // days 10..20 missing
            if (10..20).contains(&i) {
                continue;
            }
            cases.push(case("s1", d0 + chrono::Duration::days(i), 0.0));
        }
        let folds = rolling_windows(&cases, 15).unwrap();
        // Target day 20 exists (>= day 15 of history); its 15-day window
        // covers days 5..19, of which only 5..9 have cases.
        let f = folds
            .iter()
            .find(|f| f.target_date == d0 + chrono::Duration::days(20))
            .unwrap();
        assert_eq!(f.window.len(), 5);
        let (start, end) = f.window.date_span();
        assert_eq!(start, d0 + chrono::Duration::days(5));
        assert_eq!(end, d0 + chrono::Duration::days(19));
    }

    #[test]
    fn windows_match_filter_oracle() {
        // 10 stations x 120 days; every window's composition equals a direct
        // filter of the full case list.
        let d0 = date(2019, 6, 1);
        let mut cases = Vec::new();
        for s in 0..10 {
            for i in 0..120 {
                if (s + i) % 13 == 0 {
                    continue; // sprinkle gaps
                }
                cases.push(case(
                    &format!("s{s:02}"),
                    d0 + chrono::Duration::days(i),
                    s as f64 * 0.1,
                ));
            }
        }
        let n_days = 40u32;
        let folds = rolling_windows(&cases, n_days).unwrap();
        assert!(!folds.is_empty());
        for f in &folds {
            assert!(f.window.len() <= 10 * 40);
            let start = f.target_date - chrono::Duration::days(n_days as i64);
            let expect: Vec<&ForecastCase> = cases
                .iter()
                .filter(|c| c.date >= start && c.date < f.target_date)
                .collect();
            assert_eq!(f.window.len(), expect.len());
            // No evaluation case inside its own window.
            assert!(f.window.cases.iter().all(|c| c.date != f.target_date));
        }
    }
}
