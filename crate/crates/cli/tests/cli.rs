//! End-to-end checks of the command line workflows.

use bivar_calib::bma::{make_group_model, GroupKind};
use bivar_calib::copula::{estimate_latent_corr, fit_margin, Variable};
use bivar_calib::data::{load_dataset, rolling_windows};
use bivar_calib::em::EmConfig;
use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_bivar-calib"))
}

fn tmpdir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("bivar_cli_{name}_{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run_ok(cmd: &mut Command) {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn generate(dir: &Path, name: &str, days: u32, stations: u32, seed: u64) -> PathBuf {
    let path = dir.join(format!("{name}.csv"));
    run_ok(bin().args([
        "generate",
        "--out",
        path.to_str().unwrap(),
        "--stations",
        &stations.to_string(),
        "--days",
        &days.to_string(),
        "--members",
        "8",
        "--dispersion",
        "0.4",
        "--seed",
        &seed.to_string(),
    ]));
    path
}

#[test]
fn generate_is_deterministic_and_seed_sensitive() {
    let dir = tmpdir("gen");
    let a = generate(&dir, "a", 30, 3, 7);
    let b = generate(&dir, "b", 30, 3, 7);
    let c = generate(&dir, "c", 30, 3, 8);
    assert_eq!(
        std::fs::read(&a).unwrap(),
        std::fs::read(&b).unwrap(),
        "same seed must be byte-identical"
    );
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
    assert_eq!(
        std::fs::read(dir.join("a.manifest.json")).unwrap(),
        std::fs::read(dir.join("b.manifest.json")).unwrap()
    );
}

#[test]
fn generate_records_grouping_in_manifest() {
    let dir = tmpdir("gen_group");
    let path = dir.join("g.csv");
    run_ok(bin().args([
        "generate",
        "--out",
        path.to_str().unwrap(),
        "--stations",
        "2",
        "--days",
        "5",
        "--members",
        "11",
        "--grouping",
        "ah_three_group",
        "--seed",
        "1",
    ]));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("g.manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["grouping"], "ah_three_group");
    assert_eq!(manifest["m"], 11);
}

#[test]
fn calibrate_window_arithmetic_yields_five_dates() {
    // 45 days of data with 40-day training windows leave 5 target dates.
    let dir = tmpdir("win");
    let data = generate(&dir, "d", 45, 3, 2);
    let out = dir.join("run");
    run_ok(bin().args([
        "calibrate",
        "--dataset",
        data.to_str().unwrap(),
        "--method",
        "bma_pars",
        "--mc-samples",
        "500",
        "--seed",
        "3",
        "--output",
        out.to_str().unwrap(),
    ]));
    let n_files = std::fs::read_dir(out.join("predictions")).unwrap().count();
    assert_eq!(n_files, 5);
    assert_eq!(std::fs::read_dir(out.join("models")).unwrap().count(), 5);
}

#[test]
fn raw_method_passes_the_ensemble_through() {
    let dir = tmpdir("raw");
    let data = generate(&dir, "d", 42, 2, 4);
    let out = dir.join("run");
    run_ok(bin().args([
        "calibrate",
        "--dataset",
        data.to_str().unwrap(),
        "--method",
        "raw",
        "--mc-samples",
        "500",
        "--seed",
        "3",
        "--output",
        out.to_str().unwrap(),
    ]));
    // No models are fitted for the raw ensemble.
    assert_eq!(std::fs::read_dir(out.join("models")).unwrap().count(), 0);
    // The stored point mean is the ensemble mean of the dataset's members.
    let ds = load_dataset(&data).unwrap();
    let pred_file = std::fs::read_dir(out.join("predictions"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .min()
        .unwrap();
    let text = std::fs::read_to_string(&pred_file).unwrap();
    let row = text.lines().nth(1).unwrap();
    let fields: Vec<&str> = row.split(',').collect();
    let case = ds
        .cases
        .iter()
        .find(|c| c.station_id == fields[0] && c.date.to_string() == fields[1])
        .unwrap();
    let mean_w: f64 = case.members.iter().map(|m| m[0]).sum::<f64>() / 8.0;
    let got: f64 = fields[4].parse().unwrap();
    assert!((got - mean_w).abs() < 1e-12, "{got} vs {mean_w}");
}

#[test]
fn copula_latent_corr_matches_direct_estimate() {
    let dir = tmpdir("cop");
    let data = generate(&dir, "d", 80, 3, 5);
    let out = dir.join("run");
    run_ok(bin().args([
        "calibrate",
        "--dataset",
        data.to_str().unwrap(),
        "--method",
        "copula",
        "--mc-samples",
        "500",
        "--seed",
        "3",
        "--corr-start",
        "2020-02-10",
        "--corr-end",
        "2020-02-24",
        "--output",
        out.to_str().unwrap(),
    ]));
    // Recompute the latent correlation exactly as calibrate defines it:
    // margins fitted per correlation date, observations pushed through them.
    let ds = load_dataset(&data).unwrap();
    let spec = make_group_model(GroupKind::Uwme8);
    let folds = rolling_windows(&ds.cases, 40).unwrap();
    let cfg = EmConfig::default();
    let start = chrono::NaiveDate::from_ymd_opt(2020, 2, 10).unwrap();
    let end = chrono::NaiveDate::from_ymd_opt(2020, 2, 24).unwrap();
    let mut fitted = Vec::new();
    for fold in folds
        .iter()
        .filter(|f| f.target_date >= start && f.target_date <= end)
    {
        let wind = fit_margin(&fold.window, Variable::Wind, &spec, &cfg).unwrap();
        let temp = fit_margin(&fold.window, Variable::Temp, &spec, &cfg).unwrap();
        fitted.push((fold.eval_cases.clone(), wind, temp));
    }
    let history: Vec<_> = fitted
        .iter()
        .flat_map(|(cases, w, t)| cases.iter().map(move |c| (c, w, t)))
        .collect();
    let want = estimate_latent_corr(&history).unwrap();

    let model_file = std::fs::read_dir(out.join("models"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .min()
        .unwrap();
    let model: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&model_file).unwrap()).unwrap();
    let got = model["latent_corr"].as_f64().unwrap();
    assert_eq!(got, want, "serialized {got} vs direct {want}");
    assert_eq!(model["corr_window"]["start"], "2020-02-10");
    // Correlation dates are excluded from evaluation.
    let first_pred = std::fs::read_dir(out.join("predictions"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .min()
        .unwrap();
    assert_eq!(first_pred, "2020-02-25.csv");
}

#[test]
fn report_schema_is_stable() {
    let dir = tmpdir("schema");
    let data = generate(&dir, "d", 42, 2, 6);
    let out = dir.join("run");
    run_ok(bin().args([
        "calibrate",
        "--dataset",
        data.to_str().unwrap(),
        "--method",
        "raw",
        "--mc-samples",
        "500",
        "--seed",
        "3",
        "--output",
        out.to_str().unwrap(),
    ]));
    run_ok(bin().args([
        "verify",
        "--output",
        out.to_str().unwrap(),
        "--dataset",
        data.to_str().unwrap(),
    ]));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let mut keys: Vec<&str> = report
        .as_object()
        .unwrap()
        .keys()
        .map(|k| k.as_str())
        .collect();
    keys.sort_unstable();
    assert_eq!(
        keys,
        vec![
            "corr_mean",
            "corr_median",
            "coverage_temp",
            "coverage_wind",
            "delta",
            "ds",
            "ee_mean",
            "ee_median",
            "es",
            "method",
            "n_cases",
        ]
    );
    assert_eq!(report["method"], "raw");
    // Rank histogram CSV: header plus M+1 bins.
    let hist = std::fs::read_to_string(out.join("rankhist_raw.csv")).unwrap();
    let lines: Vec<&str> = hist.lines().collect();
    assert_eq!(lines[0], "rank,count");
    assert_eq!(lines.len(), 10);
}

#[test]
fn compare_renders_sorted_rows_and_csv() {
    let dir = tmpdir("cmp");
    let data = generate(&dir, "d", 42, 2, 8);
    let mut reports = Vec::new();
    for method in ["raw", "bma_pars"] {
        let out = dir.join(format!("run_{method}"));
        run_ok(bin().args([
            "calibrate",
            "--dataset",
            data.to_str().unwrap(),
            "--method",
            method,
            "--mc-samples",
            "500",
            "--seed",
            "3",
            "--output",
            out.to_str().unwrap(),
        ]));
        run_ok(bin().args([
            "verify",
            "--output",
            out.to_str().unwrap(),
            "--dataset",
            data.to_str().unwrap(),
        ]));
        reports.push(out.join("report.json"));
    }
    let csv_path = dir.join("table.csv");
    let out = bin()
        .args([
            "compare",
            reports[0].to_str().unwrap(),
            reports[1].to_str().unwrap(),
            "--csv",
            csv_path.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("method"));
    assert!(lines[1].starts_with("bma_pars"), "sorted rows: {lines:?}");
    assert!(lines[2].starts_with("raw"));
    let csv = std::fs::read_to_string(&csv_path).unwrap();
    assert!(csv.starts_with("method,es,delta,ds,"));

    // Single report renders a single row.
    let out = bin()
        .args(["compare", reports[0].to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 2);
}

#[test]
fn degenerate_dates_are_skipped_without_failing_the_run() {
    // Constant members make the member Gram singular, so the first windows
    // cannot be fitted; the run must skip them, keep going, and exit zero.
    use bivar_calib::data::{save_dataset, DatasetManifest, ForecastCase, Units};
    let dir = tmpdir("skip");
    let mut cases = Vec::new();
    let d0 = chrono::NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
    for day in 0..80i64 {
        let date = d0 + chrono::Duration::days(day);
        let members: Vec<[f64; 2]> = if day < 40 {
            vec![[2.0, 280.0]; 8]
        } else {
            (0..8)
                .map(|k| [2.0 + 0.3 * (day + k) as f64 % 3.0, 279.0 + (k as f64) * 0.8])
                .collect()
        };
        cases.push(ForecastCase {
            station_id: "s1".into(),
            date,
            members,
            obs: [2.0 + (day % 5) as f64 * 0.3, 280.0 + (day % 7) as f64 * 0.5],
        });
    }
    let manifest = DatasetManifest {
        ensemble_name: "degenerate".into(),
        m: 8,
        member_labels: (1..=8).map(|i| format!("m{i}")).collect(),
        grouping: bivar_calib::bma::GroupKind::Uwme8,
        variables: Units::default(),
    };
    let data = dir.join("d.csv");
    save_dataset(&data, &cases, &manifest).unwrap();

    let out = dir.join("run");
    let result = bin()
        .args([
            "calibrate",
            "--dataset",
            data.to_str().unwrap(),
            "--method",
            "bma_full",
            "--mc-samples",
            "500",
            "--seed",
            "3",
            "--output",
            out.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(
        result.status.success(),
        "run should survive degenerate dates: {}",
        String::from_utf8_lossy(&result.stderr)
    );
    assert!(String::from_utf8_lossy(&result.stderr).contains("skipping"));
    let run: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    let skipped = run["skipped_dates"].as_array().unwrap();
    assert!(!skipped.is_empty());
    // Later windows have enough variation to fit.
    assert!(std::fs::read_dir(out.join("predictions")).unwrap().count() > 0);
}

#[test]
fn hard_errors_exit_nonzero() {
    // Missing dataset.
    let out = bin()
        .args([
            "calibrate",
            "--dataset",
            "/nonexistent/data.csv",
            "--method",
            "raw",
            "--output",
            "/tmp/nowhere",
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());

    // Copula without a correlation period.
    let dir = tmpdir("err");
    let data = generate(&dir, "d", 42, 2, 9);
    let out = bin()
        .args([
            "calibrate",
            "--dataset",
            data.to_str().unwrap(),
            "--method",
            "copula",
            "--output",
            dir.join("run").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());

    // Verifying against a different dataset: observation mismatch.
    let run = dir.join("run_ok");
    run_ok(bin().args([
        "calibrate",
        "--dataset",
        data.to_str().unwrap(),
        "--method",
        "raw",
        "--mc-samples",
        "500",
        "--seed",
        "3",
        "--output",
        run.to_str().unwrap(),
    ]));
    let other = generate(&dir, "other", 42, 2, 10);
    let out = bin()
        .args([
            "verify",
            "--output",
            run.to_str().unwrap(),
            "--dataset",
            other.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("mismatch"));
}
