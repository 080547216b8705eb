//! The four workflows behind the subcommands.

use crate::files::{
    predictions_to_csv, read_run_config, write_run_config, PredictionRow, ReportFile, RunConfig,
    SkippedDate,
};
use crate::Method;
use bivar_calib::bma::{
    make_group_model, BmaMode, BmaModelFile, ForecastVector, GroupKind, GroupSpec, WindowMeta,
};
use bivar_calib::copula::{
    estimate_latent_corr, fit_margin, CopulaModel, CopulaModelFile, CopulaPredictive, CorrWindow,
    UniBmaModel, Variable,
};
use bivar_calib::data::{load_dataset, rolling_windows, save_dataset, ForecastCase, RollingFold};
use bivar_calib::em::{fit, EmConfig};
use bivar_calib::synth::{generate as synth_generate, SynthConfig};
use bivar_calib::verify::{aggregate, score_ensemble_case, score_predictive_case, CaseScore};
use bivar_calib::{Error, Result, Vec2};
use chrono::NaiveDate;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

pub struct GenerateArgs {
    pub out: PathBuf,
    pub stations: usize,
    pub days: usize,
    pub members: usize,
    pub dispersion: f64,
    pub truth_corr: f64,
    pub bias: Vec2,
    pub grouping: String,
    pub start_date: NaiveDate,
    pub seed: u64,
}

pub fn generate(args: GenerateArgs) -> Result<()> {
    let grouping: GroupKind = args.grouping.parse()?;
    let cfg = SynthConfig {
        n_stations: args.stations,
        n_days: args.days,
        m: args.members,
        truth_corr: args.truth_corr,
        member_bias: args.bias,
        dispersion_factor: args.dispersion,
        grouping,
        seed: args.seed,
        start_date: args.start_date,
    };
    let cases = synth_generate(&cfg)?;
    save_dataset(&args.out, &cases, &cfg.manifest())?;
    println!(
        "wrote {} cases ({} stations x {} days, M={}) to {}",
        cases.len(),
        args.stations,
        args.days,
        args.members,
        args.out.display()
    );
    Ok(())
}

pub struct CalibrateArgs {
    pub dataset: PathBuf,
    pub method: Method,
    pub grouping: Option<String>,
    pub training_days: u32,
    pub mc_samples: usize,
    pub eval_start: Option<NaiveDate>,
    pub eval_end: Option<NaiveDate>,
    pub corr_start: Option<NaiveDate>,
    pub corr_end: Option<NaiveDate>,
    pub output: PathBuf,
    pub seed: u64,
}

fn worker_count() -> usize {
    if let Ok(v) = std::env::var("BIVAR_CALIB_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            return n.max(1);
        }
    }
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

// Index-order-preserving parallel map over a work queue.
fn parallel_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = worker_count().min(items.len()).max(1);
    let next = AtomicUsize::new(0);
    let results: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *results[i].lock().unwrap() = Some(r);
            });
        }
    });
    results
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("worker filled every slot"))
        .collect()
}

// One independent random stream per target date, so outputs do not depend
// on how dates are scheduled across workers.
fn date_rng(seed: u64, date: NaiveDate) -> ChaCha12Rng {
    use chrono::Datelike;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(date.num_days_from_ce() as u64);
    rng
}

// A fit failure on one date is recoverable; anything else aborts the run.
fn recoverable(err: &Error) -> bool {
    matches!(
        err,
        Error::DegenerateLikelihood { .. }
            | Error::RankDeficient(_)
            | Error::Divergence(_)
            | Error::InvalidDistribution(_)
    )
}

fn score_fold_cases(
    cases: &[ForecastCase],
    mut score: impl FnMut(&ForecastCase) -> Result<CaseScore>,
) -> Result<Vec<PredictionRow>> {
    cases
        .iter()
        .map(|c| {
            Ok(PredictionRow {
                station_id: c.station_id.clone(),
                date: c.date,
                obs: c.obs,
                score: score(c)?,
            })
        })
        .collect()
}

struct FoldOutput {
    rows: Vec<PredictionRow>,
    model_json: Option<String>,
}

#[allow(clippy::too_many_arguments)]
fn process_fold(
    method: Method,
    fold: &RollingFold,
    spec: &GroupSpec,
    m: usize,
    mc_samples: usize,
    seed: u64,
    latent_corr: Option<(f64, CorrWindow)>,
    ensemble: &str,
) -> Result<FoldOutput> {
    let mut rng = date_rng(seed, fold.target_date);
    let em_cfg = EmConfig::default();
    let (start, end) = fold.window.date_span();
    match method {
        Method::Raw => {
            let rows = score_fold_cases(&fold.eval_cases, |c| {
                score_ensemble_case(&c.members, c.obs, &mut rng)
            })?;
            Ok(FoldOutput {
                rows,
                model_json: None,
            })
        }
        Method::BmaFull | Method::BmaPars => {
            let mode = if method == Method::BmaFull {
                BmaMode::Full
            } else {
                BmaMode::Parsimonious
            };
            let (model, _diag) = fit(&fold.window, spec, mode, &em_cfg, None)?;
            let file = BmaModelFile::from_model(
                &model,
                WindowMeta {
                    start_date: start,
                    end_date: end,
                },
                ensemble,
            );
            let rows = score_fold_cases(&fold.eval_cases, |c| {
                let f = ForecastVector::new(c.members.clone())?;
                let pred = model.predictive(&f)?;
                score_predictive_case(&pred, c.obs, mc_samples, m, &mut rng)
            })?;
            Ok(FoldOutput {
                rows,
                model_json: Some(serde_json::to_string_pretty(&file)? + "\n"),
            })
        }
        Method::Copula => {
            let (rho, corr_window) = latent_corr
                .ok_or_else(|| Error::InvalidConfig("missing latent correlation".into()))?;
            let wind = fit_margin(&fold.window, Variable::Wind, spec, &em_cfg)?;
            let temp = fit_margin(&fold.window, Variable::Temp, spec, &em_cfg)?;
            let model = CopulaModel::new(wind, temp, rho)?;
            let file = CopulaModelFile {
                wind_margin: model.wind_margin.clone(),
                temp_margin: model.temp_margin.clone(),
                latent_corr: model.latent_corr,
                corr_window,
            };
            let rows = score_fold_cases(&fold.eval_cases, |c| {
                let pred = CopulaPredictive {
                    model: &model,
                    members: &c.members,
                };
                score_predictive_case(&pred, c.obs, mc_samples, m, &mut rng)
            })?;
            Ok(FoldOutput {
                rows,
                model_json: Some(serde_json::to_string_pretty(&file)? + "\n"),
            })
        }
    }
}

// Latent correlation from the correlation period's folds: margins fitted per
// date, observations pushed through them, one global Pearson coefficient.
fn estimate_copula_corr(
    folds: &[&RollingFold],
    spec: &GroupSpec,
    window: CorrWindow,
) -> Result<(f64, CorrWindow)> {
    let em_cfg = EmConfig::default();
    let fitted: Vec<Result<(Vec<ForecastCase>, UniBmaModel, UniBmaModel)>> =
        parallel_map(folds, |fold| {
            let wind = fit_margin(&fold.window, Variable::Wind, spec, &em_cfg)?;
            let temp = fit_margin(&fold.window, Variable::Temp, spec, &em_cfg)?;
            Ok((fold.eval_cases.clone(), wind, temp))
        });
    let mut kept = Vec::new();
    for r in fitted {
        match r {
            Ok(entry) => kept.push(entry),
            Err(err) if recoverable(&err) => {
                eprintln!("skipping correlation date: {err}");
            }
            Err(err) => return Err(err),
        }
    }
    let history: Vec<(&ForecastCase, &UniBmaModel, &UniBmaModel)> = kept
        .iter()
        .flat_map(|(cases, w, t)| cases.iter().map(move |c| (c, w, t)))
        .collect();
    Ok((estimate_latent_corr(&history)?, window))
}

pub fn calibrate(args: CalibrateArgs) -> Result<()> {
    if args.mc_samples < 100 {
        return Err(Error::InvalidConfig(format!(
            "mc_samples must be at least 100, got {}",
            args.mc_samples
        )));
    }
    let dataset = load_dataset(&args.dataset)?;
    let grouping = match &args.grouping {
        Some(s) => s.parse::<GroupKind>()?,
        None => dataset.manifest.grouping,
    };
    if grouping.member_count() != dataset.manifest.m {
        return Err(Error::InvalidConfig(format!(
            "grouping {grouping} needs {} members, dataset has {}",
            grouping.member_count(),
            dataset.manifest.m
        )));
    }
    let spec = make_group_model(grouping);
    let corr_flags = (args.corr_start, args.corr_end);
    let corr_window = match (args.method, corr_flags) {
        (Method::Copula, (Some(start), Some(end))) => Some(CorrWindow { start, end }),
        (Method::Copula, _) => {
            return Err(Error::InvalidConfig(
                "copula needs --corr-start and --corr-end".into(),
            ))
        }
        (_, (None, None)) => None,
        _ => {
            return Err(Error::InvalidConfig(
                "--corr-start/--corr-end only apply to the copula method".into(),
            ))
        }
    };

    let folds = rolling_windows(&dataset.cases, args.training_days)?;
    let in_corr = |d: NaiveDate| {
        corr_window
            .as_ref()
            .is_some_and(|w| d >= w.start && d <= w.end)
    };
    let latent = match &corr_window {
        Some(w) => {
            let corr_folds: Vec<&RollingFold> =
                folds.iter().filter(|f| in_corr(f.target_date)).collect();
            Some(estimate_copula_corr(&corr_folds, &spec, w.clone())?)
        }
        None => None,
    };

    let eval_folds: Vec<&RollingFold> = folds
        .iter()
        .filter(|f| !in_corr(f.target_date))
        .filter(|f| args.eval_start.is_none_or(|d| f.target_date >= d))
        .filter(|f| args.eval_end.is_none_or(|d| f.target_date <= d))
        .collect();
    if eval_folds.is_empty() {
        return Err(Error::EmptyInput(
            "no evaluation dates after windowing and filters".into(),
        ));
    }

    let models_dir = args.output.join("models");
    let predictions_dir = args.output.join("predictions");
    std::fs::create_dir_all(&models_dir)?;
    std::fs::create_dir_all(&predictions_dir)?;

    let ensemble = dataset.manifest.ensemble_name.clone();
    let outcomes: Vec<Result<Option<SkippedDate>>> = parallel_map(&eval_folds, |fold| {
        let out = match process_fold(
            args.method,
            fold,
            &spec,
            dataset.manifest.m,
            args.mc_samples,
            args.seed,
            latent.clone(),
            &ensemble,
        ) {
            Ok(out) => out,
            Err(err) if recoverable(&err) => {
                return Ok(Some(SkippedDate {
                    date: fold.target_date,
                    reason: err.to_string(),
                }))
            }
            Err(err) => return Err(err),
        };
        let stamp = fold.target_date.format("%Y-%m-%d");
        if let Some(json) = out.model_json {
            std::fs::write(models_dir.join(format!("{stamp}.json")), json)?;
        }
        std::fs::write(
            predictions_dir.join(format!("{stamp}.csv")),
            predictions_to_csv(&out.rows),
        )?;
        Ok(None)
    });

    let mut skipped = Vec::new();
    for outcome in outcomes {
        if let Some(skip) = outcome? {
            eprintln!("skipping {}: {}", skip.date, skip.reason);
            skipped.push(skip);
        }
    }
    skipped.sort_by_key(|s| s.date);

    let run = RunConfig {
        method: args.method,
        grouping: grouping.to_string(),
        dataset: args.dataset.clone(),
        ensemble,
        m: dataset.manifest.m,
        training_days: args.training_days,
        mc_samples: args.mc_samples,
        seed: args.seed,
        corr_start: corr_window.as_ref().map(|w| w.start),
        corr_end: corr_window.as_ref().map(|w| w.end),
        eval_start: args.eval_start,
        eval_end: args.eval_end,
        skipped_dates: skipped,
    };
    write_run_config(&args.output, &run)?;
    println!(
        "calibrated {} dates ({} skipped) into {}",
        eval_folds.len() - run.skipped_dates.len(),
        run.skipped_dates.len(),
        args.output.display()
    );
    Ok(())
}

pub fn verify(output: &Path, dataset_path: &Path) -> Result<()> {
    let run = read_run_config(output)?;
    let dataset = load_dataset(dataset_path)?;
    let mut obs_by_key = std::collections::BTreeMap::new();
    for c in &dataset.cases {
        obs_by_key.insert((c.date, c.station_id.clone()), c.obs);
    }

    let predictions_dir = output.join("predictions");
    let mut files: Vec<PathBuf> = std::fs::read_dir(&predictions_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::EmptyInput(format!(
            "no prediction files under {}",
            predictions_dir.display()
        )));
    }

    let mut scored: Vec<(CaseScore, Vec2)> = Vec::new();
    for file in &files {
        let rows = crate::files::predictions_from_csv(&std::fs::read_to_string(file)?, file)?;
        for row in rows {
            let key = (row.date, row.station_id.clone());
            let Some(obs) = obs_by_key.get(&key) else {
                return Err(Error::InvalidConfig(format!(
                    "prediction for {} {} has no dataset case",
                    row.date, row.station_id
                )));
            };
            if *obs != row.obs {
                return Err(Error::InvalidConfig(format!(
                    "observation mismatch for {} {}: dataset {:?}, predictions {:?}",
                    row.date, row.station_id, obs, row.obs
                )));
            }
            scored.push((row.score, row.obs));
        }
    }

    let (report, hist) = aggregate(&scored, run.m)?;
    let file = ReportFile::new(run.method, &report);
    std::fs::write(
        output.join("report.json"),
        serde_json::to_string_pretty(&file)? + "\n",
    )?;
    std::fs::write(
        output.join(format!("rankhist_{}.csv", run.method)),
        hist.to_csv(),
    )?;
    println!(
        "{}: es {:.4}  delta {:.4}  ds {:.4}  ee_median {:.4}  ee_mean {:.4}  ({} cases)",
        run.method, file.es, file.delta, file.ds, file.ee_median, file.ee_mean, file.n_cases
    );
    Ok(())
}

const COMPARE_COLUMNS: [&str; 8] = [
    "es",
    "delta",
    "ds",
    "ee_median",
    "ee_mean",
    "corr_median",
    "corr_mean",
    "n_cases",
];

fn compare_value(r: &ReportFile, col: &str) -> String {
    match col {
        "es" => format!("{:.4}", r.es),
        "delta" => format!("{:.4}", r.delta),
        "ds" => format!("{:.4}", r.ds),
        "ee_median" => format!("{:.4}", r.ee_median),
        "ee_mean" => format!("{:.4}", r.ee_mean),
        "corr_median" => format!("{:.4}", r.corr_median),
        "corr_mean" => format!("{:.4}", r.corr_mean),
        "n_cases" => r.n_cases.to_string(),
        _ => unreachable!(),
    }
}

/// Render reports side by side, one row per method, sorted by method name.
pub fn render_comparison(reports: &[ReportFile]) -> (String, String) {
    let mut rows = reports.to_vec();
    rows.sort_by(|a, b| a.method.cmp(&b.method));
    let name_width = rows
        .iter()
        .map(|r| r.method.len())
        .chain(std::iter::once("method".len()))
        .max()
        .unwrap_or(6);
    let mut text = format!("{:<name_width$}", "method");
    for col in COMPARE_COLUMNS {
        text.push_str(&format!("  {col:>11}"));
    }
    text.push('\n');
    let mut csv = String::from("method,");
    csv.push_str(&COMPARE_COLUMNS.join(","));
    csv.push('\n');
    for r in &rows {
        text.push_str(&format!("{:<name_width$}", r.method));
        csv.push_str(&r.method);
        for col in COMPARE_COLUMNS {
            let v = compare_value(r, col);
            text.push_str(&format!("  {v:>11}"));
            csv.push(',');
            csv.push_str(&v);
        }
        text.push('\n');
        csv.push('\n');
    }
    (text, csv)
}

pub fn compare(reports: &[PathBuf], csv_out: Option<&Path>) -> Result<()> {
    if reports.is_empty() {
        return Err(Error::EmptyInput("no reports to compare".into()));
    }
    let mut parsed = Vec::with_capacity(reports.len());
    for path in reports {
        let r: ReportFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        parsed.push(r);
    }
    let (text, csv) = render_comparison(&parsed);
    print!("{text}");
    if let Some(path) = csv_out {
        std::fs::write(path, csv)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn comparison_rows_sorted_and_aligned() {
        let mk = |method: &str, es: f64| ReportFile {
            method: method.into(),
            n_cases: 10,
            es,
            delta: 0.1,
            ds: 1.0,
            ee_median: 2.0,
            ee_mean: 2.1,
            corr_median: 0.12,
            corr_mean: 0.13,
            coverage_wind: 0.7,
            coverage_temp: 0.7,
        };
        let (text, csv) = render_comparison(&[mk("raw", 2.5), mk("bma_full", 2.0)]);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("bma_full"));
        assert!(lines[2].starts_with("raw"));
        assert!(
            csv.starts_with("method,es,delta,ds,ee_median,ee_mean,corr_median,corr_mean,n_cases\n")
        );
        assert!(csv.contains("\nbma_full,2.0000,"));
    }

    #[test]
    fn comparison_renders_four_decimal_scores() {
        // A fixture row with a typical heavily-miscalibrated raw ensemble.
        let fixture = ReportFile {
            method: "raw".into(),
            n_cases: 24832,
            es: 2.566,
            delta: 0.557,
            ds: 0.7736,
            ee_median: 3.0916,
            ee_mean: 3.0765,
            corr_median: 0.0162,
            corr_mean: 0.0057,
            coverage_wind: 0.4544,
            coverage_temp: 0.3553,
        };
        let (text, _) = render_comparison(&[fixture]);
        let row = text.lines().nth(1).unwrap();
        for cell in [
            "2.5660", "0.5570", "0.7736", "3.0916", "3.0765", "0.0162", "0.0057",
        ] {
            assert!(row.contains(cell), "{cell} missing from {row}");
        }
    }
}
