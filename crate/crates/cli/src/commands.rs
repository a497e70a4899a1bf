use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{Duration, NaiveDate};
use epitoken::checkpoint::{load_backbone_weights, load_model, save_model, WeightPaths};
use epitoken::epidata::{build_dataset, load_cases, load_mobility, simulate_sir, write_cases, write_mobility, DataSplit};
use epitoken::eval::{
    baseline_predict, emit_report, evaluate_predictions, run_ablation, AblationSetup, BaselineKind, MetricReport,
    REFERENCE_LABEL,
};
use epitoken::forecaster::{forecast, MobilitySummary};
use epitoken::trainer::train;
use epitoken::{Dataset, Model};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::CliError;

/// Output directory plus a plain-text log of what a command did.
pub struct Run {
    pub cfg: RunConfig,
    pub out: PathBuf,
    log: fs::File,
}

impl Run {
    pub fn start(cfg: RunConfig, command: &str) -> Result<Self, CliError> {
        let out = cfg.out_dir.clone().expect("out_dir resolved before start");
        fs::create_dir_all(&out).map_err(CliError::io(&out))?;
        let echo = out.join(format!("{command}.config.toml"));
        fs::write(&echo, cfg.to_toml()).map_err(CliError::io(&echo))?;
        let log_path = out.join("log.txt");
        let log = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(CliError::io(&log_path))?;
        let mut run = Self { cfg, out, log };
        run.note(&format!("{command}: output in {}", run.out.display()));
        Ok(run)
    }

    pub fn note(&mut self, line: &str) {
        eprintln!("{line}");
        let _ = writeln!(self.log, "{line}");
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn checkpoint(&self) -> WeightPaths {
        WeightPaths::from_stem(self.cfg.checkpoint.clone().unwrap_or_else(|| self.path("model")))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let body = serde_json::to_string_pretty(value).map_err(|e| CliError::Core(e.into()))?;
    fs::write(path, body).map_err(CliError::io(path))
}

/// Dataset from the configured files or the synthetic generator, scaled on the training days.
pub fn load_data(cfg: &RunConfig) -> Result<(Dataset, DataSplit), CliError> {
    let (cases, mobility) = match (&cfg.cases_path, &cfg.mobility_path) {
        (Some(c), Some(m)) => (load_cases(c)?, load_mobility(m)?),
        _ => {
            let sim = simulate_sir(cfg.synth_regions, cfg.synth_days, cfg.sir_params(), cfg.seed)?;
            (sim.cases, sim.mobility)
        }
    };
    let mut options = cfg.dataset_options();
    let probe: Dataset = build_dataset(&cases, &mobility, options)?;
    let split = cfg.split_spec().split(probe.n_days())?;
    options.scale_days = Some(split.train.end);
    let ds = build_dataset(&cases, &mobility, options)?;
    Ok((ds, split))
}

fn build_model(run: &mut Run, regions: usize) -> Result<Model, CliError> {
    let mut model = Model::new(run.cfg.model_config_for(regions, run.cfg.variant))?;
    if let Some(stem) = run.cfg.backbone_weights.clone() {
        let n = load_backbone_weights(&mut model, &WeightPaths::from_stem(&stem))?;
        run.note(&format!("loaded {n} backbone tensors from {}", stem.display()));
    }
    Ok(model)
}

pub fn synth(run: &mut Run) -> Result<(), CliError> {
    let cfg = &run.cfg;
    let sim = simulate_sir(cfg.synth_regions, cfg.synth_days, cfg.sir_params(), cfg.seed)?;
    let cases = run.path("cases.csv");
    let mobility = run.path("mobility.csv");
    write_cases(&sim.cases, &cases)?;
    write_mobility(&sim.mobility, &mobility)?;
    run.note(&format!(
        "wrote {} days x {} regions to {} and {}",
        sim.cases.n_days(),
        sim.cases.n_regions(),
        cases.display(),
        mobility.display()
    ));
    Ok(())
}

pub fn train_cmd(run: &mut Run) -> Result<(), CliError> {
    let (ds, split) = load_data(&run.cfg)?;
    run.note(&format!(
        "days {}: train {:?}, val {:?}, test {:?}",
        ds.n_days(),
        split.train,
        split.val,
        split.test
    ));
    let mut model = build_model(run, ds.n_regions())?;
    let report = train(&mut model, &ds, &split, &run.cfg.train_config())?;
    run.note(&format!(
        "stopped after epoch {}, best epoch {} with val loss {:.6}",
        report.stopped_epoch, report.best_epoch, report.best_val
    ));
    run.note(&format!(
        "parameters: {} trainable of {} ({:.4})",
        report.params.trainable, report.params.total, report.params.ratio
    ));
    let ckpt = run.checkpoint();
    save_model(&model, &ckpt)?;
    write_json(&run.path("train_report.json"), &report)?;
    write_json(&run.path("prompts.json"), &report.prompts)?;
    run.note(&format!("checkpoint {}", ckpt.blob.display()));
    Ok(())
}

#[derive(Serialize)]
struct ForecastJson<'a> {
    start_date: NaiveDate,
    context_days: usize,
    window: usize,
    steps: usize,
    regions: &'a [String],
    mobility: Vec<MobilitySummary>,
}

pub fn forecast_cmd(run: &mut Run, context_end: Option<usize>) -> Result<(), CliError> {
    let (ds, split) = load_data(&run.cfg)?;
    let model: Model = load_model(&run.checkpoint())?;
    let start = context_end.unwrap_or(split.test.start);
    let result = forecast(&model, &ds, start, run.cfg.steps())?;
    let first = ds.dates[0];
    let csv_path = run.path("forecast.csv");
    let mut body = String::from("region_id,date,predicted_cases\n");
    for (i, region) in ds.regions.iter().enumerate() {
        for (k, value) in result.region(i).iter().enumerate() {
            let date = first + Duration::days((start + k) as i64);
            body.push_str(&format!("{region},{},{value}\n", date.format("%Y-%m-%d")));
        }
    }
    fs::write(&csv_path, body).map_err(CliError::io(&csv_path))?;
    let meta = ForecastJson {
        start_date: first + Duration::days(start as i64),
        context_days: start,
        window: result.window,
        steps: result.steps,
        regions: &ds.regions,
        mobility: result.mobility_summaries(),
    };
    write_json(&run.path("forecast.json"), &meta)?;
    run.note(&format!(
        "{} days x {} regions from {} written to {}",
        result.horizon(),
        ds.n_regions(),
        meta.start_date,
        csv_path.display()
    ));
    Ok(())
}

fn print_table(reports: &[MetricReport]) {
    println!("{:<12} {:>7} {:<16} {:>12} {:>12} {:>12} {:>12}", "dataset", "horizon", "model", "rmse", "mae", "ref_rmse", "ref_mae");
    for r in reports {
        let reference = epitoken::eval::reference(&r.dataset, r.horizon, &r.model);
        let cell = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.2}"));
        println!(
            "{:<12} {:>7} {:<16} {:>12.3} {:>12.3} {:>12} {:>12}",
            r.dataset,
            r.horizon,
            r.model,
            r.region_avg_rmse,
            r.region_avg_mae,
            cell(reference.as_ref().map(|x| x.rmse)),
            cell(reference.as_ref().map(|x| x.mae)),
        );
    }
    println!("ref_* columns: {REFERENCE_LABEL}");
}

pub fn evaluate(run: &mut Run) -> Result<(), CliError> {
    let (ds, split) = load_data(&run.cfg)?;
    let model: Model = load_model(&run.checkpoint())?;
    let start = split.test.start;
    let steps = run.cfg.steps();
    let h = steps * model.window();
    if start + h > ds.n_days() {
        return Err(epitoken::Error::InsufficientData(format!("test range holds fewer than {h} days")).into());
    }
    let truth = &ds.counts[start..start + h];
    let name = run.cfg.dataset_name.clone();
    let mut reports = Vec::new();
    for kind in BaselineKind::ALL {
        let pred = baseline_predict(kind, &ds, start, h)?;
        reports.push(evaluate_predictions(&name, kind.id(), model.window(), &ds.regions, truth, &pred)?);
    }
    let result = forecast(&model, &ds, start, steps)?;
    reports.push(evaluate_predictions(
        &name,
        run.cfg.variant.id(),
        model.window(),
        &ds.regions,
        truth,
        &result.cases,
    )?);
    let files = emit_report(&reports, &run.out)?;
    print_table(&reports);
    run.note(&format!("report written to {}", files.csv.display()));
    Ok(())
}

pub fn ablate(run: &mut Run) -> Result<(), CliError> {
    let (ds, split) = load_data(&run.cfg)?;
    let base = run.cfg.model_config_for(ds.n_regions(), epitoken::model::Variant::Full);
    let train_cfg = run.cfg.train_config();
    let name = run.cfg.dataset_name.clone();
    let setup = AblationSetup {
        dataset_name: &name,
        dataset: &ds,
        split: &split,
        model: &base,
        train: &train_cfg,
        steps: run.cfg.steps(),
    };
    let mut reports = Vec::new();
    let mut trainings = Vec::new();
    for variant in run.cfg.ablation_variants() {
        let (metrics, report) = run_ablation(variant, &setup)?;
        run.note(&format!(
            "{variant}: rmse {:.3}, mae {:.3}, best epoch {}",
            metrics.region_avg_rmse, metrics.region_avg_mae, report.best_epoch
        ));
        trainings.push((variant.id(), report));
        reports.push(metrics);
    }
    let files = emit_report(&reports, &run.out)?;
    write_json(&run.path("ablation_training.json"), &trainings)?;
    print_table(&reports);
    run.note(&format!("report written to {}", files.csv.display()));
    Ok(())
}

#[derive(Deserialize)]
struct StoredReport {
    reports: Vec<MetricReport>,
}

/// Merges the `report.json` files of earlier runs.
pub fn report(run: &mut Run, sources: &[PathBuf]) -> Result<(), CliError> {
    let mut reports = Vec::new();
    for src in sources {
        let path = if src.is_dir() { src.join("report.json") } else { src.clone() };
        let text = fs::read_to_string(&path).map_err(CliError::io(&path))?;
        let stored: StoredReport = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{} is not a report file: {e}", path.display())))?;
        reports.extend(stored.reports);
    }
    let files = emit_report(&reports, &run.out)?;
    print_table(&reports);
    run.note(&format!("merged {} rows into {}", reports.len(), files.csv.display()));
    Ok(())
}
