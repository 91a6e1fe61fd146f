use std::io::Write;
use std::path::{Path, PathBuf};

use maskcast::dataio::{downsample_daily_peak, generate_synthetic, ingest_hourly, FeatureTable};
use maskcast::forecast_eval::{backtest, emit_report, forecast, write_forecast_csv, EvalReport, ForecastRequest};
use maskcast::models::Checkpoint;
use maskcast::training::{fit, Method};
use maskcast::{Error, Result};

use crate::config::{DataSource, ExperimentConfig};
use crate::{Cli, Command};

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Ingest { files, dataset } => ingest(files, dataset.as_deref(), cli.out.as_deref()),
        command => {
            let config = load_config(cli)?;
            let name = match command {
                Command::Synth { .. } => "synth",
                Command::Train { .. } => "train",
                Command::Backtest { .. } => "backtest",
                Command::Forecast { .. } => "forecast",
                Command::Report { .. } => "report",
                Command::Ingest { .. } => unreachable!(),
            };
            let result = match command {
                Command::Synth { dataset } => synth(&config, dataset.as_deref()),
                Command::Train { method } => train(&config, method.unwrap_or(config.training.method)),
                Command::Backtest { checkpoints } => run_backtest(&config, checkpoints),
                Command::Forecast {
                    checkpoint,
                    origin,
                    horizon,
                } => run_forecast(&config, checkpoint.as_deref(), *origin, *horizon),
                Command::Report { evals } => report(&config, evals),
                Command::Ingest { .. } => unreachable!(),
            };
            record(&config, name, &result);
            result
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("--config is required for this command".into()))?;
    let mut config = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.output = out.clone();
    }
    Ok(config)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Appends a timestamped status line to the run's command log.
fn record(config: &ExperimentConfig, command: &str, result: &Result<()>) {
    let dir = config.log_dir();
    let status = match result {
        Ok(()) => "ok".to_string(),
        Err(e) => format!("error: {e}"),
    };
    let line = format!("{} {command} seed={} {status}\n", chrono::Utc::now().to_rfc3339(), config.seed);
    let written = create_dir(&dir).and_then(|_| {
        let path = dir.join("commands.log");
        std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .and_then(|mut f| f.write_all(line.as_bytes()))
            .map_err(|e| Error::io(&path, e))
    });
    if let Err(e) = written {
        log::warn!("could not write command log: {e}");
    }
}

fn write_table(table: &FeatureTable, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    table.write_csv(path)
}

fn ingest(files: &[PathBuf], dataset: Option<&Path>, out: Option<&Path>) -> Result<()> {
    if files.is_empty() {
        return Err(Error::Config("ingest needs at least one input file".into()));
    }
    let hourly = ingest_hourly(files)?;
    let table = downsample_daily_peak(&hourly)?;
    let path = dataset
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.unwrap_or(Path::new("runs")).join("dataset.csv"));
    write_table(&table, &path)?;
    println!(
        "ingested {} hourly rows into {} days x {} zones ({} to {})",
        hourly.len(),
        table.len(),
        table.n_zones(),
        table.dates[0],
        table.dates[table.len() - 1]
    );
    for (zone, rows) in hourly.rows_per_zone() {
        println!("  {zone}: {rows} hourly rows");
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn synth(config: &ExperimentConfig, dataset: Option<&Path>) -> Result<()> {
    let DataSource::Synthetic(spec) = &config.data else {
        return Err(Error::Config("synth needs a synthetic data source in the config".into()));
    };
    spec.validate_for_window(config.window.len())?;
    let table = generate_synthetic(spec)?;
    let path = dataset
        .map(Path::to_path_buf)
        .unwrap_or_else(|| config.run_dir().join("dataset.csv"));
    write_table(&table, &path)?;
    println!("wrote {} days x {} zones to {}", table.len(), table.n_zones(), path.display());
    Ok(())
}

fn checkpoint_path(config: &ExperimentConfig, method: Method) -> PathBuf {
    config
        .checkpoint_dir()
        .join(format!("{}-{method}.json", config.model_for(method).architecture))
}

fn train(config: &ExperimentConfig, method: Method) -> Result<()> {
    let table = config.load_table()?;
    let split = config.split(&table)?;
    let training = config.training.resolve(method, config.seed);
    let (checkpoint, report) = fit(config.model_for(method), &training, &config.window, &split.train, &split.validation)?;
    create_dir(&config.checkpoint_dir())?;
    create_dir(&config.log_dir())?;
    let path = checkpoint_path(config, method);
    checkpoint.save(&path)?;
    report.save_jsonl(&config.log_dir().join(format!("train-{}.jsonl", checkpoint.tag())))?;
    println!(
        "{}: best validation loss {:.6} at epoch {}; checkpoint {}",
        checkpoint.tag(),
        report.best_validation_loss,
        report.best_epoch,
        path.display()
    );
    Ok(())
}

fn load_checkpoint(config: &ExperimentConfig, path: &Path) -> Result<Checkpoint> {
    let checkpoint = Checkpoint::load(path)?;
    let expected = config.model_for(checkpoint.method).architecture;
    if checkpoint.architecture() != expected || checkpoint.window != config.window {
        return Err(Error::Config(format!(
            "checkpoint {} ({}, window {:?}) does not match the config: {expected}-{} with window {:?}",
            path.display(),
            checkpoint.tag(),
            checkpoint.window,
            checkpoint.method,
            config.window
        )));
    }
    Ok(checkpoint)
}

fn eval_path(config: &ExperimentConfig, report: &EvalReport) -> PathBuf {
    config
        .report_dir()
        .join(format!("eval_{}-{}.json", report.architecture, report.method))
}

fn run_backtest(config: &ExperimentConfig, checkpoints: &[PathBuf]) -> Result<()> {
    let paths = if checkpoints.is_empty() {
        vec![checkpoint_path(config, config.training.method)]
    } else {
        checkpoints.to_vec()
    };
    let loaded = paths
        .iter()
        .map(|p| load_checkpoint(config, p))
        .collect::<Result<Vec<_>>>()?;
    let table = config.load_table()?;
    let span = config.test_span(&table)?;
    create_dir(&config.report_dir())?;
    let mut reports = Vec::new();
    for checkpoint in &loaded {
        let report = backtest(checkpoint, &span.table, span.first_origin, config.seed)?;
        let path = eval_path(config, &report);
        let text = serde_json::to_string(&report)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        println!(
            "{}: aggregate MAPE {:.4} over {} origins",
            checkpoint.tag(),
            report.aggregate_mape,
            report.origins
        );
        reports.push(report);
    }
    emit_report(&reports, &span.table, &config.report_dir())?;
    println!("reports in {}", config.report_dir().display());
    Ok(())
}

fn report(config: &ExperimentConfig, evals: &[PathBuf]) -> Result<()> {
    let paths = if evals.is_empty() {
        let dir = config.report_dir();
        let mut found: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("eval_") && n.ends_with(".json"))
            })
            .collect();
        found.sort();
        found
    } else {
        evals.to_vec()
    };
    if paths.is_empty() {
        return Err(Error::Data(format!("no saved backtest results in {}", config.report_dir().display())));
    }
    let mut reports = paths
        .iter()
        .map(|p| {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Ok(serde_json::from_str::<EvalReport>(&text)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let order = |m: Method| Method::ALL.iter().position(|x| *x == m);
    reports.sort_by_key(|r| (order(r.method), r.architecture.name()));
    let table = config.load_table()?;
    let span = config.test_span(&table)?;
    emit_report(&reports, &span.table, &config.report_dir())?;
    for r in &reports {
        println!("{} {}: aggregate MAPE {:.4}", r.architecture.label(), r.method.label(), r.aggregate_mape);
    }
    Ok(())
}

fn run_forecast(
    config: &ExperimentConfig,
    checkpoint: Option<&Path>,
    origin: chrono::NaiveDate,
    horizon: usize,
) -> Result<()> {
    if horizon == 0 {
        return Err(Error::Config("--horizon must be at least 1".into()));
    }
    let path = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| checkpoint_path(config, config.training.method));
    let checkpoint = load_checkpoint(config, &path)?;
    let table = config.load_table()?;
    let request = ForecastRequest {
        origin,
        horizon,
        seed: config.seed,
    };
    let result = forecast(&checkpoint, &table, &request)?;
    create_dir(&config.report_dir())?;
    let out = config
        .report_dir()
        .join(format!("forecast_{}_{origin}_{horizon}.csv", checkpoint.tag()));
    write_forecast_csv(&result, Some(&table), &out)?;
    println!("{}: {horizon}-day forecast from {origin} written to {}", checkpoint.tag(), out.display());
    Ok(())
}
