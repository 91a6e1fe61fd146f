use std::path::{Path, PathBuf};

use serde_json::json;

use super::backtest::EvalReport;
use super::ForecastResult;
use crate::dataio::FeatureTable;
use crate::error::{Error, Result};

/// Column label of a quantile level: `q05`, `q50`, `q95`, `q2.5`.
pub fn level_label(tau: f64) -> String {
    let pct = tau * 100.0;
    if (pct - pct.round()).abs() < 1e-9 {
        format!("q{:02}", pct.round() as u32)
    } else {
        format!("q{}", (pct * 1e6).round() / 1e6)
    }
}

fn num(v: f64) -> String {
    format!("{v:.6}")
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    })
}

fn finish(mut w: csv::Writer<std::fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

fn stem(report: &EvalReport) -> String {
    format!("{}_{}", report.architecture, report.method)
}

/// Writes a forecast as `date, zone, actual, <levels>` rows; `actual` is left
/// empty where `actuals` has no value for the date.
pub fn write_forecast_csv(result: &ForecastResult, actuals: Option<&FeatureTable>, path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["date".to_string(), "zone".into(), "actual".into()];
    header.extend(result.quantile_levels.iter().map(|t| level_label(*t)));
    w.write_record(&header)?;
    for (z, zone) in result.zones.iter().enumerate() {
        for (step, date) in result.dates.iter().enumerate() {
            let actual = actuals
                .and_then(|t| {
                    let zi = t.zones.iter().position(|n| n == zone)?;
                    Some(t.demand[[t.index_of(*date)?, zi]])
                })
                .map(num)
                .unwrap_or_default();
            let mut row = vec![date.to_string(), zone.clone(), actual];
            row.extend(result.values.slice(ndarray::s![step, z, ..]).iter().map(|v| num(*v)));
            w.write_record(&row)?;
        }
    }
    finish(w, path)
}

fn write_pairs(report: &EvalReport, path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    let labels: Vec<String> = report.quantile_levels.iter().map(|t| level_label(*t)).collect();
    let mut header = vec!["origin".to_string(), "date".into(), "horizon".into(), "zone".into(), "actual".into()];
    header.extend(labels.iter().cloned());
    header.extend(labels.iter().map(|l| format!("raw_{l}")));
    w.write_record(&header)?;
    for p in &report.pairs {
        let mut row = vec![
            p.origin.to_string(),
            p.date.to_string(),
            p.horizon.to_string(),
            report.zones[p.zone].clone(),
            num(p.actual),
        ];
        row.extend(p.quantiles.iter().chain(&p.raw).map(|v| num(*v)));
        w.write_record(&row)?;
    }
    finish(w, path)
}

/// Writes the report files for one or more models into `dir`:
///
/// * `mape_cells.csv`: method, model, zone, horizon, count, mape
/// * `horizon_curve.csv`: method, model, horizon, mape (mean over zones)
/// * `table1.csv`: one row per model and method with the aggregate MAPE,
///   pinball loss per level and interval coverage
/// * `summary.json`: the same summary as JSON
/// * `fan_chart_<model>_<method>.csv`: first-origin forecast with actuals
/// * `pairs_<model>_<method>.csv`: every scored cell, repaired and raw
///
/// Returns the written paths. Output depends only on the reports.
pub fn emit_report(reports: &[EvalReport], test: &FeatureTable, dir: &Path) -> Result<Vec<PathBuf>> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Data("no reports to write".into()))?;
    if reports.iter().any(|r| r.quantile_levels != first.quantile_levels) {
        return Err(Error::Config("reports with different quantile levels cannot share one table".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let labels: Vec<String> = first.quantile_levels.iter().map(|t| level_label(*t)).collect();

    let path = dir.join("mape_cells.csv");
    let mut w = writer(&path)?;
    w.write_record(["method", "model", "zone", "horizon", "count", "mape"])?;
    for r in reports {
        for c in &r.cells {
            w.write_record([
                r.method.label(),
                r.architecture.label(),
                &c.zone,
                &c.horizon.to_string(),
                &c.count.to_string(),
                &num(c.mape),
            ])?;
        }
    }
    finish(w, &path)?;
    written.push(path);

    let path = dir.join("horizon_curve.csv");
    let mut w = writer(&path)?;
    w.write_record(["method", "model", "horizon", "mape"])?;
    for r in reports {
        for (h, v) in r.horizon_curve() {
            w.write_record([r.method.label(), r.architecture.label(), &h.to_string(), &num(v)])?;
        }
    }
    finish(w, &path)?;
    written.push(path);

    let path = dir.join("table1.csv");
    let mut w = writer(&path)?;
    let mut header = vec!["model".to_string(), "method".into(), "aggregate_mape".into(), "max_horizon".into(), "origins".into()];
    header.extend(labels.iter().map(|l| format!("pinball_{l}")));
    header.push("coverage".into());
    w.write_record(&header)?;
    for r in reports {
        let mut row = vec![
            r.architecture.label().to_string(),
            r.method.label().to_string(),
            num(r.aggregate_mape),
            r.max_horizon.to_string(),
            r.origins.to_string(),
        ];
        row.extend(r.pinball.iter().map(|v| num(*v)));
        row.push(r.coverage.map(num).unwrap_or_default());
        w.write_record(&row)?;
    }
    finish(w, &path)?;
    written.push(path);

    let summary: Vec<_> = reports
        .iter()
        .map(|r| {
            json!({
                "model": r.architecture.label(),
                "method": r.method.label(),
                "aggregate_mape": r.aggregate_mape,
                "max_horizon": r.max_horizon,
                "origins": r.origins,
                "zones": r.zones,
                "quantile_levels": r.quantile_levels,
                "pinball": r.pinball,
                "coverage": r.coverage,
                "interval": r.interval(),
            })
        })
        .collect();
    let path = dir.join("summary.json");
    let text = serde_json::to_string_pretty(&summary)? + "\n";
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    written.push(path);

    for r in reports {
        let path = dir.join(format!("fan_chart_{}.csv", stem(r)));
        write_forecast_csv(&r.fan_chart, Some(test), &path)?;
        written.push(path);
        let path = dir.join(format!("pairs_{}.csv", stem(r)));
        write_pairs(r, &path)?;
        written.push(path);
    }
    Ok(written)
}
