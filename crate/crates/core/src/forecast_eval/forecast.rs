use chrono::{Duration, NaiveDate};
use ndarray::{s, Array3, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ForecastResult;
use crate::dataio::FeatureTable;
use crate::error::{Error, Result};
use crate::models::{Checkpoint, Regressor, SequenceModel};
use crate::training::Method;
use crate::windowing::{apply_mask, NormalizedPanel, SequenceBatch};

/// Origins forwarded together; bounds activation memory.
const CHUNK: usize = 256;

/// A forecast of `horizon` days starting on `origin`; the table passed with
/// it supplies the history and the future predictors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForecastRequest {
    /// First forecast day.
    pub origin: NaiveDate,
    /// Number of forecast days `l_f`.
    pub horizon: usize,
    /// Seeds the random fill of masked steps.
    pub seed: u64,
}

/// Days of observed history a method needs before the origin.
pub fn required_history(checkpoint: &Checkpoint, horizon: usize) -> usize {
    let w = &checkpoint.window;
    match checkpoint.method {
        Method::Mmmpf => w.len() - horizon.min(w.horizon),
        Method::Rsf | Method::Dmf => w.history,
        Method::Sbf => 0,
    }
}

/// Row index of the request origin, after checking history and future coverage.
pub fn resolve_origin(checkpoint: &Checkpoint, table: &FeatureTable, request: &ForecastRequest) -> Result<usize> {
    check_horizon(checkpoint, request.horizon)?;
    let first = *table
        .dates
        .first()
        .ok_or_else(|| Error::Data("forecast table is empty".into()))?;
    let offset = (request.origin - first).num_days();
    let need = required_history(checkpoint, request.horizon) as i64;
    if offset < need {
        return Err(Error::Data(format!(
            "origin {} needs {need} days of history, table starting {first} provides {}",
            request.origin,
            offset.max(0)
        )));
    }
    let n = table.len() as i64;
    let end = offset + request.horizon as i64;
    if end > n {
        let missing: Vec<String> = (offset.max(n)..end)
            .map(|i| (first + Duration::days(i)).to_string())
            .collect();
        return Err(Error::Data(format!(
            "future predictors missing for {} day(s): {}",
            missing.len(),
            missing.join(", ")
        )));
    }
    Ok(offset as usize)
}

fn check_horizon(checkpoint: &Checkpoint, horizon: usize) -> Result<()> {
    let max = checkpoint.window.horizon;
    if horizon < 1 || horizon > max {
        return Err(Error::Config(format!("forecast length {horizon} outside 1..={max}")));
    }
    Ok(())
}

fn check_method(checkpoint: &Checkpoint, method: Method) -> Result<()> {
    if checkpoint.method != method {
        return Err(Error::Config(format!(
            "checkpoint {} was trained with {}, not {method}",
            checkpoint.tag(),
            checkpoint.method
        )));
    }
    Ok(())
}

fn sequence(checkpoint: &Checkpoint) -> Result<&SequenceModel> {
    match &checkpoint.regressor {
        Regressor::Sequence(m) => Ok(m),
        Regressor::Linear(_) => Err(Error::Config(format!(
            "{} needs a neural model, checkpoint holds {}",
            checkpoint.method,
            checkpoint.architecture()
        ))),
    }
}

fn median_index(levels: &[f64]) -> Result<usize> {
    levels
        .iter()
        .position(|t| (t - 0.5).abs() < 1e-12)
        .ok_or_else(|| Error::Config("the 0.5 quantile level is required".into()))
}

/// Forecasts for several origins sharing one length, in the method's own way.
pub fn forecast_origins(
    checkpoint: &Checkpoint,
    table: &FeatureTable,
    origins: &[usize],
    horizon: usize,
    seed: u64,
) -> Result<Vec<ForecastResult>> {
    check_horizon(checkpoint, horizon)?;
    if table.zones != checkpoint.zones {
        return Err(Error::Data(format!(
            "table zones {:?} differ from checkpoint zones {:?}",
            table.zones, checkpoint.zones
        )));
    }
    let need = required_history(checkpoint, horizon);
    for &o in origins {
        let request = ForecastRequest {
            origin: table.dates.first().copied().unwrap_or_default() + Duration::days(o as i64),
            horizon,
            seed,
        };
        if o < need || o + horizon > table.len() {
            resolve_origin(checkpoint, table, &request)?;
        }
    }
    let panel = NormalizedPanel::new(table, &checkpoint.stats)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(origins.len());
    for chunk in origins.chunks(CHUNK) {
        let pred = match checkpoint.method {
            Method::Mmmpf => mmmpf_block(checkpoint, &panel, chunk, horizon, &mut rng)?,
            Method::Rsf => rsf_block(checkpoint, &panel, chunk, horizon)?,
            Method::Dmf => dmf_block(checkpoint, &panel, chunk, horizon)?,
            Method::Sbf => sbf_block(checkpoint, &panel, chunk, horizon)?,
        };
        out.extend(package(checkpoint, &panel, chunk, pred)?);
    }
    Ok(out)
}

fn single(checkpoint: &Checkpoint, table: &FeatureTable, request: &ForecastRequest, method: Method) -> Result<ForecastResult> {
    check_method(checkpoint, method)?;
    let o = resolve_origin(checkpoint, table, request)?;
    let mut v = forecast_origins(checkpoint, table, &[o], request.horizon, request.seed)?;
    Ok(v.remove(0))
}

/// Masks the last `l_f` target steps of a full-length window ending on the
/// last forecast day and reads the predictions there.
pub fn forecast_mmmpf(checkpoint: &Checkpoint, table: &FeatureTable, request: &ForecastRequest) -> Result<ForecastResult> {
    single(checkpoint, table, request, Method::Mmmpf)
}

/// One-step model rolled forward on its own median predictions.
pub fn forecast_rsf(checkpoint: &Checkpoint, table: &FeatureTable, request: &ForecastRequest) -> Result<ForecastResult> {
    single(checkpoint, table, request, Method::Rsf)
}

/// First `l_f` outputs of the direct model; future predictors are not read.
pub fn forecast_dmf(checkpoint: &Checkpoint, table: &FeatureTable, request: &ForecastRequest) -> Result<ForecastResult> {
    single(checkpoint, table, request, Method::Dmf)
}

/// The per-day regressor applied to each forecast day's predictors.
pub fn forecast_sbf(checkpoint: &Checkpoint, table: &FeatureTable, request: &ForecastRequest) -> Result<ForecastResult> {
    single(checkpoint, table, request, Method::Sbf)
}

/// Dispatches on the checkpoint's method.
pub fn forecast(checkpoint: &Checkpoint, table: &FeatureTable, request: &ForecastRequest) -> Result<ForecastResult> {
    single(checkpoint, table, request, checkpoint.method)
}

fn mmmpf_block(
    checkpoint: &Checkpoint,
    panel: &NormalizedPanel,
    origins: &[usize],
    horizon: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Array4<f32>> {
    let model = sequence(checkpoint)?;
    let len = checkpoint.window.len();
    let windows: Vec<_> = origins
        .iter()
        .map(|&o| panel.window(o + horizon - len, len, len - horizon))
        .collect();
    let refs: Vec<_> = windows.iter().collect();
    let masked = apply_mask(&refs, horizon, rng, &checkpoint.stats)?;
    let pred = model.forward(&masked.input)?;
    Ok(pred.slice(s![.., len - horizon.., .., ..]).to_owned())
}

fn dmf_block(checkpoint: &Checkpoint, panel: &NormalizedPanel, origins: &[usize], horizon: usize) -> Result<Array4<f32>> {
    let model = sequence(checkpoint)?;
    let t = checkpoint.window.history;
    let windows: Vec<_> = origins.iter().map(|&o| panel.window(o - t, t, t)).collect();
    let refs: Vec<_> = windows.iter().collect();
    let pred = model.forward(&SequenceBatch::from_windows(&refs, t)?)?;
    Ok(pred.slice(s![.., ..horizon, .., ..]).to_owned())
}

fn sbf_block(checkpoint: &Checkpoint, panel: &NormalizedPanel, origins: &[usize], horizon: usize) -> Result<Array4<f32>> {
    let b = origins.len();
    let m = panel.targets.ncols();
    let rows: Vec<usize> = origins.iter().flat_map(|&o| o..o + horizon).collect();
    let calendar: Vec<[usize; 3]> = rows.iter().map(|&r| panel.calendar[r]).collect();
    let predictors = panel.predictors.select(Axis(0), &rows);
    let q = checkpoint.quantile_levels().len();
    let flat: Array3<f32> = match &checkpoint.regressor {
        Regressor::Linear(lm) => lm.predict(&calendar, predictors.view())?.mapv(|v| v as f32),
        Regressor::Sequence(model) => {
            let n = rows.len();
            let batch = SequenceBatch {
                calendar,
                predictors: predictors.insert_axis(Axis(1)),
                targets: Array3::zeros((n, 1, m)),
                mask: vec![true],
            };
            model.forward(&batch)?.index_axis_move(Axis(1), 0)
        }
    };
    flat.into_shape_with_order((b, horizon, m, q))
        .map_err(|e| Error::Layout(format!("per-day outputs: {e}")))
}

fn rsf_block(checkpoint: &Checkpoint, panel: &NormalizedPanel, origins: &[usize], horizon: usize) -> Result<Array4<f32>> {
    let model = sequence(checkpoint)?;
    let t = checkpoint.window.history;
    let median = median_index(&model.quantile_levels)?;
    let len = t + horizon;
    let windows: Vec<_> = origins.iter().map(|&o| panel.window(o - t, len, t)).collect();
    let refs: Vec<_> = windows.iter().collect();
    let full = SequenceBatch::from_windows(&refs, len)?;
    rollout(&full, t, horizon, median, |b| model.forward(b))
}

/// Recursive rollout over `full`, whose first `history` target steps are
/// observed. Each step feeds the last `history` days to `step`, takes the
/// output at the final position as the next day's forecast and writes its
/// median into the targets seen by later steps.
pub(crate) fn rollout<F>(full: &SequenceBatch, history: usize, horizon: usize, median: usize, mut step: F) -> Result<Array4<f32>>
where
    F: FnMut(&SequenceBatch) -> Result<Array4<f32>>,
{
    let b = full.batch_size();
    let len = full.len();
    if len != history + horizon {
        return Err(Error::Layout(format!("rollout needs {} steps, got {len}", history + horizon)));
    }
    let mut targets = full.targets.clone();
    let mut out: Option<Array4<f32>> = None;
    for h in 0..horizon {
        let calendar = (0..b)
            .flat_map(|i| full.calendar[i * len + h..i * len + h + history].iter().copied())
            .collect();
        let batch = SequenceBatch {
            calendar,
            predictors: full.predictors.slice(s![.., h..h + history, ..]).to_owned(),
            targets: targets.slice(s![.., h..h + history, ..]).to_owned(),
            mask: vec![false; history],
        };
        let pred = step(&batch)?;
        let last = pred.index_axis(Axis(1), history - 1);
        let (_, m, q) = last.dim();
        let out = out.get_or_insert_with(|| Array4::zeros((b, horizon, m, q)));
        out.index_axis_mut(Axis(1), h).assign(&last);
        targets
            .index_axis_mut(Axis(1), history + h)
            .assign(&last.index_axis(Axis(2), median));
    }
    out.ok_or_else(|| Error::Data("empty rollout".into()))
}

/// Denormalizes block predictions `(origins, l_f, zones, Q)` into results.
fn package(checkpoint: &Checkpoint, panel: &NormalizedPanel, origins: &[usize], pred: Array4<f32>) -> Result<Vec<ForecastResult>> {
    let (_, horizon, m, q) = pred.dim();
    let stats = &checkpoint.stats.targets;
    origins
        .iter()
        .enumerate()
        .map(|(i, &o)| {
            let raw = Array3::from_shape_fn((horizon, m, q), |(h, j, k)| {
                stats[j].denormalize(pred[[i, h, j, k]] as f64)
            });
            ForecastResult::from_raw(
                panel.dates[o],
                panel.dates[o..o + horizon].to_vec(),
                checkpoint.method,
                checkpoint.architecture(),
                checkpoint.zones.clone(),
                checkpoint.quantile_levels().to_vec(),
                raw,
            )
        })
        .collect()
}
