use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::forecast::forecast_origins;
use super::metrics::level_index;
use super::ForecastResult;
use crate::dataio::FeatureTable;
use crate::error::{Error, Result};
use crate::models::{Architecture, Checkpoint};
use crate::training::{mean_pinball_loss, Method};
use crate::windowing::WindowSpec;

/// Anything that produces multi-day forecasts for a batch of origins.
pub trait Forecaster {
    fn method(&self) -> Method;
    fn architecture(&self) -> Architecture;
    fn window(&self) -> WindowSpec;
    fn quantile_levels(&self) -> Vec<f64>;
    /// One result per origin row index, each `horizon` days long.
    fn forecast_origins(&self, table: &FeatureTable, origins: &[usize], horizon: usize, seed: u64)
        -> Result<Vec<ForecastResult>>;
}

impl Forecaster for Checkpoint {
    fn method(&self) -> Method {
        self.method
    }

    fn architecture(&self) -> Architecture {
        Checkpoint::architecture(self)
    }

    fn window(&self) -> WindowSpec {
        self.window
    }

    fn quantile_levels(&self) -> Vec<f64> {
        self.config.quantile_levels.clone()
    }

    fn forecast_origins(
        &self,
        table: &FeatureTable,
        origins: &[usize],
        horizon: usize,
        seed: u64,
    ) -> Result<Vec<ForecastResult>> {
        forecast_origins(self, table, origins, horizon, seed)
    }
}

/// One scored (forecast, actual) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub origin: NaiveDate,
    pub date: NaiveDate,
    /// 1-based steps ahead of the last observed day.
    pub horizon: usize,
    /// Index into [`EvalReport::zones`].
    pub zone: usize,
    pub actual: f64,
    /// Repaired quantiles, ordered as the report's levels.
    pub quantiles: Vec<f64>,
    pub raw: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapeCell {
    pub zone: String,
    pub horizon: usize,
    /// Origins contributing to the cell.
    pub count: usize,
    pub mape: f64,
}

/// Rolling-origin accuracy of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: Method,
    pub architecture: Architecture,
    pub zones: Vec<String>,
    pub quantile_levels: Vec<f64>,
    pub max_horizon: usize,
    pub origins: usize,
    /// Zone-major, horizons ascending; empty cells are omitted.
    pub cells: Vec<MapeCell>,
    /// Mean of `cells`.
    pub aggregate_mape: f64,
    /// Mean pinball loss in MW, one per level.
    pub pinball: Vec<f64>,
    /// Coverage of the outermost level pair.
    pub coverage: Option<f64>,
    pub pairs: Vec<PairRecord>,
    /// The forecast from the first origin.
    pub fan_chart: ForecastResult,
}

impl EvalReport {
    /// Mean MAPE over zones for each horizon.
    pub fn horizon_curve(&self) -> Vec<(usize, f64)> {
        (1..=self.max_horizon)
            .filter_map(|h| {
                let v: Vec<f64> = self.cells.iter().filter(|c| c.horizon == h).map(|c| c.mape).collect();
                (!v.is_empty()).then(|| (h, v.iter().sum::<f64>() / v.len() as f64))
            })
            .collect()
    }

    /// Mean of the cells with horizon at most `max_horizon`.
    pub fn aggregate_through(&self, max_horizon: usize) -> f64 {
        let v: Vec<f64> = self.cells.iter().filter(|c| c.horizon <= max_horizon).map(|c| c.mape).collect();
        v.iter().sum::<f64>() / v.len() as f64
    }

    /// `(lo, hi)` levels used for coverage.
    pub fn interval(&self) -> Option<(f64, f64)> {
        let lo = self.quantile_levels.first()?;
        let hi = self.quantile_levels.last()?;
        (lo < hi).then_some((*lo, *hi))
    }
}

/// Rolls the origin over rows `first_origin..` of `table` at stride 1. Each
/// origin gets one forecast of the full horizon, shortened where it would run
/// past the table end.
pub fn backtest<F: Forecaster + ?Sized>(model: &F, table: &FeatureTable, first_origin: usize, seed: u64) -> Result<EvalReport> {
    let window = model.window();
    let n = table.len();
    if n < window.history + 1 {
        return Err(Error::Data(format!(
            "test table of {n} days is shorter than history + 1 = {}",
            window.history + 1
        )));
    }
    if first_origin >= n {
        return Err(Error::Data(format!("first origin {first_origin} lies past the table end ({n} days)")));
    }
    let levels = model.quantile_levels();
    let median = level_index(&levels, 0.5)?;
    let k = window.horizon;
    let full: Vec<usize> = (first_origin..n).filter(|o| o + k <= n).collect();
    let mut results = Vec::with_capacity(n - first_origin);
    if !full.is_empty() {
        results.extend(model.forecast_origins(table, &full, k, seed)?);
    }
    for o in (first_origin..n).filter(|o| o + k > n) {
        results.extend(model.forecast_origins(table, &[o], n - o, seed)?);
    }

    let zones = table.zones.clone();
    let m = zones.len();
    let mut sums = vec![0.0f64; m * k];
    let mut counts = vec![0usize; m * k];
    let mut pairs = Vec::new();
    for r in &results {
        let o = table
            .index_of(r.origin)
            .ok_or_else(|| Error::Data(format!("origin {} not in the test table", r.origin)))?;
        for (h, date) in r.dates.iter().enumerate() {
            for z in 0..m {
                let actual = table.demand[[o + h, z]];
                if actual == 0.0 {
                    return Err(Error::Data(format!("MAPE undefined: zero demand in zone {} on {date}", zones[z])));
                }
                let quantiles = r.values.slice(ndarray::s![h, z, ..]).to_vec();
                sums[z * k + h] += ((quantiles[median] - actual) / actual).abs();
                counts[z * k + h] += 1;
                pairs.push(PairRecord {
                    origin: r.origin,
                    date: *date,
                    horizon: h + 1,
                    zone: z,
                    actual,
                    quantiles,
                    raw: r.raw.slice(ndarray::s![h, z, ..]).to_vec(),
                });
            }
        }
    }
    let mut cells = Vec::new();
    for (z, zone) in zones.iter().enumerate() {
        for h in 0..k {
            let c = counts[z * k + h];
            if c > 0 {
                cells.push(MapeCell {
                    zone: zone.clone(),
                    horizon: h + 1,
                    count: c,
                    mape: 100.0 * sums[z * k + h] / c as f64,
                });
            }
        }
    }
    let aggregate_mape = cells.iter().map(|c| c.mape).sum::<f64>() / cells.len() as f64;
    let actual: Vec<f64> = pairs.iter().map(|p| p.actual).collect();
    let pinball = levels
        .iter()
        .enumerate()
        .map(|(q, tau)| {
            let pred: Vec<f64> = pairs.iter().map(|p| p.quantiles[q]).collect();
            mean_pinball_loss(&actual, &pred, *tau)
        })
        .collect::<Result<Vec<_>>>()?;
    let coverage = (levels.len() >= 2 && levels[0] < levels[levels.len() - 1]).then(|| {
        let last = levels.len() - 1;
        let hits = pairs
            .iter()
            .filter(|p| p.quantiles[0] <= p.actual && p.actual <= p.quantiles[last])
            .count();
        hits as f64 / pairs.len() as f64
    });
    log::info!(
        "{}-{} backtest over {} origins: aggregate MAPE {aggregate_mape:.4}",
        model.architecture(),
        model.method(),
        results.len()
    );
    Ok(EvalReport {
        method: model.method(),
        architecture: model.architecture(),
        zones,
        quantile_levels: levels,
        max_horizon: k,
        origins: results.len(),
        cells,
        aggregate_mape,
        pinball,
        coverage,
        pairs,
        fan_chart: results.swap_remove(0),
    })
}
