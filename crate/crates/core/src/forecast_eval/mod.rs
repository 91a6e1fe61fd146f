//! Inference for the four formulations, accuracy metrics and report files.
//!
//! Every forecast comes back as a [`ForecastResult`] in MW: raw model
//! outputs are kept alongside a repaired copy whose quantiles are sorted per
//! cell and clamped at zero. Backtests roll the origin one day at a time over
//! a test span and score the median track with MAPE, every level with the
//! pinball loss and the outer pair of levels with interval coverage.

mod backtest;
mod forecast;
mod metrics;
mod report;

use chrono::NaiveDate;
use ndarray::{Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Architecture;
use crate::training::Method;

pub use backtest::{backtest, EvalReport, Forecaster, MapeCell, PairRecord};
pub use forecast::{
    forecast, forecast_dmf, forecast_mmmpf, forecast_origins, forecast_rsf, forecast_sbf, required_history,
    resolve_origin, ForecastRequest,
};
pub use metrics::{coverage, interval_coverage, level_index, mape};
pub use report::{emit_report, level_label, write_forecast_csv};

/// Quantile forecasts for consecutive days from one origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastResult {
    /// First forecast day.
    pub origin: NaiveDate,
    /// One date per forecast step.
    pub dates: Vec<NaiveDate>,
    pub method: Method,
    pub architecture: Architecture,
    pub zones: Vec<String>,
    pub quantile_levels: Vec<f64>,
    /// (steps, zones, levels) in MW, sorted along levels and clamped at 0.
    pub values: Array3<f64>,
    /// Denormalized outputs before sorting and clamping.
    pub raw: Array3<f64>,
}

impl ForecastResult {
    /// Repairs crossings and negative values of `raw`; fails on non-finite output.
    pub fn from_raw(
        origin: NaiveDate,
        dates: Vec<NaiveDate>,
        method: Method,
        architecture: Architecture,
        zones: Vec<String>,
        quantile_levels: Vec<f64>,
        raw: Array3<f64>,
    ) -> Result<Self> {
        let (steps, m, q) = raw.dim();
        if steps != dates.len() || m != zones.len() || q != quantile_levels.len() {
            return Err(Error::Layout(format!(
                "forecast block {:?} does not match {} dates, {} zones, {} levels",
                raw.dim(),
                dates.len(),
                zones.len(),
                quantile_levels.len()
            )));
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("{architecture}-{method} produced a non-finite forecast from {origin}")));
        }
        let mut values = raw.clone();
        let mut clamped = 0usize;
        for mut cell in values.lanes_mut(Axis(2)) {
            let mut v = cell.to_vec();
            v.sort_by(f64::total_cmp);
            for x in &mut v {
                if *x < 0.0 {
                    *x = 0.0;
                    clamped += 1;
                }
            }
            cell.assign(&ndarray::ArrayView1::from(&v));
        }
        if clamped > 0 {
            log::warn!("{architecture}-{method} forecast from {origin}: clamped {clamped} negative values to 0 MW");
        }
        Ok(ForecastResult {
            origin,
            dates,
            method,
            architecture,
            zones,
            quantile_levels,
            values,
            raw,
        })
    }

    pub fn horizon(&self) -> usize {
        self.dates.len()
    }

    /// (steps, zones) track of one level.
    pub fn quantile(&self, tau: f64) -> Result<ArrayView2<'_, f64>> {
        let k = level_index(&self.quantile_levels, tau)?;
        Ok(self.values.index_axis(Axis(2), k))
    }

    pub fn median(&self) -> Result<ArrayView2<'_, f64>> {
        self.quantile(0.5)
    }
}

#[cfg(test)]
mod tests;
