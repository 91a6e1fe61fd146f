use ndarray::Axis;

use super::ForecastResult;
use crate::dataio::FeatureTable;
use crate::error::{Error, Result};

/// `100 * mean(|pred - actual| / |actual|)`.
pub fn mape(pred: &[f64], actual: &[f64]) -> Result<f64> {
    if pred.len() != actual.len() || pred.is_empty() {
        return Err(Error::Data(format!(
            "MAPE needs equal nonempty samples, got {} predictions and {} actuals",
            pred.len(),
            actual.len()
        )));
    }
    let mut total = 0.0;
    for (i, (p, a)) in pred.iter().zip(actual).enumerate() {
        if *a == 0.0 {
            return Err(Error::Data(format!("MAPE undefined: actual value {i} is zero")));
        }
        total += ((p - a) / a).abs();
    }
    Ok(100.0 * total / pred.len() as f64)
}

/// Position of `tau` among `levels`.
pub fn level_index(levels: &[f64], tau: f64) -> Result<usize> {
    levels
        .iter()
        .position(|l| (l - tau).abs() < 1e-9)
        .ok_or_else(|| Error::Config(format!("quantile level {tau} not among {levels:?}")))
}

/// Share of cells with `lo <= actual <= hi`.
pub fn interval_coverage(lo: &[f64], hi: &[f64], actual: &[f64]) -> Result<f64> {
    if lo.len() != actual.len() || hi.len() != actual.len() || actual.is_empty() {
        return Err(Error::Data("coverage needs equal nonempty samples".into()));
    }
    let hits = lo
        .iter()
        .zip(hi)
        .zip(actual)
        .filter(|((l, h), a)| **l <= **a && **a <= **h)
        .count();
    Ok(hits as f64 / actual.len() as f64)
}

/// Coverage of the `(lo_tau, hi_tau)` interval over every (origin, step, zone)
/// cell of `results`, with actuals looked up by date in `actuals`.
pub fn coverage(results: &[ForecastResult], actuals: &FeatureTable, lo_tau: f64, hi_tau: f64) -> Result<f64> {
    let (mut lo, mut hi, mut act) = (Vec::new(), Vec::new(), Vec::new());
    for r in results {
        let l = level_index(&r.quantile_levels, lo_tau)?;
        let h = level_index(&r.quantile_levels, hi_tau)?;
        if r.zones != actuals.zones {
            return Err(Error::Data("forecast and actual zones differ".into()));
        }
        for (step, date) in r.dates.iter().enumerate() {
            let row = actuals
                .index_of(*date)
                .ok_or_else(|| Error::Data(format!("no actual demand for {date}")))?;
            let cells = r.values.index_axis(Axis(0), step);
            for (z, cell) in cells.outer_iter().enumerate() {
                lo.push(cell[l]);
                hi.push(cell[h]);
                act.push(actuals.demand[[row, z]]);
            }
        }
    }
    interval_coverage(&lo, &hi, &act)
}
