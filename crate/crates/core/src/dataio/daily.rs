use std::collections::BTreeMap;

use chrono::{Duration, NaiveDate};
use ndarray::Array2;

use super::hourly::HourlyTable;
use super::table::FeatureTable;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
struct Peak {
    hour: u32,
    demand: f64,
    dry_bulb: f64,
    dew_point: f64,
}

/// Reduces hourly records to one row per day: the peak hourly demand per
/// zone, with that zone's weather taken at the hour of the peak. Ties go to
/// the earliest hour so the result does not depend on row order.
pub fn downsample_daily_peak(hourly: &HourlyTable) -> Result<FeatureTable> {
    if hourly.is_empty() {
        return Err(Error::Data("no hourly records".into()));
    }
    let zone_index: BTreeMap<&str, usize> = hourly
        .zones
        .iter()
        .enumerate()
        .map(|(i, z)| (z.as_str(), i))
        .collect();

    let mut peaks: Vec<BTreeMap<NaiveDate, Peak>> = vec![BTreeMap::new(); hourly.zones.len()];
    for rec in &hourly.records {
        let zi = zone_index[rec.zone.as_str()];
        let cand = Peak {
            hour: rec.hour,
            demand: rec.demand,
            dry_bulb: rec.dry_bulb,
            dew_point: rec.dew_point,
        };
        peaks[zi]
            .entry(rec.date)
            .and_modify(|p| {
                if cand.demand > p.demand || (cand.demand == p.demand && cand.hour < p.hour) {
                    *p = cand;
                }
            })
            .or_insert(cand);
    }

    let first = hourly.records.iter().map(|r| r.date).min().expect("nonempty");
    let last = hourly.records.iter().map(|r| r.date).max().expect("nonempty");
    let n = (last - first).num_days() as usize + 1;
    let dates: Vec<NaiveDate> = (0..n).map(|i| first + Duration::days(i as i64)).collect();

    let z = hourly.zones.len();
    let mut weather = Array2::zeros((n, 2 * z));
    let mut demand = Array2::zeros((n, z));
    for (zi, zone_peaks) in peaks.iter().enumerate() {
        let missing: Vec<NaiveDate> = dates
            .iter()
            .filter(|d| !zone_peaks.contains_key(d))
            .copied()
            .collect();
        if !missing.is_empty() {
            let listed: Vec<String> = missing.iter().take(20).map(|d| d.to_string()).collect();
            let more = if missing.len() > 20 {
                format!(" (and {} more)", missing.len() - 20)
            } else {
                String::new()
            };
            return Err(Error::MissingDays {
                zone: hourly.zones[zi].clone(),
                days: format!("{}{more}", listed.join(", ")),
            });
        }
        for (i, d) in dates.iter().enumerate() {
            let p = zone_peaks[d];
            demand[[i, zi]] = p.demand;
            weather[[i, 2 * zi]] = p.dry_bulb;
            weather[[i, 2 * zi + 1]] = p.dew_point;
        }
    }
    FeatureTable::new(hourly.zones.clone(), dates, weather, demand)
}
