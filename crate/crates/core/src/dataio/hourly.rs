//! Canonical hourly CSV ingestion.
//!
//! Schema (header required):
//!
//! ```text
//! date,hour,zone,demand_mw,dry_bulb_f,dew_point_f
//! 2011-01-01,1,CT,3053.0,27.0,17.0
//! ```
//!
//! `hour` is hour-ending, 1..=24. The public ISO New England zonal workbooks
//! map onto this schema as `Date -> date`, `Hr_End -> hour`, sheet name ->
//! `zone`, `RT_Demand -> demand_mw`, `Dry_Bulb -> dry_bulb_f` and
//! `Dew_Point -> dew_point_f`; exporting each zone sheet to CSV with those
//! column renames is all the conversion required.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HOURLY_HEADER: [&str; 6] = [
    "date",
    "hour",
    "zone",
    "demand_mw",
    "dry_bulb_f",
    "dew_point_f",
];

/// Dew point may exceed dry bulb by at most this much before a row is flagged.
pub const DEW_POINT_SLACK_F: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HourlyRecord {
    pub date: NaiveDate,
    /// Hour ending, 1..=24.
    pub hour: u32,
    pub zone: String,
    pub demand: f64,
    pub dry_bulb: f64,
    pub dew_point: f64,
}

impl HourlyRecord {
    fn key(&self) -> (NaiveDate, u32, &str) {
        (self.date, self.hour, self.zone.as_str())
    }

    fn same_values(&self, other: &HourlyRecord) -> bool {
        self.demand == other.demand
            && self.dry_bulb == other.dry_bulb
            && self.dew_point == other.dew_point
    }
}

/// Deduplicated, time-sorted hourly records with an ingestion summary.
#[derive(Debug, Clone, Default)]
pub struct HourlyTable {
    /// Sorted by (date, hour, zone).
    pub records: Vec<HourlyRecord>,
    /// Zone names in sorted order.
    pub zones: Vec<String>,
    /// Row counts keyed by (zone, year).
    pub rows_per_zone_year: BTreeMap<(String, i32), usize>,
    /// Rows whose dew point exceeded dry bulb by more than the slack.
    pub flagged: Vec<String>,
}

impl HourlyTable {
    pub fn from_records(mut records: Vec<HourlyRecord>) -> Result<Self> {
        records.sort_by(|a, b| a.key().cmp(&b.key()));
        let mut deduped: Vec<HourlyRecord> = Vec::with_capacity(records.len());
        for rec in records {
            if let Some(prev) = deduped.last() {
                if prev.key() == rec.key() {
                    if prev.same_values(&rec) {
                        continue;
                    }
                    return Err(Error::DuplicateRecord {
                        zone: rec.zone,
                        date: rec.date.to_string(),
                        hour: rec.hour,
                    });
                }
            }
            deduped.push(rec);
        }

        let mut zones = BTreeSet::new();
        let mut rows_per_zone_year = BTreeMap::new();
        let mut flagged = Vec::new();
        for rec in &deduped {
            zones.insert(rec.zone.clone());
            *rows_per_zone_year
                .entry((rec.zone.clone(), rec.date.year()))
                .or_insert(0) += 1;
            if rec.dew_point > rec.dry_bulb + DEW_POINT_SLACK_F {
                flagged.push(format!(
                    "{} hour {} zone {}: dew point {} above dry bulb {}",
                    rec.date, rec.hour, rec.zone, rec.dew_point, rec.dry_bulb
                ));
            }
        }
        Ok(HourlyTable {
            records: deduped,
            zones: zones.into_iter().collect(),
            rows_per_zone_year,
            flagged,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Total rows per zone across all years.
    pub fn rows_per_zone(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for ((zone, _), n) in &self.rows_per_zone_year {
            *out.entry(zone.clone()).or_insert(0) += n;
        }
        out
    }
}

fn parse_field<T: std::str::FromStr>(
    raw: &str,
    name: &str,
    file: &str,
    line: u64,
) -> Result<T> {
    raw.trim().parse::<T>().map_err(|_| Error::Parse {
        file: file.to_string(),
        line,
        message: format!("cannot parse {name} from {raw:?}"),
    })
}

/// Parses hourly rows from any reader. `source` names the input in errors.
pub fn read_hourly<R: std::io::Read>(reader: R, source: &str) -> Result<Vec<HourlyRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers().map_err(|e| Error::Parse {
        file: source.to_string(),
        line: 1,
        message: e.to_string(),
    })?;
    if header.iter().collect::<Vec<_>>() != HOURLY_HEADER {
        return Err(Error::Parse {
            file: source.to_string(),
            line: 1,
            message: format!(
                "expected header {:?}, found {:?}",
                HOURLY_HEADER.join(","),
                header.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }

    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| Error::Parse {
            file: source.to_string(),
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        if row.len() != HOURLY_HEADER.len() {
            return Err(Error::Parse {
                file: source.to_string(),
                line,
                message: format!("expected 6 fields, found {}", row.len()),
            });
        }
        let date = NaiveDate::parse_from_str(&row[0], "%Y-%m-%d").map_err(|_| Error::Parse {
            file: source.to_string(),
            line,
            message: format!("invalid date {:?}", &row[0]),
        })?;
        let hour: u32 = parse_field(&row[1], "hour", source, line)?;
        if !(1..=24).contains(&hour) {
            return Err(Error::Parse {
                file: source.to_string(),
                line,
                message: format!("hour {hour} outside 1..=24"),
            });
        }
        let zone = row[2].to_string();
        if zone.is_empty() {
            return Err(Error::Parse {
                file: source.to_string(),
                line,
                message: "empty zone".into(),
            });
        }
        let demand: f64 = parse_field(&row[3], "demand_mw", source, line)?;
        let dry_bulb: f64 = parse_field(&row[4], "dry_bulb_f", source, line)?;
        let dew_point: f64 = parse_field(&row[5], "dew_point_f", source, line)?;
        if !demand.is_finite() || demand < 0.0 {
            return Err(Error::Parse {
                file: source.to_string(),
                line,
                message: format!("demand {demand} must be finite and nonnegative"),
            });
        }
        if !dry_bulb.is_finite() || !dew_point.is_finite() {
            return Err(Error::Parse {
                file: source.to_string(),
                line,
                message: "non-finite weather value".into(),
            });
        }
        out.push(HourlyRecord {
            date,
            hour,
            zone,
            demand,
            dry_bulb,
            dew_point,
        });
    }
    Ok(out)
}

/// Reads every file, merges, deduplicates and sorts.
pub fn ingest_hourly<P: AsRef<Path>>(files: &[P]) -> Result<HourlyTable> {
    if files.is_empty() {
        return Err(Error::Config("no input files given".into()));
    }
    let mut all = Vec::new();
    for path in files {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        all.extend(read_hourly(file, &path.display().to_string())?);
    }
    let table = HourlyTable::from_records(all)?;
    if table.is_empty() {
        return Err(Error::Data("input files contain no rows".into()));
    }
    Ok(table)
}
