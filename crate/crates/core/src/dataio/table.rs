use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate};
use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Calendar predictors for one day.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Calendar {
    /// 1..=12
    pub month: u8,
    /// 1..=31
    pub day: u8,
    /// 0 = Monday ..= 6 = Sunday
    pub weekday: u8,
}

/// Vocabulary sizes of the three calendar categoricals, in index order.
pub const CALENDAR_CARDINALITY: [usize; 3] = [12, 31, 7];

impl Calendar {
    pub fn from_date(date: NaiveDate) -> Self {
        Calendar {
            month: date.month() as u8,
            day: date.day() as u8,
            weekday: date.weekday().num_days_from_monday() as u8,
        }
    }

    /// Zero-based embedding indices (month, day of month, day of week).
    pub fn indices(&self) -> [usize; 3] {
        [
            self.month as usize - 1,
            self.day as usize - 1,
            self.weekday as usize,
        ]
    }
}

/// Aligned daily panel: calendar and weather predictors plus per-zone peak demand.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub zones: Vec<String>,
    pub dates: Vec<NaiveDate>,
    pub calendar: Vec<Calendar>,
    /// (days, 2 * zones): dry bulb then dew point for each zone, zone-major.
    pub weather: Array2<f64>,
    /// (days, zones): daily peak demand in MW.
    pub demand: Array2<f64>,
}

impl FeatureTable {
    pub fn new(
        zones: Vec<String>,
        dates: Vec<NaiveDate>,
        weather: Array2<f64>,
        demand: Array2<f64>,
    ) -> Result<Self> {
        let n = dates.len();
        let z = zones.len();
        if z == 0 {
            return Err(Error::Data("feature table needs at least one zone".into()));
        }
        if weather.dim() != (n, 2 * z) || demand.dim() != (n, z) {
            return Err(Error::Data(format!(
                "shape mismatch: {n} dates, {z} zones, weather {:?}, demand {:?}",
                weather.dim(),
                demand.dim()
            )));
        }
        for w in dates.windows(2) {
            if w[1] - w[0] != Duration::days(1) {
                return Err(Error::Data(format!(
                    "dates must be consecutive days: {} followed by {}",
                    w[0], w[1]
                )));
            }
        }
        if let Some(((row, col), v)) = demand
            .indexed_iter()
            .find(|(_, v)| !(v.is_finite() && **v > 0.0))
        {
            return Err(Error::Data(format!(
                "demand for zone {} on {} is {v}; must be finite and positive",
                zones[col], dates[row]
            )));
        }
        if weather.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite weather value".into()));
        }
        let calendar = dates.iter().map(|d| Calendar::from_date(*d)).collect();
        Ok(FeatureTable {
            zones,
            dates,
            calendar,
            weather,
            demand,
        })
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn n_zones(&self) -> usize {
        self.zones.len()
    }

    /// Number of continuous predictor channels (2 per zone).
    pub fn n_predictors(&self) -> usize {
        self.weather.ncols()
    }

    pub fn predictor_names(&self) -> Vec<String> {
        self.zones
            .iter()
            .flat_map(|z| [format!("{z}_dry_bulb_f"), format!("{z}_dew_point_f")])
            .collect()
    }

    pub fn target_names(&self) -> Vec<String> {
        self.zones.iter().map(|z| format!("{z}_demand_mw")).collect()
    }

    /// Rows `start..end` as a new table.
    pub fn slice(&self, start: usize, end: usize) -> FeatureTable {
        FeatureTable {
            zones: self.zones.clone(),
            dates: self.dates[start..end].to_vec(),
            calendar: self.calendar[start..end].to_vec(),
            weather: self.weather.slice(s![start..end, ..]).to_owned(),
            demand: self.demand.slice(s![start..end, ..]).to_owned(),
        }
    }

    pub fn index_of(&self, date: NaiveDate) -> Option<usize> {
        let first = *self.dates.first()?;
        let offset = (date - first).num_days();
        (offset >= 0 && (offset as usize) < self.len()).then_some(offset as usize)
    }

    /// Writes the panel as CSV: `date,month,day,weekday` followed by
    /// `<zone>_dry_bulb_f,<zone>_dew_point_f,<zone>_demand_mw` per zone.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv_to(file)
    }

    pub fn write_csv_to<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec![
            "date".to_string(),
            "month".into(),
            "day".into(),
            "weekday".into(),
        ];
        for z in &self.zones {
            header.push(format!("{z}_dry_bulb_f"));
            header.push(format!("{z}_dew_point_f"));
            header.push(format!("{z}_demand_mw"));
        }
        w.write_record(&header)?;
        for i in 0..self.len() {
            let c = self.calendar[i];
            let mut row = vec![
                self.dates[i].to_string(),
                c.month.to_string(),
                c.day.to_string(),
                c.weekday.to_string(),
            ];
            for z in 0..self.n_zones() {
                row.push(self.weather[[i, 2 * z]].to_string());
                row.push(self.weather[[i, 2 * z + 1]].to_string());
                row.push(self.demand[[i, z]].to_string());
            }
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<FeatureTable> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv_from(file, &path.display().to_string())
    }

    pub fn read_csv_from<R: std::io::Read>(reader: R, source: &str) -> Result<FeatureTable> {
        let mut rdr = csv::Reader::from_reader(reader);
        let header: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
        let parse_err = |line: u64, message: String| Error::Parse {
            file: source.to_string(),
            line,
            message,
        };
        if header.len() < 7 || (header.len() - 4) % 3 != 0 || header[0] != "date" {
            return Err(parse_err(1, "not a daily feature panel header".into()));
        }
        let mut zones = Vec::new();
        for chunk in header[4..].chunks(3) {
            let zone = chunk[2]
                .strip_suffix("_demand_mw")
                .ok_or_else(|| parse_err(1, format!("unexpected column {}", chunk[2])))?;
            if chunk[0] != format!("{zone}_dry_bulb_f") || chunk[1] != format!("{zone}_dew_point_f") {
                return Err(parse_err(1, format!("columns for zone {zone} out of order")));
            }
            zones.push(zone.to_string());
        }
        let z = zones.len();
        let mut dates = Vec::new();
        let mut weather = Vec::new();
        let mut demand = Vec::new();
        for row in rdr.records() {
            let row = row?;
            let line = row.position().map(|p| p.line()).unwrap_or(0);
            let date = NaiveDate::parse_from_str(&row[0], "%Y-%m-%d")
                .map_err(|_| parse_err(line, format!("invalid date {:?}", &row[0])))?;
            dates.push(date);
            for zi in 0..z {
                let get = |k: usize| -> Result<f64> {
                    row[4 + 3 * zi + k]
                        .parse::<f64>()
                        .map_err(|_| parse_err(line, format!("bad number {:?}", &row[4 + 3 * zi + k])))
                };
                weather.push(get(0)?);
                weather.push(get(1)?);
                demand.push(get(2)?);
            }
        }
        let n = dates.len();
        let weather = Array2::from_shape_vec((n, 2 * z), weather).expect("row-major weather");
        let demand = Array2::from_shape_vec((n, z), demand).expect("row-major demand");
        FeatureTable::new(zones, dates, weather, demand)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> FeatureTable {
        let start = NaiveDate::from_ymd_opt(2020, 2, 27).unwrap();
        let dates: Vec<_> = (0..n).map(|i| start + Duration::days(i as i64)).collect();
        let weather = Array2::from_shape_fn((n, 4), |(i, j)| 30.0 + i as f64 + j as f64 * 0.5);
        let demand = Array2::from_shape_fn((n, 2), |(i, j)| 100.0 + i as f64 * 1.25 + j as f64);
        FeatureTable::new(vec!["A".into(), "B".into()], dates, weather, demand).unwrap()
    }

    #[test]
    fn leap_day_keeps_day_29() {
        let t = toy(4);
        assert_eq!(t.dates[2], NaiveDate::from_ymd_opt(2020, 2, 29).unwrap());
        assert_eq!(t.calendar[2].day, 29);
        assert_eq!(t.calendar[2].indices()[1], 28);
    }

    #[test]
    fn gap_and_nonpositive_demand_rejected() {
        let t = toy(3);
        let mut dates = t.dates.clone();
        dates[2] = dates[2] + Duration::days(1);
        assert!(FeatureTable::new(t.zones.clone(), dates, t.weather.clone(), t.demand.clone()).is_err());

        let mut demand = t.demand.clone();
        demand[[1, 1]] = 0.0;
        assert!(FeatureTable::new(t.zones.clone(), t.dates.clone(), t.weather.clone(), demand).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let t = toy(10);
        let mut buf = Vec::new();
        t.write_csv_to(&mut buf).unwrap();
        let back = FeatureTable::read_csv_from(buf.as_slice(), "mem").unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn index_of_date() {
        let t = toy(5);
        assert_eq!(t.index_of(t.dates[3]), Some(3));
        assert_eq!(t.index_of(t.dates[0] - Duration::days(1)), None);
    }
}
