use std::collections::BTreeMap;

use chrono::{Datelike, Duration, NaiveDate};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use maskcast::dataio::{
    downsample_daily_peak, generate_synthetic_panel, split_by_days, FeatureTable, HourlyRecord, HourlyTable,
    SyntheticSpec,
};

fn day0() -> NaiveDate {
    NaiveDate::from_ymd_opt(2011, 1, 1).unwrap()
}

/// Builds a table without sorting, so record order reaches the downsampler as given.
fn raw_table(records: Vec<HourlyRecord>) -> HourlyTable {
    let mut zones: Vec<String> = records.iter().map(|r| r.zone.clone()).collect();
    zones.sort();
    zones.dedup();
    let mut rows_per_zone_year = BTreeMap::new();
    for r in &records {
        *rows_per_zone_year.entry((r.zone.clone(), r.date.year())).or_insert(0) += 1;
    }
    HourlyTable {
        records,
        zones,
        rows_per_zone_year,
        flagged: Vec::new(),
    }
}

fn record_strategy() -> impl Strategy<Value = Vec<HourlyRecord>> {
    (1usize..4, 1usize..5)
        .prop_flat_map(|(zones, days)| {
            let cells = zones * days;
            (
                Just((zones, days)),
                prop::collection::vec(prop::collection::btree_set(1u32..=24, 1..6), cells),
                prop::collection::vec((1u32..40, 0u32..90, 0u32..20), cells * 5),
            )
        })
        .prop_map(|((zones, days), hours, values)| {
            let mut out = Vec::new();
            let mut v = values.into_iter();
            for z in 0..zones {
                for d in 0..days {
                    for &hour in &hours[z * days + d] {
                        let (demand, dry, gap) = v.next().unwrap();
                        out.push(HourlyRecord {
                            date: day0() + Duration::days(d as i64),
                            hour,
                            zone: format!("Z{z}"),
                            demand: demand as f64,
                            dry_bulb: dry as f64,
                            dew_point: dry as f64 - gap as f64,
                        });
                    }
                }
            }
            out
        })
}

proptest! {
    #[test]
    fn downsample_ignores_row_order_and_finds_the_peak(records in record_strategy(), seed in any::<u64>()) {
        let base = downsample_daily_peak(&raw_table(records.clone())).unwrap();
        let mut shuffled = records.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let again = downsample_daily_peak(&raw_table(shuffled)).unwrap();
        prop_assert_eq!(&base, &again);

        for (z, zone) in base.zones.iter().enumerate() {
            for (t, date) in base.dates.iter().enumerate() {
                let mut day: Vec<&HourlyRecord> =
                    records.iter().filter(|r| &r.zone == zone && r.date == *date).collect();
                day.sort_by_key(|r| r.hour);
                let peak = day.iter().map(|r| r.demand).fold(f64::NEG_INFINITY, f64::max);
                let at = day.iter().find(|r| r.demand == peak).unwrap();
                prop_assert_eq!(base.demand[[t, z]], peak);
                prop_assert_eq!(base.weather[[t, 2 * z]], at.dry_bulb);
                prop_assert_eq!(base.weather[[t, 2 * z + 1]], at.dew_point);
            }
        }
    }

    #[test]
    fn splits_partition_the_table(n in 3usize..400, frac in 0.0f64..1.0) {
        let table = toy(n);
        let pretest = 2 + ((n - 3) as f64 * frac) as usize;
        let s = split_by_days(&table, pretest).unwrap();
        prop_assert_eq!(s.train.len() + s.validation.len() + s.test.len(), n);
        prop_assert_eq!(s.train.len() + s.validation.len(), pretest);
        let joined: Vec<NaiveDate> =
            s.train.dates.iter().chain(&s.validation.dates).chain(&s.test.dates).copied().collect();
        prop_assert_eq!(joined, table.dates.clone());
        prop_assert!(!s.train.is_empty() && !s.validation.is_empty() && !s.test.is_empty());
    }
}

fn toy(n: usize) -> FeatureTable {
    let dates = (0..n).map(|i| day0() + Duration::days(i as i64)).collect();
    let weather = ndarray::Array2::from_shape_fn((n, 2), |(i, j)| (i * 3 + j) as f64);
    let demand = ndarray::Array2::from_shape_fn((n, 1), |(i, _)| 100.0 + i as f64);
    FeatureTable::new(vec!["A".into()], dates, weather, demand).unwrap()
}

#[test]
fn decade_of_hourly_rows_gives_87672_samples_per_zone() {
    let last = NaiveDate::from_ymd_opt(2020, 12, 31).unwrap();
    let days = (last - day0()).num_days() as usize + 1;
    let mut records = Vec::with_capacity(days * 24 * 8);
    for d in 0..days {
        let date = day0() + Duration::days(d as i64);
        for hour in 1..=24u32 {
            for z in 0..8 {
                let demand = 1000.0 + (hour as f64 - 17.0).abs() * -10.0 + z as f64;
                records.push(HourlyRecord {
                    date,
                    hour,
                    zone: format!("Z{z}"),
                    demand,
                    dry_bulb: 50.0 + hour as f64,
                    dew_point: 40.0,
                });
            }
        }
    }
    let hourly = HourlyTable::from_records(records).unwrap();
    let per_zone = hourly.rows_per_zone();
    assert_eq!(per_zone.len(), 8);
    assert!(per_zone.values().all(|n| *n == 87_672));
    let daily = downsample_daily_peak(&hourly).unwrap();
    assert_eq!(daily.len(), 3_653);
    assert_eq!(days, 3_653);
    // Peak at hour 17 carries that hour's temperature.
    assert!(daily.weather.column(0).iter().all(|v| *v == 67.0));
}

#[test]
fn synthetic_residual_std_matches_noise_scale() {
    let spec = SyntheticSpec {
        n_days: 10_000,
        n_zones: 2,
        weather_persistence: 0.8,
        future_signal_weight: 4.0,
        autoregressive_weight: 0.6,
        noise_scale: 1.0,
        seed: 17,
        start_date: day0(),
    };
    let panel = generate_synthetic_panel(&spec).unwrap();
    let t = &panel.table;
    for z in 0..2 {
        let resid: Vec<f64> = (1..t.len())
            .map(|i| {
                let mu = spec.conditional_mean(
                    t.demand[[i - 1, z]],
                    t.weather[[i, 2 * z]],
                    t.weather[[i, 2 * z + 1]],
                    t.dates[i],
                    z,
                    panel.shift,
                );
                t.demand[[i, z]] - mu
            })
            .collect();
        let n = resid.len() as f64;
        let mean = resid.iter().sum::<f64>() / n;
        let std = (resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((std - 1.0).abs() < 0.05, "zone {z}: residual std {std}");
    }
}
