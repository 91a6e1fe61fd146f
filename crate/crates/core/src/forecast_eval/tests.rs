use super::forecast::rollout;
use super::*;
use crate::dataio::{generate_synthetic, split_by_days, FeatureTable, SyntheticSpec};
use crate::models::{design_matrix, Checkpoint, ModelConfig, Regressor};
use crate::training::{fit, TrainingConfig};
use crate::windowing::{SequenceBatch, WindowSpec};
use chrono::Duration;
use ndarray::{s, Array3, Array4};
use proptest::prelude::*;

fn date(i: i64) -> NaiveDate {
    NaiveDate::from_ymd_opt(2015, 1, 1).unwrap() + Duration::days(i)
}

fn synthetic(n_days: usize, seed: u64) -> FeatureTable {
    generate_synthetic(&SyntheticSpec {
        n_days,
        n_zones: 2,
        weather_persistence: 0.7,
        future_signal_weight: 3.0,
        autoregressive_weight: 0.5,
        noise_scale: 1.0,
        seed,
        start_date: date(0),
    })
    .unwrap()
}

/// Briefly trained checkpoint on a 160-day panel with window (7, 5).
fn checkpoint(arch: Architecture, method: Method) -> (Checkpoint, FeatureTable) {
    let table = synthetic(160, 1);
    let split = split_by_days(&table, 130).unwrap();
    let mut mc = ModelConfig::new(arch);
    mc.lstm.layers = 1;
    mc.lstm.hidden = 6;
    mc.fcnn.hidden = vec![6];
    let tc = TrainingConfig {
        batch_size: 32,
        epochs: 2,
        ..TrainingConfig::desk(method).with_seed(2)
    };
    let (ckpt, _) = fit(&mc, &tc, &WindowSpec::new(7, 5), &split.train, &split.validation).unwrap();
    (ckpt, table)
}

fn request(origin: i64, horizon: usize) -> ForecastRequest {
    ForecastRequest {
        origin: date(origin),
        horizon,
        seed: 9,
    }
}

fn assert_valid(r: &ForecastResult, horizon: usize) {
    assert_eq!(r.values.dim(), (horizon, 2, 3));
    assert_eq!(r.dates.len(), horizon);
    assert!(r.values.iter().all(|v| v.is_finite() && *v >= 0.0));
    for cell in r.values.lanes(ndarray::Axis(2)) {
        assert!(cell.windows(2).into_iter().all(|w| w[0] <= w[1]));
    }
}

#[test]
fn mape_examples() {
    assert!((mape(&[110.0, 90.0], &[100.0, 100.0]).unwrap() - 10.0).abs() < 1e-12);
    assert_eq!(mape(&[3.0, 4.0], &[3.0, 4.0]).unwrap(), 0.0);
    assert!(mape(&[1.0], &[0.0]).is_err());
    assert!(mape(&[1.0, 2.0], &[1.0]).is_err());
    assert!(mape(&[], &[]).is_err());
}

#[test]
fn coverage_counts_cells_inside_the_interval() {
    let actual: Vec<f64> = (0..10).map(|i| i as f64).collect();
    let lo = vec![-1.0; 10];
    let mut hi = vec![8.5; 10];
    assert!((interval_coverage(&lo, &hi, &actual).unwrap() - 0.9).abs() < 1e-15);
    hi[9] = 9.0;
    assert_eq!(interval_coverage(&lo, &hi, &actual).unwrap(), 1.0);
    // degenerate interval at the actual value
    assert_eq!(interval_coverage(&actual, &actual, &actual).unwrap(), 1.0);
}

#[test]
fn coverage_over_results_requires_both_levels() {
    let (ckpt, table) = checkpoint(Architecture::Lstm, Method::Dmf);
    let r = forecast(&ckpt, &table, &request(100, 5)).unwrap();
    let c = coverage(std::slice::from_ref(&r), &table, 0.05, 0.95).unwrap();
    let mut hits = 0;
    for h in 0..5 {
        for z in 0..2 {
            let a = table.demand[[100 + h, z]];
            hits += (r.values[[h, z, 0]] <= a && a <= r.values[[h, z, 2]]) as usize;
        }
    }
    assert_eq!(c, hits as f64 / 10.0);
    assert!(matches!(coverage(&[r], &table, 0.1, 0.95), Err(Error::Config(_))));
}

#[test]
fn results_sort_crossings_and_clamp_negatives() {
    let raw = Array3::from_shape_vec((1, 1, 3), vec![5.0, -2.0, 3.0]).unwrap();
    let r = ForecastResult::from_raw(
        date(0),
        vec![date(0)],
        Method::Mmmpf,
        Architecture::Lstm,
        vec!["a".into()],
        vec![0.05, 0.5, 0.95],
        raw.clone(),
    )
    .unwrap();
    assert_eq!(r.values.iter().copied().collect::<Vec<_>>(), vec![0.0, 3.0, 5.0]);
    assert_eq!(r.raw, raw);
    assert_eq!(r.median().unwrap()[[0, 0]], 3.0);
    let bad = Array3::from_elem((1, 1, 3), f64::NAN);
    assert!(ForecastResult::from_raw(date(0), vec![date(0)], Method::Mmmpf, Architecture::Lstm, vec!["a".into()], vec![0.05, 0.5, 0.95], bad).is_err());
}

fn zero_history_batch(b: usize, history: usize, horizon: usize) -> SequenceBatch {
    let len = history + horizon;
    SequenceBatch {
        calendar: vec![[0, 0, 0]; b * len],
        predictors: Array3::zeros((b, len, 2)),
        targets: Array3::zeros((b, len, 1)),
        mask: vec![false; len],
    }
}

#[test]
fn rollout_of_increment_stub_counts_up() {
    // f = last observed y + 1 at every position and level
    let stub = |batch: &SequenceBatch| -> crate::Result<Array4<f32>> {
        let (b, l, m) = batch.targets.dim();
        Ok(Array4::from_shape_fn((b, l, m, 3), |(i, _, j, _)| batch.targets[[i, l - 1, j]] + 1.0))
    };
    let out = rollout(&zero_history_batch(2, 4, 6), 4, 6, 1, stub).unwrap();
    for i in 0..2 {
        let track: Vec<f32> = out.slice(s![i, .., 0, 1]).to_vec();
        assert_eq!(track, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }
}

#[test]
fn one_step_rollout_is_the_plain_prediction_and_errors_propagate() {
    let (ckpt, table) = checkpoint(Architecture::Lstm, Method::Rsf);
    let Regressor::Sequence(model) = &ckpt.regressor else { panic!() };
    let panel = crate::windowing::NormalizedPanel::new(&table, &ckpt.stats).unwrap();
    let w = panel.window(90, 12, 7);
    let full = SequenceBatch::from_windows(&[&w], 12).unwrap();

    let one = rollout(&SequenceBatch::from_windows(&[&w], 8).unwrap(), 7, 1, 1, |b| model.forward(b)).unwrap();
    let plain = model.forward(&SequenceBatch::from_windows(&[&w], 7).unwrap()).unwrap();
    assert_eq!(one.slice(s![0, 0, .., ..]), plain.slice(s![0, 6, .., ..]));

    // perturb the first step's output: every later step moves
    let base = rollout(&full, 7, 5, 1, |b| model.forward(b)).unwrap();
    let mut calls = 0;
    let bumped = rollout(&full, 7, 5, 1, |b| {
        let mut p = model.forward(b)?;
        if calls == 0 {
            p.slice_mut(s![.., 6, .., ..]).mapv_inplace(|v| v + 0.5);
        }
        calls += 1;
        Ok(p)
    })
    .unwrap();
    for h in 1..5 {
        let d = (&bumped.slice(s![0, h, .., 1]) - &base.slice(s![0, h, .., 1])).mapv(f32::abs).sum();
        assert!(d > 0.0, "step {h} insensitive");
    }
}

#[test]
fn masked_checkpoint_serves_every_length() {
    let (ckpt, table) = checkpoint(Architecture::Lstm, Method::Mmmpf);
    for l_f in [1, 2, 5] {
        let r = forecast_mmmpf(&ckpt, &table, &request(120, l_f)).unwrap();
        assert_valid(&r, l_f);
        assert_eq!(r.dates[0], date(120));
        assert_eq!(r.method, Method::Mmmpf);
    }
    let a = forecast(&ckpt, &table, &request(120, 5)).unwrap();
    let b = forecast(&ckpt, &table, &request(120, 5)).unwrap();
    assert_eq!(a, b);
    // batched and single forecasts agree
    let many = forecast_origins(&ckpt, &table, &[120], 5, 9).unwrap();
    assert_eq!(many[0], a);
}

fn with_future_weather(table: &FeatureTable, from: usize, bump: f64) -> FeatureTable {
    let mut t = table.clone();
    t.weather.slice_mut(s![from.., ..]).mapv_inplace(|v| v + bump);
    t
}

fn with_history_demand(table: &FeatureTable, to: usize, scale: f64) -> FeatureTable {
    let mut t = table.clone();
    t.demand.slice_mut(s![..to, ..]).mapv_inplace(|v| v * scale);
    t
}

#[test]
fn future_predictors_reach_masked_and_per_day_forecasts_only() {
    for (arch, method, uses_future, uses_history) in [
        (Architecture::Lstm, Method::Mmmpf, true, true),
        (Architecture::Lstm, Method::Dmf, false, true),
        (Architecture::Fcnn, Method::Sbf, true, false),
        (Architecture::LinearRidge, Method::Sbf, true, false),
    ] {
        let (ckpt, table) = checkpoint(arch, method);
        let base = forecast(&ckpt, &table, &request(120, 5)).unwrap();
        let future = forecast(&ckpt, &with_future_weather(&table, 120, 15.0), &request(120, 5)).unwrap();
        let past = forecast(&ckpt, &with_history_demand(&table, 120, 1.1), &request(120, 5)).unwrap();
        assert_eq!(base.raw != future.raw, uses_future, "{arch}-{method} future");
        assert_eq!(base.raw != past.raw, uses_history, "{arch}-{method} history");
    }
}

#[test]
fn linear_forecast_is_the_design_product() {
    let (ckpt, table) = checkpoint(Architecture::LinearRidge, Method::Sbf);
    let Regressor::Linear(lm) = &ckpt.regressor else { panic!() };
    let r = forecast_sbf(&ckpt, &table, &request(140, 4)).unwrap();
    let panel = crate::windowing::NormalizedPanel::new(&table, &ckpt.stats).unwrap();
    let x = design_matrix(&panel.calendar[140..144], panel.predictors.slice(s![140..144, ..])).unwrap();
    let point = x.dot(&lm.coefficients);
    for h in 0..4 {
        for z in 0..2 {
            for q in 0..3 {
                let expected = ckpt.stats.targets[z].denormalize(point[[h, z]] + lm.residual_offsets[[z, q]]);
                // outputs pass through f32
                assert!((r.raw[[h, z, q]] - expected).abs() < 1e-3 * expected.abs(), "{h} {z} {q}");
            }
        }
    }
}

#[test]
fn requests_are_checked() {
    let (ckpt, table) = checkpoint(Architecture::Lstm, Method::Mmmpf);
    let err = forecast(&ckpt, &table, &request(158, 5)).unwrap_err().to_string();
    assert!(err.contains(&date(160).to_string()) && err.contains(&date(162).to_string()), "{err}");
    assert!(!err.contains(&date(159).to_string()));
    // masked windows of length 12 ending on the last forecast day
    assert!(forecast(&ckpt, &table, &request(6, 1)).is_err());
    assert!(forecast(&ckpt, &table, &request(11, 1)).is_ok());
    assert!(forecast(&ckpt, &table, &request(7, 5)).is_ok());
    assert!(matches!(forecast(&ckpt, &table, &request(50, 0)), Err(Error::Config(_))));
    assert!(matches!(forecast(&ckpt, &table, &request(50, 6)), Err(Error::Config(_))));
    assert!(matches!(forecast_dmf(&ckpt, &table, &request(50, 2)), Err(Error::Config(_))));
}

/// Forecasts the actual demand at every level.
struct Oracle {
    window: WindowSpec,
    noise: f64,
}

impl Forecaster for Oracle {
    fn method(&self) -> Method {
        Method::Sbf
    }
    fn architecture(&self) -> Architecture {
        Architecture::LinearO
    }
    fn window(&self) -> WindowSpec {
        self.window
    }
    fn quantile_levels(&self) -> Vec<f64> {
        vec![0.05, 0.5, 0.95]
    }
    fn forecast_origins(&self, table: &FeatureTable, origins: &[usize], horizon: usize, _seed: u64) -> crate::Result<Vec<ForecastResult>> {
        origins
            .iter()
            .map(|&o| {
                let raw = Array3::from_shape_fn((horizon, table.n_zones(), 3), |(h, z, q)| {
                    let a = table.demand[[o + h, z]];
                    // deterministic pseudo-noise keyed by the cell
                    let e = ((o * 31 + h * 7 + z * 3 + q) % 11) as f64 / 10.0 - 0.5;
                    a * (1.0 + self.noise * e)
                });
                ForecastResult::from_raw(table.dates[o], table.dates[o..o + horizon].to_vec(), Method::Sbf, Architecture::LinearO, table.zones.clone(), vec![0.05, 0.5, 0.95], raw)
            })
            .collect()
    }
}

#[test]
fn backtest_grid_matches_enumeration() {
    // prefix of 90 days, then a 365-day test year with 60-day forecasts
    let table = synthetic(455, 3);
    let oracle = Oracle {
        window: WindowSpec::new(30, 60),
        noise: 0.0,
    };
    let report = backtest(&oracle, &table, 90, 0).unwrap();
    assert_eq!(report.origins, 365);
    for c in &report.cells {
        assert_eq!(c.count, 365 - c.horizon + 1);
        assert_eq!(c.mape, 0.0);
    }
    assert_eq!(report.cells.len(), 2 * 60);
    assert_eq!(report.aggregate_mape, 0.0);
    assert_eq!(report.coverage, Some(1.0));
    assert_eq!(report.pairs.len(), 2 * (306 * 60 + (1..60).sum::<usize>()));
    let full = report.cells.iter().filter(|c| c.count == 306).count();
    assert_eq!(full, 2);
}

#[test]
fn backtest_rejects_short_tables() {
    let table = synthetic(30, 3);
    let oracle = Oracle {
        window: WindowSpec::new(30, 5),
        noise: 0.0,
    };
    assert!(matches!(backtest(&oracle, &table, 0, 0), Err(Error::Data(_))));
    let table = synthetic(31, 3);
    assert!(backtest(&oracle, &table, 30, 0).is_ok());
}

/// Brute-force recomputation of every summary from the logged pairs.
fn recompute(report: &EvalReport) -> (f64, Vec<f64>, f64) {
    let mut cells = std::collections::BTreeMap::<(usize, usize), (f64, usize)>::new();
    for p in &report.pairs {
        let e = cells.entry((p.zone, p.horizon)).or_default();
        e.0 += (p.quantiles[1] - p.actual).abs() / p.actual.abs();
        e.1 += 1;
    }
    let mapes: Vec<f64> = cells.values().map(|(s, n)| 100.0 * s / *n as f64).collect();
    let aggregate = mapes.iter().sum::<f64>() / mapes.len() as f64;
    let pinball = [0.05, 0.5, 0.95]
        .iter()
        .enumerate()
        .map(|(q, tau)| {
            report
                .pairs
                .iter()
                .map(|p| {
                    let d = p.actual - p.quantiles[q];
                    if d >= 0.0 { tau * d } else { (tau - 1.0) * d }
                })
                .sum::<f64>()
                / report.pairs.len() as f64
        })
        .collect();
    let cov = report
        .pairs
        .iter()
        .filter(|p| p.quantiles[0] <= p.actual && p.actual <= p.quantiles[2])
        .count() as f64
        / report.pairs.len() as f64;
    (aggregate, pinball, cov)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn mape_matches_recomputation(
        pairs in proptest::collection::vec((1.0f64..1e4, 1.0f64..1e4), 1..200),
    ) {
        let (pred, actual): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let mut oracle = 0.0;
        for i in 0..pred.len() {
            oracle += (pred[i] - actual[i]).abs() / actual[i];
        }
        oracle = oracle * 100.0 / pred.len() as f64;
        prop_assert!(rel(mape(&pred, &actual).unwrap(), oracle) < 1e-9);
    }

    #[test]
    fn backtest_summaries_match_logged_pairs(
        seed in 0u64..1000,
        history in 3usize..10,
        horizon in 1usize..12,
        test_days in 5usize..40,
        noise in 0.01f64..0.5,
    ) {
        let table = synthetic(history + test_days, seed);
        let oracle = Oracle { window: WindowSpec::new(history, horizon), noise };
        let report = backtest(&oracle, &table, history, 0).unwrap();
        let (aggregate, pinball, cov) = recompute(&report);
        prop_assert!(rel(report.aggregate_mape, aggregate) < 1e-9);
        let mean_cells = report.cells.iter().map(|c| c.mape).sum::<f64>() / report.cells.len() as f64;
        prop_assert!(rel(report.aggregate_mape, mean_cells) < 1e-12);
        for (a, b) in report.pinball.iter().zip(&pinball) {
            prop_assert!(rel(*a, *b) < 1e-9);
        }
        prop_assert_eq!(report.coverage, Some(cov));
        for c in &report.cells {
            prop_assert_eq!(c.count, (test_days + 1).saturating_sub(c.horizon));
        }
    }
}

#[test]
fn per_day_backtest_cells_average_single_day_errors() {
    let (ckpt, table) = checkpoint(Architecture::LinearRidge, Method::Sbf);
    let report = backtest(&ckpt, &table, 130, 0).unwrap();
    // day-by-day errors from one-day forecasts
    let errors: Vec<Vec<f64>> = (130..160)
        .map(|d| {
            let r = forecast(&ckpt, &table, &request(d as i64, 1)).unwrap();
            (0..2).map(|z| (r.values[[0, z, 1]] - table.demand[[d, z]]).abs() / table.demand[[d, z]]).collect()
        })
        .collect();
    for c in &report.cells {
        let z = table.zones.iter().position(|n| *n == c.zone).unwrap();
        let days = &errors[c.horizon - 1..];
        let oracle = 100.0 * days.iter().map(|e| e[z]).sum::<f64>() / days.len() as f64;
        assert!(rel(c.mape, oracle) < 1e-9, "{c:?} vs {oracle}");
    }
}

#[test]
fn reports_are_byte_identical_on_rerun() {
    let (ckpt, table) = checkpoint(Architecture::Lstm, Method::Mmmpf);
    let (dmf, _) = checkpoint(Architecture::Lstm, Method::Dmf);
    let reports = vec![backtest(&ckpt, &table, 130, 4).unwrap(), backtest(&dmf, &table, 130, 4).unwrap()];
    let again = vec![backtest(&ckpt, &table, 130, 4).unwrap(), backtest(&dmf, &table, 130, 4).unwrap()];
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let written = emit_report(&reports, &table, a.path()).unwrap();
    emit_report(&again, &table, b.path()).unwrap();
    assert_eq!(written.len(), 4 + 2 * 2);
    for p in &written {
        let name = p.file_name().unwrap();
        assert_eq!(std::fs::read(p).unwrap(), std::fs::read(b.path().join(name)).unwrap(), "{name:?}");
    }
    let table1 = std::fs::read_to_string(a.path().join("table1.csv")).unwrap();
    let lines: Vec<&str> = table1.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("model,method,aggregate_mape"));
    assert!(lines[1].starts_with("LSTM,MMMPF,") && lines[2].starts_with("LSTM,DMF,"));
    let fan = std::fs::read_to_string(a.path().join("fan_chart_lstm_mmmpf.csv")).unwrap();
    assert_eq!(fan.lines().next().unwrap(), "date,zone,actual,q05,q50,q95");
    assert_eq!(fan.lines().count(), 1 + 2 * 5);
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary[0]["aggregate_mape"].as_f64().unwrap(), reports[0].aggregate_mape);
}

#[test]
fn level_labels() {
    assert_eq!(level_label(0.05), "q05");
    assert_eq!(level_label(0.5), "q50");
    assert_eq!(level_label(0.95), "q95");
    assert_eq!(level_label(0.025), "q2.5");
}
