//! Sliding windows, z-score normalization and trailing-block masking.
//!
//! A window spans `history + horizon` consecutive days. Position `history`
//! is the forecast origin. Masking replaces the forecast channels of the
//! last `mask_len` steps with values drawn uniformly from each channel's
//! training range; predictors are never touched.

use chrono::NaiveDate;
use ndarray::{s, Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::FeatureTable;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    /// Observed steps before the origin.
    pub history: usize,
    /// Maximum number of forecast steps, origin included.
    pub horizon: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
}

fn default_stride() -> usize {
    1
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec {
            history: 30,
            horizon: 60,
            stride: 1,
        }
    }
}

impl WindowSpec {
    pub fn new(history: usize, horizon: usize) -> Self {
        WindowSpec {
            history,
            horizon,
            stride: 1,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn len(&self) -> usize {
        self.history + self.horizon
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.history < 1 || self.horizon < 1 || self.stride < 1 {
            return Err(Error::Config(format!(
                "window needs history >= 1, horizon >= 1, stride >= 1; got {self:?}"
            )));
        }
        Ok(())
    }

    /// Number of windows a table of `n` days yields.
    pub fn count(&self, n: usize) -> usize {
        if n < self.len() {
            0
        } else {
            (n - self.len()) / self.stride + 1
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub name: String,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl ChannelStats {
    fn from_values(name: String, values: impl Iterator<Item = f64> + Clone) -> Result<Self> {
        let n = values.clone().count();
        if n == 0 {
            return Err(Error::Data(format!("channel {name} has no values")));
        }
        let mean = values.clone().sum::<f64>() / n as f64;
        let var = values.clone().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let (min, max) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        });
        let std = var.sqrt();
        if !(std > 0.0) || min == max {
            return Err(Error::Data(format!("channel {name} is constant")));
        }
        Ok(ChannelStats {
            name,
            mean,
            std,
            min,
            max,
        })
    }

    pub fn normalize(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        v * self.std + self.mean
    }

    /// Channel range in normalized units.
    pub fn normalized_range(&self) -> (f64, f64) {
        (self.normalize(self.min), self.normalize(self.max))
    }
}

/// Per-channel statistics of the training split (population std).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub predictors: Vec<ChannelStats>,
    pub targets: Vec<ChannelStats>,
}

impl NormStats {
    pub fn channel(&self, name: &str) -> Result<&ChannelStats> {
        self.predictors
            .iter()
            .chain(&self.targets)
            .find(|c| c.name == name)
            .ok_or_else(|| Error::Data(format!("unknown channel {name}")))
    }

    pub fn n_predictors(&self) -> usize {
        self.predictors.len()
    }

    pub fn n_targets(&self) -> usize {
        self.targets.len()
    }
}

pub fn compute_norm_stats(train: &FeatureTable) -> Result<NormStats> {
    if train.is_empty() {
        return Err(Error::Data("training table is empty".into()));
    }
    let predictors = train
        .predictor_names()
        .into_iter()
        .enumerate()
        .map(|(j, name)| ChannelStats::from_values(name, train.weather.column(j).iter().copied()))
        .collect::<Result<Vec<_>>>()?;
    let targets = train
        .target_names()
        .into_iter()
        .enumerate()
        .map(|(j, name)| ChannelStats::from_values(name, train.demand.column(j).iter().copied()))
        .collect::<Result<Vec<_>>>()?;
    Ok(NormStats {
        predictors,
        targets,
    })
}

/// Maps normalized values of a named channel back to physical units.
pub fn denormalize(values: &[f64], stats: &NormStats, channel: &str) -> Result<Vec<f64>> {
    let c = stats.channel(channel)?;
    Ok(values.iter().map(|v| c.denormalize(*v)).collect())
}

/// A whole table in model units: calendar indices and z-scored channels.
#[derive(Debug, Clone)]
pub struct NormalizedPanel {
    pub dates: Vec<NaiveDate>,
    pub calendar: Vec<[usize; 3]>,
    pub predictors: Array2<f32>,
    pub targets: Array2<f32>,
}

impl NormalizedPanel {
    pub fn new(table: &FeatureTable, stats: &NormStats) -> Result<Self> {
        if table.n_predictors() != stats.n_predictors() || table.n_zones() != stats.n_targets() {
            return Err(Error::Layout(format!(
                "table has {} predictors / {} targets, statistics cover {} / {}",
                table.n_predictors(),
                table.n_zones(),
                stats.n_predictors(),
                stats.n_targets()
            )));
        }
        let predictors = Array2::from_shape_fn(table.weather.dim(), |(i, j)| {
            stats.predictors[j].normalize(table.weather[[i, j]]) as f32
        });
        let targets = Array2::from_shape_fn(table.demand.dim(), |(i, j)| {
            stats.targets[j].normalize(table.demand[[i, j]]) as f32
        });
        Ok(NormalizedPanel {
            dates: table.dates.clone(),
            calendar: table.calendar.iter().map(|c| c.indices()).collect(),
            predictors,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    /// The `len`-step slice starting at `start`, with its origin at `start + history`.
    pub fn window(&self, start: usize, len: usize, history: usize) -> Window {
        Window {
            origin: self.dates[start + history.min(len - 1)],
            history,
            calendar: self.calendar[start..start + len].to_vec(),
            predictors: self.predictors.slice(s![start..start + len, ..]).to_owned(),
            targets: self.targets.slice(s![start..start + len, ..]).to_owned(),
        }
    }
}

/// One contiguous slice of the normalized panel.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub origin: NaiveDate,
    /// Steps before the origin.
    pub history: usize,
    pub calendar: Vec<[usize; 3]>,
    /// (len, predictors), normalized.
    pub predictors: Array2<f32>,
    /// (len, targets), normalized.
    pub targets: Array2<f32>,
}

impl Window {
    pub fn len(&self) -> usize {
        self.calendar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.calendar.is_empty()
    }
}

pub fn make_windows(table: &FeatureTable, spec: &WindowSpec, stats: &NormStats) -> Result<Vec<Window>> {
    spec.validate()?;
    if table.len() < spec.len() {
        return Err(Error::Data(format!(
            "table has {} days; windows need at least {}",
            table.len(),
            spec.len()
        )));
    }
    let panel = NormalizedPanel::new(table, stats)?;
    Ok((0..spec.count(table.len()))
        .map(|i| panel.window(i * spec.stride, spec.len(), spec.history))
        .collect())
}

/// Model input for a batch of equal-length sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBatch {
    /// Batch-major calendar indices, `b * len + t`.
    pub calendar: Vec<[usize; 3]>,
    /// (batch, len, predictors)
    pub predictors: Array3<f32>,
    /// (batch, len, targets); masked steps hold random fill.
    pub targets: Array3<f32>,
    /// Per step, true where targets are masked.
    pub mask: Vec<bool>,
}

impl SequenceBatch {
    pub fn batch_size(&self) -> usize {
        self.predictors.dim().0
    }

    pub fn len(&self) -> usize {
        self.predictors.dim().1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stacks the first `len` steps of each window without masking.
    pub fn from_windows(windows: &[&Window], len: usize) -> Result<Self> {
        let first = windows
            .first()
            .ok_or_else(|| Error::Data("empty batch".into()))?;
        let p = first.predictors.ncols();
        let m = first.targets.ncols();
        if let Some(w) = windows.iter().find(|w| w.len() < len) {
            return Err(Error::Layout(format!(
                "window of length {} cannot supply {len} steps",
                w.len()
            )));
        }
        let b = windows.len();
        let mut calendar = Vec::with_capacity(b * len);
        let mut predictors = Array3::zeros((b, len, p));
        let mut targets = Array3::zeros((b, len, m));
        for (i, w) in windows.iter().enumerate() {
            calendar.extend_from_slice(&w.calendar[..len]);
            predictors
                .slice_mut(s![i, .., ..])
                .assign(&w.predictors.slice(s![..len, ..]));
            targets
                .slice_mut(s![i, .., ..])
                .assign(&w.targets.slice(s![..len, ..]));
        }
        Ok(SequenceBatch {
            calendar,
            predictors,
            targets,
            mask: vec![false; len],
        })
    }
}

/// A batch whose trailing `mask_len` target steps were replaced by random fill.
#[derive(Debug, Clone)]
pub struct MaskedBatch {
    pub input: SequenceBatch,
    /// Unmasked targets, (batch, len, targets).
    pub truth: Array3<f32>,
    pub mask_len: usize,
    /// (batch, mask_len, targets)
    pub fill_values: Array3<f32>,
}

impl MaskedBatch {
    pub fn mask(&self) -> &[bool] {
        &self.input.mask
    }
}

/// Uniform draw from `1..=horizon`.
pub fn sample_mask_length<R: Rng + ?Sized>(rng: &mut R, horizon: usize) -> usize {
    rng.random_range(1..=horizon.max(1))
}

/// Draws one fill value per masked target cell, uniform on the channel's
/// normalized training range.
pub fn draw_fill<R: Rng + ?Sized>(
    rng: &mut R,
    stats: &NormStats,
    batch: usize,
    steps: usize,
) -> Array3<f32> {
    let m = stats.n_targets();
    let ranges: Vec<(f32, f32)> = stats
        .targets
        .iter()
        .map(|c| {
            let (lo, hi) = c.normalized_range();
            (lo as f32, hi as f32)
        })
        .collect();
    let mut fill = Array3::zeros((batch, steps, m));
    for b in 0..batch {
        for t in 0..steps {
            for (j, &(lo, hi)) in ranges.iter().enumerate() {
                let u: f32 = rng.random();
                fill[[b, t, j]] = (lo + u * (hi - lo)).clamp(lo, hi);
            }
        }
    }
    fill
}

/// Masks the last `mask_len` target steps of every window.
pub fn apply_mask<R: Rng + ?Sized>(
    windows: &[&Window],
    mask_len: usize,
    rng: &mut R,
    stats: &NormStats,
) -> Result<MaskedBatch> {
    let len = windows
        .first()
        .ok_or_else(|| Error::Data("empty batch".into()))?
        .len();
    if windows.iter().any(|w| w.len() != len) {
        return Err(Error::Layout("windows in a batch must share one length".into()));
    }
    let max_mask = len - windows[0].history;
    if mask_len < 1 || mask_len > max_mask {
        return Err(Error::Data(format!(
            "mask length {mask_len} outside 1..={max_mask}"
        )));
    }
    if windows[0].targets.ncols() != stats.n_targets() {
        return Err(Error::Layout("window targets do not match statistics".into()));
    }
    let mut input = SequenceBatch::from_windows(windows, len)?;
    let truth = input.targets.clone();
    let fill = draw_fill(rng, stats, windows.len(), mask_len);
    input
        .targets
        .slice_mut(s![.., len - mask_len.., ..])
        .assign(&fill);
    for flag in &mut input.mask[len - mask_len..] {
        *flag = true;
    }
    Ok(MaskedBatch {
        input,
        truth,
        mask_len,
        fill_values: fill,
    })
}
