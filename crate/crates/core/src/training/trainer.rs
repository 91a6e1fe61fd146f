use std::time::Instant;

use ndarray::{s, Array3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::{masked_quantile_loss, masked_quantile_loss_grad};
use super::{EpochRecord, Method, TrainingConfig, TrainingReport};
use crate::dataio::FeatureTable;
use crate::error::{Error, Result};
use crate::models::{
    build_model, Architecture, Checkpoint, HeadKind, InputLayout, LinearModel, ModelConfig, Regressor,
    SequenceModel,
};
use crate::nn::{clip_grad_norm, grad_norm, Adam, Parameters};
use crate::windowing::{
    apply_mask, compute_norm_stats, make_windows, NormStats, NormalizedPanel, SequenceBatch, Window, WindowSpec,
};

/// Stream ids carved out of one seed so that initialization, training
/// randomness and validation fill never share draws.
const TRAIN_STREAM: u64 = 1;
const VALIDATION_STREAM: u64 = 2;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Model input, supervision targets and loss mask for one mini-batch.
#[derive(Debug, Clone)]
pub struct TaskBatch {
    pub input: SequenceBatch,
    /// (batch, output steps, targets)
    pub truth: Array3<f32>,
    /// Output steps that carry loss.
    pub mask: Vec<bool>,
}

/// A source of training samples for one formulation.
pub trait TrainingTask {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Training batch; any masking randomness is drawn from `rng`.
    fn batch(&self, idx: &[usize], rng: &mut ChaCha8Rng) -> Result<TaskBatch>;

    /// Evaluation batch; `rng` is freshly seeded for every evaluation.
    fn eval_batch(&self, idx: &[usize], rng: &mut ChaCha8Rng) -> Result<TaskBatch> {
        self.batch(idx, rng)
    }
}

fn select<'a>(windows: &'a [Window], idx: &[usize]) -> Vec<&'a Window> {
    idx.iter().map(|&i| &windows[i]).collect()
}

/// Trailing masks of random length `l_m` in `1..=k+1`; evaluation masks the
/// whole forecast span.
pub struct MmmpfTask<'a> {
    pub windows: &'a [Window],
    pub stats: &'a NormStats,
}

impl MmmpfTask<'_> {
    fn horizon(&self) -> usize {
        let w = &self.windows[0];
        w.len() - w.history
    }

    fn masked(&self, idx: &[usize], l_m: usize, rng: &mut ChaCha8Rng) -> Result<TaskBatch> {
        let mb = apply_mask(&select(self.windows, idx), l_m, rng, self.stats)?;
        Ok(TaskBatch {
            mask: mb.input.mask.clone(),
            input: mb.input,
            truth: mb.truth,
        })
    }
}

impl TrainingTask for MmmpfTask<'_> {
    fn len(&self) -> usize {
        self.windows.len()
    }

    fn batch(&self, idx: &[usize], rng: &mut ChaCha8Rng) -> Result<TaskBatch> {
        let l_m = crate::windowing::sample_mask_length(rng, self.horizon());
        self.masked(idx, l_m, rng)
    }

    fn eval_batch(&self, idx: &[usize], rng: &mut ChaCha8Rng) -> Result<TaskBatch> {
        self.masked(idx, self.horizon(), rng)
    }
}

/// Windows of length `T + 1`: the first `T` steps are input, the output at
/// the last input step is scored against step `T`.
pub struct RsfTask<'a> {
    pub windows: &'a [Window],
}

impl TrainingTask for RsfTask<'_> {
    fn len(&self) -> usize {
        self.windows.len()
    }

    fn batch(&self, idx: &[usize], _rng: &mut ChaCha8Rng) -> Result<TaskBatch> {
        let ws = select(self.windows, idx);
        let t = ws[0].history;
        if ws.iter().any(|w| w.len() != t + 1) {
            return Err(Error::Layout(format!("one-step windows must have length {}", t + 1)));
        }
        let input = SequenceBatch::from_windows(&ws, t)?;
        let m = ws[0].targets.ncols();
        let mut truth = Array3::zeros((ws.len(), t, m));
        for (b, w) in ws.iter().enumerate() {
            truth.slice_mut(s![b, t - 1, ..]).assign(&w.targets.row(t));
        }
        let mut mask = vec![false; t];
        mask[t - 1] = true;
        Ok(TaskBatch { input, truth, mask })
    }
}

/// History-only input of `T` steps; every forecast step is scored.
pub struct DmfTask<'a> {
    pub windows: &'a [Window],
}

impl TrainingTask for DmfTask<'_> {
    fn len(&self) -> usize {
        self.windows.len()
    }

    fn batch(&self, idx: &[usize], _rng: &mut ChaCha8Rng) -> Result<TaskBatch> {
        let ws = select(self.windows, idx);
        let t = ws[0].history;
        let input = SequenceBatch::from_windows(&ws, t)?;
        let horizon = ws[0].len() - t;
        let m = ws[0].targets.ncols();
        let mut truth = Array3::zeros((ws.len(), horizon, m));
        for (b, w) in ws.iter().enumerate() {
            truth.slice_mut(s![b, .., ..]).assign(&w.targets.slice(s![t.., ..]));
        }
        Ok(TaskBatch {
            input,
            truth,
            mask: vec![true; horizon],
        })
    }
}

/// Individual days as length-1 sequences.
pub struct SbfTask<'a> {
    pub panel: &'a NormalizedPanel,
}

impl TrainingTask for SbfTask<'_> {
    fn len(&self) -> usize {
        self.panel.len()
    }

    fn batch(&self, idx: &[usize], _rng: &mut ChaCha8Rng) -> Result<TaskBatch> {
        let p = self.panel.predictors.ncols();
        let m = self.panel.targets.ncols();
        let b = idx.len();
        let mut predictors = Array3::zeros((b, 1, p));
        let mut truth = Array3::zeros((b, 1, m));
        for (k, &i) in idx.iter().enumerate() {
            predictors.slice_mut(s![k, 0, ..]).assign(&self.panel.predictors.row(i));
            truth.slice_mut(s![k, 0, ..]).assign(&self.panel.targets.row(i));
        }
        Ok(TaskBatch {
            input: SequenceBatch {
                calendar: idx.iter().map(|&i| self.panel.calendar[i]).collect(),
                predictors,
                // targets are not model inputs for this formulation
                targets: Array3::zeros((b, 1, m)),
                mask: vec![true],
            },
            truth,
            mask: vec![true],
        })
    }
}

/// Mean loss over every sample of `task`, batch-weighted.
pub fn evaluate<T: TrainingTask>(model: &SequenceModel, task: &T, batch_size: usize, seed: u64) -> Result<f64> {
    let mut rng = stream(seed, VALIDATION_STREAM);
    let idx: Vec<usize> = (0..task.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(batch_size.max(1)) {
        let tb = task.eval_batch(chunk, &mut rng)?;
        let pred = model.forward(&tb.input)?;
        total += masked_quantile_loss(pred.view(), tb.truth.view(), &tb.mask, &model.quantile_levels)? * chunk.len() as f64;
    }
    Ok(total / task.len() as f64)
}

/// Shared mini-batch loop; returns the best-validation parameters.
fn train_loop<T: TrainingTask>(
    mut model: SequenceModel,
    train: &T,
    validation: &T,
    config: &TrainingConfig,
) -> Result<(SequenceModel, TrainingReport)> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Data("no training samples".into()));
    }
    if validation.is_empty() {
        return Err(Error::Data("no validation samples".into()));
    }
    let taus = model.quantile_levels.clone();
    let mut rng = stream(config.seed, TRAIN_STREAM);
    let mut opt = Adam::new(config.learning_rate as f32);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut records = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, SequenceModel)> = None;

    for epoch in 1..=config.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let tb = train.batch(chunk, &mut rng)?;
            let (pred, cache) = model.forward_train(&tb.input, &mut rng)?;
            let (loss, grad) = masked_quantile_loss_grad(pred.view(), tb.truth.view(), &tb.mask, &taus)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, batch: bi + 1, loss });
            }
            model.zero_grad();
            model.backward(&cache, &grad)?;
            let mut params = model.params_mut();
            let norm = if config.grad_clip > 0.0 {
                clip_grad_norm(&mut params, config.grad_clip as f32)
            } else {
                grad_norm(&params)
            };
            if !norm.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: bi + 1,
                    loss: norm as f64,
                });
            }
            opt.step(&mut params);
            loss_sum += loss * chunk.len() as f64;
        }
        let train_loss = loss_sum / train.len() as f64;
        let validation_loss = evaluate(&model, validation, config.batch_size, config.seed)?;
        if !validation_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                batch: 0,
                loss: validation_loss,
            });
        }
        log::debug!("epoch {epoch}: train {train_loss:.6} validation {validation_loss:.6}");
        if best.as_ref().is_none_or(|(_, b, _)| validation_loss < *b) {
            best = Some((epoch, validation_loss, model.clone()));
        }
        records.push(EpochRecord {
            epoch,
            train_loss,
            validation_loss,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
    }
    let (best_epoch, best_validation_loss, best_model) = best.expect("at least one epoch");
    log::info!(
        "{} {}: best validation loss {best_validation_loss:.6} at epoch {best_epoch}",
        model.architecture,
        config.method
    );
    let report = TrainingReport {
        method: config.method,
        architecture: model.architecture,
        parameters: model.num_parameters(),
        grad_clip: config.grad_clip,
        epochs: records,
        best_epoch,
        best_validation_loss,
    };
    Ok((best_model, report))
}

fn expect_method(config: &TrainingConfig, method: Method) -> Result<()> {
    if config.method != method {
        return Err(Error::Config(format!(
            "trainer for {method} called with method {}",
            config.method
        )));
    }
    Ok(())
}

pub fn train_mmmpf(
    model: SequenceModel,
    train: &[Window],
    validation: &[Window],
    stats: &NormStats,
    config: &TrainingConfig,
) -> Result<(SequenceModel, TrainingReport)> {
    expect_method(config, Method::Mmmpf)?;
    if model.layout.head != HeadKind::PerStep || !model.layout.target_inputs {
        return Err(Error::Layout("masked training needs a per-step model reading target channels".into()));
    }
    train_loop(
        model,
        &MmmpfTask { windows: train, stats },
        &MmmpfTask { windows: validation, stats },
        config,
    )
}

/// `train` and `validation` hold windows of length `T + 1`.
pub fn train_rsf(
    model: SequenceModel,
    train: &[Window],
    validation: &[Window],
    config: &TrainingConfig,
) -> Result<(SequenceModel, TrainingReport)> {
    expect_method(config, Method::Rsf)?;
    if model.layout.head != HeadKind::PerStep || !model.layout.target_inputs {
        return Err(Error::Layout("one-step training needs a per-step model reading target channels".into()));
    }
    train_loop(model, &RsfTask { windows: train }, &RsfTask { windows: validation }, config)
}

pub fn train_dmf(
    model: SequenceModel,
    train: &[Window],
    validation: &[Window],
    config: &TrainingConfig,
) -> Result<(SequenceModel, TrainingReport)> {
    expect_method(config, Method::Dmf)?;
    match (model.layout.head, train.first()) {
        (HeadKind::Direct { history, horizon }, Some(w)) if w.history == history && w.len() == history + horizon => {}
        (HeadKind::Direct { .. }, None) => return Err(Error::Data("no training samples".into())),
        _ => return Err(Error::Layout("direct training needs a direct-head model matching the windows".into())),
    }
    train_loop(model, &DmfTask { windows: train }, &DmfTask { windows: validation }, config)
}

/// Per-day neural regressor trained with the quantile loss.
pub fn train_sbf(
    model: SequenceModel,
    train: &NormalizedPanel,
    validation: &NormalizedPanel,
    config: &TrainingConfig,
) -> Result<(SequenceModel, TrainingReport)> {
    expect_method(config, Method::Sbf)?;
    if model.layout.target_inputs || model.layout.head != HeadKind::PerStep {
        return Err(Error::Layout("per-day regressors read predictors only".into()));
    }
    train_loop(model, &SbfTask { panel: train }, &SbfTask { panel: validation }, config)
}

/// Least-squares fit of a linear variant on every training day.
pub fn fit_sbf_linear(config: &ModelConfig, train: &NormalizedPanel) -> Result<LinearModel> {
    LinearModel::fit(
        config.architecture,
        &config.linear,
        &config.quantile_levels,
        &train.calendar,
        train.predictors.view(),
        train.targets.view(),
    )
}

/// Mean pinball loss of a linear model, summed over levels, in normalized units.
fn linear_validation_loss(model: &LinearModel, panel: &NormalizedPanel) -> Result<f64> {
    let pred = model.predict(&panel.calendar, panel.predictors.view())?;
    let pred = pred.mapv(|v| v as f32).insert_axis(Axis(1));
    let truth = panel.targets.view().insert_axis(Axis(1));
    masked_quantile_loss(pred.view(), truth.view(), &[true], &model.quantile_levels)
}

fn sequence_layout(config: &ModelConfig, table: &FeatureTable, head: HeadKind, target_inputs: bool) -> InputLayout {
    InputLayout {
        n_predictors: table.n_predictors(),
        n_targets: table.n_zones(),
        target_inputs,
        mask_indicator: config.mask_indicator && target_inputs,
        head,
    }
}

fn windows_or_error(table: &FeatureTable, spec: &WindowSpec, stats: &NormStats, what: &str) -> Result<Vec<Window>> {
    let w = make_windows(table, spec, stats)?;
    if w.is_empty() {
        return Err(Error::Data(format!(
            "{what} table of {} days yields no windows of length {}",
            table.len(),
            spec.len()
        )));
    }
    Ok(w)
}

/// Normalizes with training statistics, builds the model the method needs,
/// trains it and packages a checkpoint.
pub fn fit(
    model_config: &ModelConfig,
    training: &TrainingConfig,
    spec: &WindowSpec,
    train: &FeatureTable,
    validation: &FeatureTable,
) -> Result<(Checkpoint, TrainingReport)> {
    model_config.validate()?;
    training.validate()?;
    spec.validate()?;
    let arch = model_config.architecture;
    let method = training.method;
    match method {
        Method::Mmmpf | Method::Rsf | Method::Dmf if !arch.is_sequence() => {
            return Err(Error::Config(format!(
                "{method} needs a sequence backbone (lstm, tcn, transformer), got {arch}"
            )))
        }
        Method::Sbf if !(arch.is_linear() || arch == Architecture::Fcnn) => {
            return Err(Error::Config(format!(
                "sbf needs fcnn or a linear variant, got {arch}"
            )))
        }
        _ => {}
    }
    if train.zones != validation.zones {
        return Err(Error::Data("training and validation tables cover different zones".into()));
    }
    let stats = compute_norm_stats(train)?;
    let (regressor, report) = match method {
        Method::Mmmpf => {
            let tw = windows_or_error(train, spec, &stats, "training")?;
            let vw = windows_or_error(validation, spec, &stats, "validation")?;
            let layout = sequence_layout(model_config, train, HeadKind::PerStep, true);
            let model = build_model(model_config, &layout, training.seed)?;
            let (m, r) = train_mmmpf(model, &tw, &vw, &stats, training)?;
            (Regressor::Sequence(m), r)
        }
        Method::Rsf => {
            let one_step = WindowSpec::new(spec.history, 1).with_stride(spec.stride);
            let tw = windows_or_error(train, &one_step, &stats, "training")?;
            let vw = windows_or_error(validation, &one_step, &stats, "validation")?;
            let layout = sequence_layout(model_config, train, HeadKind::PerStep, true);
            let model = build_model(model_config, &layout, training.seed)?;
            let (m, r) = train_rsf(model, &tw, &vw, training)?;
            (Regressor::Sequence(m), r)
        }
        Method::Dmf => {
            let tw = windows_or_error(train, spec, &stats, "training")?;
            let vw = windows_or_error(validation, spec, &stats, "validation")?;
            let head = HeadKind::Direct {
                history: spec.history,
                horizon: spec.horizon,
            };
            let layout = sequence_layout(model_config, train, head, true);
            let model = build_model(model_config, &layout, training.seed)?;
            let (m, r) = train_dmf(model, &tw, &vw, training)?;
            (Regressor::Sequence(m), r)
        }
        Method::Sbf => {
            let tp = NormalizedPanel::new(train, &stats)?;
            let vp = NormalizedPanel::new(validation, &stats)?;
            if arch.is_linear() {
                let model = fit_sbf_linear(model_config, &tp)?;
                let loss = linear_validation_loss(&model, &vp)?;
                let report = TrainingReport {
                    method,
                    architecture: arch,
                    parameters: model.coefficients.len(),
                    grad_clip: 0.0,
                    epochs: Vec::new(),
                    best_epoch: 0,
                    best_validation_loss: loss,
                };
                (Regressor::Linear(model), report)
            } else {
                let layout = sequence_layout(model_config, train, HeadKind::PerStep, false);
                let model = build_model(model_config, &layout, training.seed)?;
                let (m, r) = train_sbf(model, &tp, &vp, training)?;
                (Regressor::Sequence(m), r)
            }
        }
    };
    let checkpoint = Checkpoint::new(
        method,
        model_config.clone(),
        spec.clone(),
        stats,
        train.zones.clone(),
        regressor,
    );
    Ok((checkpoint, report))
}
