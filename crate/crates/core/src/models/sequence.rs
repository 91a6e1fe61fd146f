use ndarray::{s, Array2, Array4, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Architecture, ModelConfig};
use crate::dataio::CALENDAR_CARDINALITY;
use crate::error::{Error, Result};
use crate::nn::{
    relu_backward_inplace, sinusoidal_positions, Embedding, EncoderLayer, EncoderLayerCache, Linear, Lstm, LstmCache,
    Param, Parameters, TemporalBlock, TemporalBlockCache,
};
use crate::windowing::SequenceBatch;

/// How outputs relate to input steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum HeadKind {
    /// One prediction per input step.
    PerStep,
    /// `horizon` predictions read off the final hidden state of a
    /// `history`-step input.
    Direct { history: usize, horizon: usize },
}

/// Channels a model consumes besides the calendar embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputLayout {
    pub n_predictors: usize,
    pub n_targets: usize,
    /// Whether target values (observed or masked fill) are input channels.
    pub target_inputs: bool,
    /// Appends a 0/1 channel that is 1 on masked steps.
    pub mask_indicator: bool,
    pub head: HeadKind,
}

impl InputLayout {
    pub fn feature_dim(&self, embedding_dim: usize) -> usize {
        3 * embedding_dim
            + self.n_predictors
            + if self.target_inputs { self.n_targets } else { 0 }
            + usize::from(self.mask_indicator)
    }

    /// Steps emitted per sequence of `len` input steps.
    pub fn output_len(&self, len: usize) -> usize {
        match self.head {
            HeadKind::PerStep => len,
            HeadKind::Direct { horizon, .. } => horizon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum Backbone {
    Lstm(Vec<Lstm>),
    Tcn(Vec<TemporalBlock>),
    Transformer { input: Linear, layers: Vec<EncoderLayer> },
    Mlp(Vec<Linear>),
}

#[derive(Debug, Clone)]
enum BackboneCache {
    Lstm(Vec<LstmCache>),
    Tcn(Vec<TemporalBlockCache>),
    Transformer(Vec<EncoderLayerCache>),
    /// Inputs to every layer followed by the final activation.
    Mlp(Vec<Array2<f32>>),
}

impl Backbone {
    fn output_dim(&self, input: usize) -> usize {
        match self {
            Backbone::Lstm(l) => l.last().map_or(input, |l| l.hidden()),
            Backbone::Tcn(b) => b.last().map_or(input, |b| b.channels()),
            Backbone::Transformer { input, .. } => input.output_dim(),
            Backbone::Mlp(l) => l.last().map_or(input, |l| l.output_dim()),
        }
    }

    fn forward<R: Rng + ?Sized>(
        &self,
        x: Array2<f32>,
        len: usize,
        batch: usize,
        mut rng: Option<&mut R>,
    ) -> (Array2<f32>, BackboneCache) {
        match self {
            Backbone::Lstm(layers) => {
                let mut h = x;
                let mut caches = Vec::with_capacity(layers.len());
                for l in layers {
                    let (next, c) = l.forward(h.view(), len, batch);
                    caches.push(c);
                    h = next;
                }
                (h, BackboneCache::Lstm(caches))
            }
            Backbone::Tcn(blocks) => {
                let mut h = x;
                let mut caches = Vec::with_capacity(blocks.len());
                for b in blocks {
                    let (next, c) = b.forward(h.view(), len, batch, rng.as_deref_mut());
                    caches.push(c);
                    h = next;
                }
                (h, BackboneCache::Tcn(caches))
            }
            Backbone::Transformer { input, layers } => {
                let mut h = input.forward(x.view());
                let pe = sinusoidal_positions(len, h.ncols());
                for t in 0..len {
                    let mut blk = h.slice_mut(s![t * batch..(t + 1) * batch, ..]);
                    blk += &pe.row(t);
                }
                let mut caches = Vec::with_capacity(layers.len() + 1);
                for l in layers {
                    let (next, c) = l.forward(h.view(), len, batch, rng.as_deref_mut());
                    caches.push(c);
                    h = next;
                }
                (h, BackboneCache::Transformer(caches))
            }
            Backbone::Mlp(layers) => {
                let mut acts = Vec::with_capacity(layers.len() + 1);
                let mut h = x;
                for l in layers {
                    let mut next = l.forward(h.view());
                    next.mapv_inplace(|v| v.max(0.0));
                    acts.push(h);
                    h = next;
                }
                acts.push(h.clone());
                (h, BackboneCache::Mlp(acts))
            }
        }
    }

    fn backward(&mut self, cache: &BackboneCache, input: ArrayView2<f32>, dy: Array2<f32>) -> Array2<f32> {
        match (self, cache) {
            (Backbone::Lstm(layers), BackboneCache::Lstm(caches)) => {
                let mut d = dy;
                for (l, c) in layers.iter_mut().zip(caches).rev() {
                    d = l.backward(c, d.view());
                }
                d
            }
            (Backbone::Tcn(blocks), BackboneCache::Tcn(caches)) => {
                let mut d = dy;
                for (b, c) in blocks.iter_mut().zip(caches).rev() {
                    d = b.backward(c, d.view());
                }
                d
            }
            (Backbone::Transformer { input: proj, layers }, BackboneCache::Transformer(caches)) => {
                let mut d = dy;
                for (l, c) in layers.iter_mut().zip(caches).rev() {
                    d = l.backward(c, d.view());
                }
                proj.backward(input, d.view())
            }
            (Backbone::Mlp(layers), BackboneCache::Mlp(acts)) => {
                let mut d = dy;
                for (i, l) in layers.iter_mut().enumerate().rev() {
                    relu_backward_inplace(&mut d, acts[i + 1].view());
                    d = l.backward(acts[i].view(), d.view());
                }
                d
            }
            _ => unreachable!("cache built by a different backbone"),
        }
    }
}

impl Parameters for Backbone {
    fn visit<'a>(&'a self, out: &mut Vec<&'a Param>) {
        match self {
            Backbone::Lstm(l) => l.iter().for_each(|l| l.visit(out)),
            Backbone::Tcn(b) => b.iter().for_each(|b| b.visit(out)),
            Backbone::Transformer { input, layers } => {
                input.visit(out);
                layers.iter().for_each(|l| l.visit(out));
            }
            Backbone::Mlp(l) => l.iter().for_each(|l| l.visit(out)),
        }
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        match self {
            Backbone::Lstm(l) => l.iter_mut().for_each(|l| l.visit_mut(out)),
            Backbone::Tcn(b) => b.iter_mut().for_each(|b| b.visit_mut(out)),
            Backbone::Transformer { input, layers } => {
                input.visit_mut(out);
                layers.iter_mut().for_each(|l| l.visit_mut(out));
            }
            Backbone::Mlp(l) => l.iter_mut().for_each(|l| l.visit_mut(out)),
        }
    }
}

/// Calendar embeddings, backbone and output head for a set of quantile levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Branch {
    embeddings: [Embedding; 3],
    backbone: Backbone,
    head: Linear,
}

#[derive(Debug, Clone)]
struct BranchCache {
    features: Array2<f32>,
    backbone: BackboneCache,
    head_input: Array2<f32>,
}

impl Parameters for Branch {
    fn visit<'a>(&'a self, out: &mut Vec<&'a Param>) {
        self.embeddings.iter().for_each(|e| e.visit(out));
        self.backbone.visit(out);
        self.head.visit(out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.embeddings.iter_mut().for_each(|e| e.visit_mut(out));
        self.backbone.visit_mut(out);
        self.head.visit_mut(out);
    }
}

/// A neural quantile forecaster producing `(batch, steps, targets, quantiles)`
/// in normalized units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceModel {
    pub architecture: Architecture,
    pub layout: InputLayout,
    pub quantile_levels: Vec<f64>,
    branches: Vec<Branch>,
}

/// Activations retained by a training forward pass.
#[derive(Debug, Clone)]
pub struct ModelCache {
    len: usize,
    batch: usize,
    /// Time-major calendar indices, `t * batch + b`.
    calendar: Vec<[usize; 3]>,
    branches: Vec<BranchCache>,
}

/// Builds a freshly initialized network; identical seeds give identical weights.
pub fn build_model(config: &ModelConfig, layout: &InputLayout, seed: u64) -> Result<SequenceModel> {
    config.validate()?;
    let arch = config.architecture;
    if arch.is_linear() {
        return Err(Error::Config(format!(
            "{arch} is a linear regressor; fit it with the linear solver"
        )));
    }
    if arch == Architecture::Fcnn && layout.head != HeadKind::PerStep {
        return Err(Error::Config("fcnn only supports per-step outputs".into()));
    }
    if let HeadKind::Direct { history, horizon } = layout.head {
        if history == 0 || horizon == 0 {
            return Err(Error::Config("direct head needs positive history and horizon".into()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = config.quantile_levels.len();
    let (n_branches, per_branch) = if config.separate_quantile_models { (q, 1) } else { (1, q) };
    let e = config.embedding_dim;
    let input = layout.feature_dim(e);
    let outputs_per_step = layout.n_targets * per_branch;
    let head_out = match layout.head {
        HeadKind::PerStep => outputs_per_step,
        HeadKind::Direct { horizon, .. } => horizon * outputs_per_step,
    };

    let mut branches = Vec::with_capacity(n_branches);
    for _ in 0..n_branches {
        let embeddings = [
            Embedding::new(&mut rng, CALENDAR_CARDINALITY[0], e),
            Embedding::new(&mut rng, CALENDAR_CARDINALITY[1], e),
            Embedding::new(&mut rng, CALENDAR_CARDINALITY[2], e),
        ];
        let backbone = match arch {
            Architecture::Lstm => Backbone::Lstm(
                (0..config.lstm.layers)
                    .map(|i| Lstm::new(&mut rng, if i == 0 { input } else { config.lstm.hidden }, config.lstm.hidden))
                    .collect(),
            ),
            Architecture::Tcn => {
                let t = &config.tcn;
                Backbone::Tcn(
                    (0..t.levels)
                        .map(|i| {
                            let cin = if i == 0 { input } else { t.channels };
                            TemporalBlock::new(&mut rng, cin, t.channels, t.kernel, 1 << i, t.convs_per_block, t.dropout)
                        })
                        .collect(),
                )
            }
            Architecture::Transformer => {
                let t = &config.transformer;
                Backbone::Transformer {
                    input: Linear::new(&mut rng, input, t.d_model),
                    layers: (0..t.layers)
                        .map(|_| EncoderLayer::new(&mut rng, t.d_model, t.ff_dim, t.heads, t.dropout))
                        .collect(),
                }
            }
            Architecture::Fcnn => {
                let mut width = input;
                Backbone::Mlp(
                    config
                        .fcnn
                        .hidden
                        .iter()
                        .map(|&h| {
                            let l = Linear::new(&mut rng, width, h);
                            width = h;
                            l
                        })
                        .collect(),
                )
            }
            _ => unreachable!(),
        };
        let hidden = backbone.output_dim(input);
        let head = Linear::new(&mut rng, hidden, head_out);
        branches.push(Branch {
            embeddings,
            backbone,
            head,
        });
    }
    let model = SequenceModel {
        architecture: arch,
        layout: layout.clone(),
        quantile_levels: config.quantile_levels.clone(),
        branches,
    };
    log::info!("built {arch} model with {} parameters", model.num_parameters());
    Ok(model)
}

impl SequenceModel {
    pub fn n_quantiles(&self) -> usize {
        self.quantile_levels.len()
    }

    fn quantiles_per_branch(&self) -> usize {
        self.n_quantiles() / self.branches.len()
    }

    fn check_batch(&self, batch: &SequenceBatch) -> Result<()> {
        let (b, len, p) = batch.predictors.dim();
        let l = &self.layout;
        if b == 0 || len == 0 {
            return Err(Error::Layout("empty batch".into()));
        }
        if p != l.n_predictors {
            return Err(Error::Layout(format!("expected {} predictors, got {p}", l.n_predictors)));
        }
        if batch.targets.dim() != (b, len, l.n_targets) {
            return Err(Error::Layout(format!(
                "target block {:?} does not match {} targets over {len} steps",
                batch.targets.dim(),
                l.n_targets
            )));
        }
        if batch.calendar.len() != b * len || batch.mask.len() != len {
            return Err(Error::Layout("calendar or mask length does not match the batch".into()));
        }
        if let HeadKind::Direct { history, .. } = l.head {
            if len != history {
                return Err(Error::Layout(format!(
                    "direct model reads exactly {history} history steps, got {len}"
                )));
            }
        }
        Ok(())
    }

    /// Inference pass: dropout disabled.
    pub fn forward(&self, batch: &SequenceBatch) -> Result<Array4<f32>> {
        Ok(self.forward_impl::<ChaCha8Rng>(batch, None)?.0)
    }

    /// Training pass with dropout drawn from `rng`; the cache feeds [`Self::backward`].
    pub fn forward_train<R: Rng + ?Sized>(
        &self,
        batch: &SequenceBatch,
        rng: &mut R,
    ) -> Result<(Array4<f32>, ModelCache)> {
        self.forward_impl(batch, Some(rng))
    }

    /// Training-mode bookkeeping without dropout; used where exact replay matters.
    pub fn forward_cached(&self, batch: &SequenceBatch) -> Result<(Array4<f32>, ModelCache)> {
        self.forward_impl::<ChaCha8Rng>(batch, None)
    }

    fn forward_impl<R: Rng + ?Sized>(
        &self,
        batch: &SequenceBatch,
        mut rng: Option<&mut R>,
    ) -> Result<(Array4<f32>, ModelCache)> {
        self.check_batch(batch)?;
        let (b, len, _) = batch.predictors.dim();
        let calendar: Vec<[usize; 3]> = (0..len * b)
            .map(|row| batch.calendar[(row % b) * len + row / b])
            .collect();
        let base = self.raw_features(batch);
        let m = self.layout.n_targets;
        let qb = self.quantiles_per_branch();
        let out_len = self.layout.output_len(len);
        let mut out = Array4::zeros((b, out_len, m, self.n_quantiles()));
        let mut caches = Vec::with_capacity(self.branches.len());

        for (k, branch) in self.branches.iter().enumerate() {
            let e = branch.embeddings[0].dim();
            let mut features = Array2::zeros((len * b, 3 * e + base.ncols()));
            for (c, emb) in branch.embeddings.iter().enumerate() {
                emb.forward_into(calendar.iter().map(|ix| ix[c]), &mut features, c * e);
            }
            features.slice_mut(s![.., 3 * e..]).assign(&base);
            let (hidden, bcache) = branch.backbone.forward(features.clone(), len, b, rng.as_deref_mut());
            let head_input = match self.layout.head {
                HeadKind::PerStep => hidden,
                HeadKind::Direct { .. } => hidden.slice(s![(len - 1) * b.., ..]).to_owned(),
            };
            let y = branch.head.forward(head_input.view());
            for bi in 0..b {
                for t in 0..out_len {
                    let (row, col0) = match self.layout.head {
                        HeadKind::PerStep => (t * b + bi, 0),
                        HeadKind::Direct { .. } => (bi, t * m * qb),
                    };
                    for j in 0..m {
                        for q in 0..qb {
                            out[[bi, t, j, k * qb + q]] = y[[row, col0 + j * qb + q]];
                        }
                    }
                }
            }
            caches.push(BranchCache {
                features,
                backbone: bcache,
                head_input,
            });
        }
        Ok((
            out,
            ModelCache {
                len,
                batch: b,
                calendar,
                branches: caches,
            },
        ))
    }

    /// Predictor, target and indicator channels, time-major.
    fn raw_features(&self, batch: &SequenceBatch) -> Array2<f32> {
        let (b, len, p) = batch.predictors.dim();
        let l = &self.layout;
        let width = l.feature_dim(0);
        let m = l.n_targets;
        let mut x = Array2::zeros((len * b, width));
        for t in 0..len {
            for bi in 0..b {
                let mut row = x.row_mut(t * b + bi);
                row.slice_mut(s![..p]).assign(&batch.predictors.slice(s![bi, t, ..]));
                let mut col = p;
                if l.target_inputs {
                    row.slice_mut(s![col..col + m]).assign(&batch.targets.slice(s![bi, t, ..]));
                    col += m;
                }
                if l.mask_indicator && batch.mask[t] {
                    row[col] = 1.0;
                }
            }
        }
        x
    }

    /// Accumulates parameter gradients for `grad`, shaped like the forward output.
    pub fn backward(&mut self, cache: &ModelCache, grad: &Array4<f32>) -> Result<()> {
        let (b, len) = (cache.batch, cache.len);
        let m = self.layout.n_targets;
        let qb = self.quantiles_per_branch();
        let out_len = self.layout.output_len(len);
        if grad.dim() != (b, out_len, m, self.n_quantiles()) {
            return Err(Error::Layout(format!("gradient shape {:?} does not match the output", grad.dim())));
        }
        let head = self.layout.head;
        for (k, (branch, bc)) in self.branches.iter_mut().zip(&cache.branches).enumerate() {
            let mut dy = Array2::zeros((bc.head_input.nrows(), branch.head.output_dim()));
            for bi in 0..b {
                for t in 0..out_len {
                    let (row, col0) = match head {
                        HeadKind::PerStep => (t * b + bi, 0),
                        HeadKind::Direct { .. } => (bi, t * m * qb),
                    };
                    for j in 0..m {
                        for q in 0..qb {
                            dy[[row, col0 + j * qb + q]] = grad[[bi, t, j, k * qb + q]];
                        }
                    }
                }
            }
            let dh = branch.head.backward(bc.head_input.view(), dy.view());
            let dhidden = match head {
                HeadKind::PerStep => dh,
                HeadKind::Direct { .. } => {
                    let mut full = Array2::zeros((len * b, dh.ncols()));
                    full.slice_mut(s![(len - 1) * b.., ..]).assign(&dh);
                    full
                }
            };
            let dfeat = branch.backbone.backward(&bc.backbone, bc.features.view(), dhidden);
            let e = branch.embeddings[0].dim();
            for (c, emb) in branch.embeddings.iter_mut().enumerate() {
                emb.backward_from(cache.calendar.iter().map(|ix| ix[c]), dfeat.view(), c * e);
            }
        }
        Ok(())
    }
}

impl Parameters for SequenceModel {
    fn visit<'a>(&'a self, out: &mut Vec<&'a Param>) {
        self.branches.iter().for_each(|b| b.visit(out));
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param>) {
        self.branches.iter_mut().for_each(|b| b.visit_mut(out));
    }
}
