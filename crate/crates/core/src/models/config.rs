use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    Lstm,
    Tcn,
    Transformer,
    Fcnn,
    LinearO,
    LinearRidge,
    LinearLasso,
}

impl Architecture {
    pub const ALL: [Architecture; 7] = [
        Architecture::Lstm,
        Architecture::Tcn,
        Architecture::Transformer,
        Architecture::Fcnn,
        Architecture::LinearO,
        Architecture::LinearRidge,
        Architecture::LinearLasso,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Architecture::Lstm => "lstm",
            Architecture::Tcn => "tcn",
            Architecture::Transformer => "transformer",
            Architecture::Fcnn => "fcnn",
            Architecture::LinearO => "linear-o",
            Architecture::LinearRidge => "linear-ridge",
            Architecture::LinearLasso => "linear-lasso",
        }
    }

    /// Short label used in reports.
    pub fn label(&self) -> &'static str {
        match self {
            Architecture::Lstm => "LSTM",
            Architecture::Tcn => "TCN",
            Architecture::Transformer => "Transformer",
            Architecture::Fcnn => "FCNN",
            Architecture::LinearO => "LR-O",
            Architecture::LinearRidge => "LR-R",
            Architecture::LinearLasso => "LR-L",
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(
            self,
            Architecture::LinearO | Architecture::LinearRidge | Architecture::LinearLasso
        )
    }

    /// Sequence backbones usable by the time-series trainers.
    pub fn is_sequence(&self) -> bool {
        matches!(self, Architecture::Lstm | Architecture::Tcn | Architecture::Transformer)
    }

    pub fn is_causal(&self) -> bool {
        matches!(self, Architecture::Lstm | Architecture::Tcn)
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL
            .iter()
            .find(|a| a.name() == s)
            .copied()
            .ok_or_else(|| {
                let names: Vec<_> = Architecture::ALL.iter().map(|a| a.name()).collect();
                Error::Config(format!("unknown architecture {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LstmConfig {
    pub layers: usize,
    pub hidden: usize,
}

impl Default for LstmConfig {
    fn default() -> Self {
        LstmConfig { layers: 2, hidden: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TcnConfig {
    /// Residual blocks; block `i` uses dilation `2^i`.
    pub levels: usize,
    pub channels: usize,
    pub kernel: usize,
    /// Causal convolutions inside each residual block.
    pub convs_per_block: usize,
    pub dropout: f32,
}

impl Default for TcnConfig {
    fn default() -> Self {
        TcnConfig {
            levels: 2,
            channels: 50,
            kernel: 3,
            convs_per_block: 2,
            dropout: 0.2,
        }
    }
}

impl TcnConfig {
    /// `1 + convs_per_block * sum_i (kernel - 1) * 2^i`
    pub fn receptive_field(&self) -> usize {
        1 + self.convs_per_block * (0..self.levels).map(|i| (self.kernel - 1) << i).sum::<usize>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub ff_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub dropout: f32,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            d_model: 64,
            ff_dim: 256,
            heads: 4,
            layers: 2,
            dropout: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FcnnConfig {
    pub hidden: Vec<usize>,
}

impl Default for FcnnConfig {
    fn default() -> Self {
        FcnnConfig { hidden: vec![50, 50] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinearConfig {
    /// Penalty on the squared coefficient norm.
    pub ridge_lambda: f64,
    /// Penalty on the absolute coefficient norm, per-sample scaled.
    pub lasso_alpha: f64,
}

impl Default for LinearConfig {
    fn default() -> Self {
        LinearConfig {
            ridge_lambda: 1.0,
            lasso_alpha: 0.01,
        }
    }
}

fn default_quantiles() -> Vec<f64> {
    vec![0.05, 0.5, 0.95]
}

fn default_embedding_dim() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    #[serde(default = "default_embedding_dim")]
    pub embedding_dim: usize,
    #[serde(default = "default_quantiles")]
    pub quantile_levels: Vec<f64>,
    /// Feed a 0/1 channel marking masked target steps.
    #[serde(default)]
    pub mask_indicator: bool,
    /// One independent network per quantile level instead of a shared head.
    #[serde(default)]
    pub separate_quantile_models: bool,
    #[serde(default)]
    pub lstm: LstmConfig,
    #[serde(default)]
    pub tcn: TcnConfig,
    #[serde(default)]
    pub transformer: TransformerConfig,
    #[serde(default)]
    pub fcnn: FcnnConfig,
    #[serde(default)]
    pub linear: LinearConfig,
}

impl ModelConfig {
    pub fn new(architecture: Architecture) -> Self {
        ModelConfig {
            architecture,
            embedding_dim: default_embedding_dim(),
            quantile_levels: default_quantiles(),
            mask_indicator: false,
            separate_quantile_models: false,
            lstm: LstmConfig::default(),
            tcn: TcnConfig::default(),
            transformer: TransformerConfig::default(),
            fcnn: FcnnConfig::default(),
            linear: LinearConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        validate_quantiles(&self.quantile_levels)?;
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be positive".into()));
        }
        let t = &self.transformer;
        if t.heads == 0 || t.d_model % t.heads != 0 {
            return Err(Error::Config(format!(
                "transformer d_model {} must be divisible by heads {}",
                t.d_model, t.heads
            )));
        }
        if self.lstm.layers == 0 || self.lstm.hidden == 0 {
            return Err(Error::Config("lstm needs at least one layer of positive width".into()));
        }
        if self.tcn.levels == 0 || self.tcn.kernel == 0 || self.tcn.convs_per_block == 0 {
            return Err(Error::Config("tcn needs positive levels, kernel and convs_per_block".into()));
        }
        for p in [self.tcn.dropout, self.transformer.dropout] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("dropout {p} outside [0, 1)")));
            }
        }
        if self.linear.ridge_lambda < 0.0 || self.linear.lasso_alpha < 0.0 {
            return Err(Error::Config("regularization strengths must be nonnegative".into()));
        }
        Ok(())
    }

    /// Index of the median level, if present.
    pub fn median_index(&self) -> Option<usize> {
        self.quantile_levels.iter().position(|q| (q - 0.5).abs() < 1e-12)
    }
}

pub fn validate_quantiles(levels: &[f64]) -> Result<()> {
    if levels.is_empty() {
        return Err(Error::Config("at least one quantile level is required".into()));
    }
    if levels.iter().any(|q| !(*q > 0.0 && *q < 1.0)) {
        return Err(Error::Config(format!("quantile levels {levels:?} must lie in (0, 1)")));
    }
    if levels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!("quantile levels {levels:?} must be strictly increasing")));
    }
    Ok(())
}
