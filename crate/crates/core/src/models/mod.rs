//! Forecasting networks and linear regressors.
//!
//! Neural models share one shape contract: a [`SequenceBatch`] in, a
//! `(batch, steps, targets, quantiles)` array of normalized values out.
//! Calendar indices pass through learned embeddings; predictors, target
//! channels and the optional mask indicator are concatenated after them.
//!
//! [`SequenceBatch`]: crate::windowing::SequenceBatch

mod checkpoint;
mod config;
mod linear;
mod sequence;

pub use checkpoint::{Checkpoint, Regressor, CHECKPOINT_VERSION};
pub use config::{
    validate_quantiles, Architecture, FcnnConfig, LinearConfig, LstmConfig, ModelConfig, TcnConfig,
    TransformerConfig,
};
pub use linear::{design_matrix, design_width, empirical_quantile, fit_lasso, fit_ols, fit_ridge, LinearModel};
pub use sequence::{build_model, HeadKind, InputLayout, ModelCache, SequenceModel};
