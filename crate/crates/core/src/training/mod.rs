//! Quantile losses and the four training formulations.
//!
//! * `mmmpf`: random-length trailing masks over full windows, loss on the
//!   masked steps only.
//! * `rsf`: one-step-ahead from the previous `T` steps, teacher forced.
//! * `dmf`: all forecast steps at once from the `T` history steps.
//! * `sbf`: a per-day map from same-day predictors to targets.
//!
//! Every neural trainer shares one loop: shuffled mini-batches, Adam,
//! global-norm gradient clipping and best-validation checkpoint selection.
//! A single seeded stream drives shuffling, masking, fill values and
//! dropout, so runs replay bitwise.

mod loss;
mod trainer;

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use loss::{masked_quantile_loss, masked_quantile_loss_grad, mean_pinball_loss, pinball_gradient, pinball_loss};
pub use trainer::{
    fit, fit_sbf_linear, train_dmf, train_mmmpf, train_rsf, train_sbf, DmfTask, MmmpfTask, RsfTask, SbfTask,
    TrainingTask,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Mmmpf,
    Rsf,
    Dmf,
    Sbf,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Mmmpf, Method::Rsf, Method::Dmf, Method::Sbf];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Mmmpf => "mmmpf",
            Method::Rsf => "rsf",
            Method::Dmf => "dmf",
            Method::Sbf => "sbf",
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Method::Mmmpf => "MMMPF",
            Method::Rsf => "RSF",
            Method::Dmf => "DMF",
            Method::Sbf => "SBF",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.iter().find(|m| m.name() == s).copied().ok_or_else(|| {
            Error::Config(format!("unknown method {s:?}; expected one of mmmpf, rsf, dmf, sbf"))
        })
    }
}

fn default_learning_rate() -> f64 {
    0.001
}

fn default_batch_size() -> usize {
    1000
}

fn default_epochs() -> usize {
    1000
}

fn default_grad_clip() -> f64 {
    5.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub method: Method,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Full passes over the training samples.
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    #[serde(default = "default_grad_clip")]
    pub grad_clip: f64,
}

impl TrainingConfig {
    /// Full budget: batch 1000, 1000 epochs.
    pub fn reference(method: Method) -> Self {
        TrainingConfig {
            method,
            learning_rate: default_learning_rate(),
            batch_size: default_batch_size(),
            epochs: default_epochs(),
            seed: 0,
            grad_clip: default_grad_clip(),
        }
    }

    /// Desk-scale budget: batch 128, 100 epochs.
    pub fn desk(method: Method) -> Self {
        TrainingConfig {
            batch_size: 128,
            epochs: 100,
            ..TrainingConfig::reference(method)
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::Config("grad_clip must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub method: Method,
    pub architecture: crate::models::Architecture,
    pub parameters: usize,
    pub grad_clip: f64,
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept; 0 for closed-form fits.
    pub best_epoch: usize,
    pub best_validation_loss: f64,
}

impl TrainingReport {
    /// One JSON object per epoch, then a summary line.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for e in &self.epochs {
            serde_json::to_writer(&mut out, e)?;
            writeln!(out).map_err(|e| Error::io("<report>", e))?;
        }
        let summary = serde_json::json!({
            "method": self.method,
            "architecture": self.architecture,
            "parameters": self.parameters,
            "grad_clip": self.grad_clip,
            "best_epoch": self.best_epoch,
            "best_validation_loss": self.best_validation_loss,
        });
        serde_json::to_writer(&mut out, &summary)?;
        writeln!(out).map_err(|e| Error::io("<report>", e))?;
        Ok(())
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        self.write_jsonl(&mut out)?;
        out.flush().map_err(|e| Error::io(path, e))
    }
}
