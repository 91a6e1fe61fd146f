use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{Architecture, ModelConfig};
use super::linear::LinearModel;
use super::sequence::SequenceModel;
use crate::error::{Error, Result};
use crate::training::Method;
use crate::windowing::{NormStats, WindowSpec};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regressor {
    Sequence(SequenceModel),
    Linear(LinearModel),
}

/// Everything needed to forecast with a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub method: Method,
    pub config: ModelConfig,
    pub window: WindowSpec,
    pub stats: NormStats,
    pub zones: Vec<String>,
    pub regressor: Regressor,
}

impl Checkpoint {
    pub fn new(
        method: Method,
        config: ModelConfig,
        window: WindowSpec,
        stats: NormStats,
        zones: Vec<String>,
        regressor: Regressor,
    ) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            method,
            config,
            window,
            stats,
            zones,
            regressor,
        }
    }

    pub fn architecture(&self) -> Architecture {
        self.config.architecture
    }

    pub fn quantile_levels(&self) -> &[f64] {
        &self.config.quantile_levels
    }

    /// `"{architecture}-{method}"`, e.g. `lstm-mmmpf`.
    pub fn tag(&self) -> String {
        format!("{}-{}", self.architecture(), self.method)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        serde_json::to_writer(&mut out, self)?;
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            version: Option<u32>,
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let header: Header = serde_json::from_str(&text)?;
        if header.version != Some(CHECKPOINT_VERSION) {
            return Err(Error::Data(format!(
                "{}: unsupported checkpoint version {:?}, expected {CHECKPOINT_VERSION}",
                path.display(),
                header.version
            )));
        }
        Ok(serde_json::from_str(&text)?)
    }
}
