//! Experiment configuration: one JSON document per experiment.

use std::path::{Path, PathBuf};

use maskcast::dataio::{
    downsample_daily_peak, generate_synthetic, ingest_hourly, split_by_days, split_dataset, DatasetSplit, FeatureTable,
    SyntheticSpec,
};
use maskcast::models::{Architecture, ModelConfig};
use maskcast::training::{Method, TrainingConfig};
use maskcast::windowing::WindowSpec;
use maskcast::{Error, Result};
use serde::{Deserialize, Serialize};

pub const CONFIG_VERSION: u32 = 1;

/// Where the daily panel comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    /// Raw hourly CSV files, ingested and downsampled on load.
    Files(Vec<PathBuf>),
    /// A daily dataset written by `ingest` or `synth`.
    Dataset(PathBuf),
    Synthetic(SyntheticSpec),
}

/// Optimizer settings; the seed comes from the top level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingOptions {
    pub method: Method,
    #[serde(default)]
    pub learning_rate: Option<f64>,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

impl TrainingOptions {
    /// Reference budget with any overrides applied.
    pub fn resolve(&self, method: Method, seed: u64) -> TrainingConfig {
        let base = TrainingConfig::reference(method).with_seed(seed);
        TrainingConfig {
            learning_rate: self.learning_rate.unwrap_or(base.learning_rate),
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            epochs: self.epochs.unwrap_or(base.epochs),
            grad_clip: self.grad_clip.unwrap_or(base.grad_clip),
            ..base
        }
    }
}

/// How the test span is carved out; exactly one field is set.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Calendar year held out for testing; earlier years train and validate.
    #[serde(default)]
    pub test_year: Option<i32>,
    /// Trailing days held out for testing.
    #[serde(default)]
    pub test_days: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    /// Directory name under the output root.
    pub name: String,
    pub seed: u64,
    pub data: DataSource,
    pub window: WindowSpec,
    /// Backbone for the sequence methods.
    pub model: ModelConfig,
    /// Per-day regressor for `sbf`.
    #[serde(default = "default_sbf_model")]
    pub sbf_model: ModelConfig,
    pub training: TrainingOptions,
    pub evaluation: EvaluationConfig,
    #[serde(default = "default_output")]
    pub output: PathBuf,
}

fn default_sbf_model() -> ModelConfig {
    ModelConfig::new(Architecture::LinearO)
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

/// Test rows of a table, preceded by enough context for every method.
pub struct TestSpan {
    pub table: FeatureTable,
    /// Row of the first test day within `table`.
    pub first_origin: usize,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} is not supported, expected {CONFIG_VERSION}",
                self.version
            )));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name == "." || self.name == ".." {
            return Err(Error::Config(format!("experiment name {:?} is not a plain directory name", self.name)));
        }
        self.window.validate()?;
        self.model.validate()?;
        self.sbf_model.validate()?;
        if !self.model.architecture.is_sequence() {
            return Err(Error::Config(format!(
                "model must be a sequence backbone (lstm, tcn, transformer), got {}",
                self.model.architecture
            )));
        }
        let sbf = self.sbf_model.architecture;
        if !(sbf.is_linear() || sbf == Architecture::Fcnn) {
            return Err(Error::Config(format!("sbf_model must be fcnn or a linear variant, got {sbf}")));
        }
        if self.sbf_model.quantile_levels != self.model.quantile_levels {
            return Err(Error::Config("model and sbf_model must share quantile levels".into()));
        }
        self.training.resolve(self.training.method, self.seed).validate()?;
        match (&self.evaluation.test_year, &self.evaluation.test_days) {
            (Some(_), None) | (None, Some(_)) => {}
            _ => return Err(Error::Config("evaluation needs exactly one of test_year and test_days".into())),
        }
        if let DataSource::Files(files) = &self.data {
            if files.is_empty() {
                return Err(Error::Config("data.files lists no files".into()));
            }
        }
        Ok(())
    }

    /// Model configuration trained for `method`.
    pub fn model_for(&self, method: Method) -> &ModelConfig {
        match method {
            Method::Sbf => &self.sbf_model,
            _ => &self.model,
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output.join(&self.name)
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.run_dir().join("checkpoints")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.run_dir().join("reports")
    }

    pub fn log_dir(&self) -> PathBuf {
        self.run_dir().join("logs")
    }

    pub fn load_table(&self) -> Result<FeatureTable> {
        match &self.data {
            DataSource::Files(files) => downsample_daily_peak(&ingest_hourly(files)?),
            DataSource::Dataset(path) => FeatureTable::read_csv(path),
            DataSource::Synthetic(spec) => {
                spec.validate_for_window(self.window.len())?;
                generate_synthetic(spec)
            }
        }
    }

    pub fn split(&self, table: &FeatureTable) -> Result<DatasetSplit> {
        match (self.evaluation.test_year, self.evaluation.test_days) {
            (Some(year), _) => split_dataset(table, year - 1, year),
            (None, Some(days)) => {
                if days >= table.len() {
                    return Err(Error::Data(format!(
                        "test span of {days} days leaves nothing to train on in a {}-day table",
                        table.len()
                    )));
                }
                split_by_days(table, table.len() - days)
            }
            (None, None) => Err(Error::Config("evaluation needs test_year or test_days".into())),
        }
    }

    /// The test rows with the preceding `history + horizon` days as context.
    pub fn test_span(&self, table: &FeatureTable) -> Result<TestSpan> {
        let split = self.split(table)?;
        let first = *split
            .test
            .dates
            .first()
            .ok_or_else(|| Error::Data("test span is empty".into()))?;
        let start = table
            .index_of(first)
            .ok_or_else(|| Error::Data(format!("test start {first} missing from table")))?;
        let context = self.window.len().min(start);
        Ok(TestSpan {
            table: table.slice(start - context, start + split.test.len()),
            first_origin: context,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> serde_json::Value {
        serde_json::json!({
            "version": 1,
            "name": "desk",
            "seed": 7,
            "data": {"synthetic": {
                "n_days": 400, "n_zones": 2, "weather_persistence": 0.7,
                "future_signal_weight": 3.0, "autoregressive_weight": 0.5,
                "noise_scale": 1.0, "seed": 1
            }},
            "window": {"history": 7, "horizon": 5},
            "model": {"architecture": "lstm"},
            "training": {"method": "mmmpf", "epochs": 2},
            "evaluation": {"test_days": 60}
        })
    }

    #[test]
    fn parses_and_resolves_budget() {
        let c: ExperimentConfig = serde_json::from_value(sample()).unwrap();
        c.validate().unwrap();
        let t = c.training.resolve(Method::Rsf, c.seed);
        assert_eq!((t.method, t.epochs, t.batch_size, t.seed), (Method::Rsf, 2, 1000, 7));
        assert_eq!(c.run_dir(), PathBuf::from("runs/desk"));
        assert_eq!(c.model_for(Method::Sbf).architecture, Architecture::LinearO);
        assert_eq!(c.model_for(Method::Dmf).architecture, Architecture::Lstm);
    }

    #[test]
    fn unknown_keys_and_missing_seed_are_rejected() {
        let mut v = sample();
        v["trainig"] = serde_json::json!({});
        assert!(serde_json::from_value::<ExperimentConfig>(v).is_err());
        let mut v = sample();
        v["training"]["seed"] = 3.into();
        assert!(serde_json::from_value::<ExperimentConfig>(v).is_err());
        let mut v = sample();
        v.as_object_mut().unwrap().remove("seed");
        assert!(serde_json::from_value::<ExperimentConfig>(v).is_err());
    }

    #[test]
    fn version_and_split_are_validated() {
        let mut v = sample();
        v["version"] = 2.into();
        assert!(serde_json::from_value::<ExperimentConfig>(v).unwrap().validate().is_err());
        let mut v = sample();
        v["evaluation"] = serde_json::json!({"test_days": 30, "test_year": 2012});
        assert!(serde_json::from_value::<ExperimentConfig>(v).unwrap().validate().is_err());
        let mut v = sample();
        v["sbf_model"] = serde_json::json!({"architecture": "tcn"});
        assert!(serde_json::from_value::<ExperimentConfig>(v).unwrap().validate().is_err());
        let mut v = sample();
        v["model"] = serde_json::json!({"architecture": "fcnn"});
        assert!(serde_json::from_value::<ExperimentConfig>(v).unwrap().validate().is_err());
    }

    #[test]
    fn test_span_carries_context() {
        let c: ExperimentConfig = serde_json::from_value(sample()).unwrap();
        let table = c.load_table().unwrap();
        let span = c.test_span(&table).unwrap();
        assert_eq!(span.first_origin, 12);
        assert_eq!(span.table.len(), 72);
        assert_eq!(span.table.dates[12], table.dates[340]);
    }
}
