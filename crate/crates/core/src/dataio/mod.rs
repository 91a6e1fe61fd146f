//! Data ingestion and the daily feature panel.
//!
//! Hourly zonal records are read from the canonical CSV schema, reduced to
//! daily peaks, and split chronologically. A seeded synthetic generator
//! produces panels with known dependence on weather and on lagged demand.

mod daily;
mod hourly;
mod split;
pub mod synthetic;
mod table;

pub use daily::downsample_daily_peak;
pub use hourly::{ingest_hourly, read_hourly, HourlyRecord, HourlyTable, HOURLY_HEADER};
pub use split::{split_by_days, split_dataset, DatasetSplit, TRAIN_FRACTION};
pub use synthetic::{generate_synthetic, generate_synthetic_panel, SyntheticPanel, SyntheticSpec};
pub use table::{Calendar, FeatureTable, CALENDAR_CARDINALITY};
