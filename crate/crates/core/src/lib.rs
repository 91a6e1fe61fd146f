pub mod dataio;
pub mod nn;
pub mod error;
pub mod models;
pub mod forecast_eval;
pub mod training;
pub mod windowing;

pub use error::{Error, Result};
