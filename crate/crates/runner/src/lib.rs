//! Configuration, file formats and the mode dispatcher behind the `bridge`
//! binary. The numerical work lives in `bridge-core`.

pub mod config;
pub mod error;
pub mod formats;
pub mod run;

pub use config::{load, ExperimentConfig, Mode, Overrides};
pub use error::{Result, RunError};
pub use run::run;
