//! Data loading, evaluation, reports, model persistence and the experiment
//! runner.

mod config;
pub mod data;
mod eval;
mod experiment;
mod persist;
mod report;

use std::io::Write;
use std::path::Path;

use crate::error::Result;

pub use config::{ExperimentConfig, EXPERIMENT_SCHEMA};
pub use data::{load_cifar10, load_mnist, subset_indices, Dataset, DatasetName, DatasetSource};
pub use eval::{delta_metric, evaluate};
pub use experiment::{adapt_report_path, run_experiment, run_experiment_to_csv, CellFailure, ExperimentOutcome};
pub use persist::{load_model, model_from_bytes, model_to_bytes, save_model};
pub use report::{
    read_report, write_adapt_report, write_report, AdaptReport, EvalReport, Method, ADAPT_HEADER, REPORT_HEADER,
};

/// Writes through a temporary file in the same directory, then renames, so
/// readers never see a partial file.
pub(crate) fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}
