//! CSV reports. Accuracies and deltas carry two decimals.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::crossbar::CircuitMode;
use crate::error::{Error, Result};
use crate::harness::atomic_write;

pub const REPORT_HEADER: &str =
    "method,architecture,dataset,timesteps,xbar_size,circuit_mode,sw_acc,hw_acc,delta,seed,wall_time_s";

pub const ADAPT_HEADER: &str =
    "method,architecture,dataset,timesteps,xbar_size,circuit_mode,adapt_samples,sw_acc,hw_acc,delta,seed";

/// How a model was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ann,
    Conversion,
    Surrogate,
    Bntt,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ann => "ann",
            Method::Conversion => "conversion",
            Method::Surrogate => "surrogate",
            Method::Bntt => "bntt",
        }
    }

    pub fn is_snn(self) -> bool {
        self != Method::Ann
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ann" => Ok(Method::Ann),
            "conversion" => Ok(Method::Conversion),
            "surrogate" | "sg" => Ok(Method::Surrogate),
            "bntt" => Ok(Method::Bntt),
            other => Err(Error::invalid(format!("unknown method `{other}`"))),
        }
    }
}

/// One (model, crossbar, seed) evaluation. `xbar_size` 0 means software only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: Method,
    pub architecture: String,
    pub dataset: String,
    pub time_steps: usize,
    pub xbar_size: usize,
    pub circuit_mode: CircuitMode,
    pub sw_accuracy: f64,
    pub hw_accuracy: f64,
    pub delta: f64,
    pub seed: u64,
    pub wall_time: f64,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        for acc in [self.sw_accuracy, self.hw_accuracy] {
            if !(0.0..=100.0).contains(&acc) {
                return Err(Error::invalid(format!("accuracy {acc} outside [0, 100]")));
            }
        }
        if !self.delta.is_finite() || !(self.wall_time >= 0.0) {
            return Err(Error::invalid("non-finite delta or negative wall time"));
        }
        Ok(())
    }

    fn sort_key(&self) -> (&'static str, usize, usize, u64) {
        (self.method.as_str(), self.time_steps, self.xbar_size, self.seed)
    }
}

/// HW accuracy of a crossbar-mapped norm model after re-estimating its
/// statistics from `adapt_samples` unlabeled images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    pub method: Method,
    pub architecture: String,
    pub dataset: String,
    pub time_steps: usize,
    pub xbar_size: usize,
    pub circuit_mode: CircuitMode,
    pub adapt_samples: usize,
    pub sw_accuracy: f64,
    pub hw_accuracy: f64,
    pub delta: f64,
    pub seed: u64,
}

fn write_csv(path: &Path, header: &str, rows: impl Iterator<Item = String>) -> Result<()> {
    let mut text = String::from(header);
    text.push('\n');
    for row in rows {
        text.push_str(&row);
        text.push('\n');
    }
    atomic_write(path, text.as_bytes())
}

/// Writes reports sorted by (method, timesteps, xbar_size, seed).
pub fn write_report(reports: &[EvalReport], path: &Path) -> Result<()> {
    for r in reports {
        r.validate()?;
    }
    let mut sorted: Vec<&EvalReport> = reports.iter().collect();
    sorted.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    write_csv(
        path,
        REPORT_HEADER,
        sorted.into_iter().map(|r| {
            format!(
                "{},{},{},{},{},{},{:.2},{:.2},{:.2},{},{:.2}",
                r.method,
                r.architecture,
                r.dataset,
                r.time_steps,
                r.xbar_size,
                r.circuit_mode,
                r.sw_accuracy,
                r.hw_accuracy,
                r.delta,
                r.seed,
                r.wall_time
            )
        }),
    )
}

/// Writes adaptation results sorted by (method, timesteps, xbar_size, seed,
/// adapt_samples).
pub fn write_adapt_report(reports: &[AdaptReport], path: &Path) -> Result<()> {
    let mut sorted: Vec<&AdaptReport> = reports.iter().collect();
    sorted.sort_by_key(|r| (r.method.as_str(), r.time_steps, r.xbar_size, r.seed, r.adapt_samples));
    write_csv(
        path,
        ADAPT_HEADER,
        sorted.into_iter().map(|r| {
            format!(
                "{},{},{},{},{},{},{},{:.2},{:.2},{:.2},{}",
                r.method,
                r.architecture,
                r.dataset,
                r.time_steps,
                r.xbar_size,
                r.circuit_mode,
                r.adapt_samples,
                r.sw_accuracy,
                r.hw_accuracy,
                r.delta,
                r.seed
            )
        }),
    )
}

fn field<T: FromStr>(cols: &[&str], k: usize, line: usize) -> Result<T> {
    cols[k].parse().map_err(|_| {
        Error::Format(format!(
            "report line {line}: bad value `{}` in column {}",
            cols[k],
            k + 1
        ))
    })
}

/// Parses a file written by [`write_report`]. Values come back rounded to
/// the printed precision.
pub fn read_report(path: &Path) -> Result<Vec<EvalReport>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(REPORT_HEADER) {
        return Err(Error::Format(format!("{}: missing report header", path.display())));
    }
    lines
        .enumerate()
        .map(|(k, line)| {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 11 {
                return Err(Error::Format(format!("report line {}: {} columns", k + 2, cols.len())));
            }
            let n = k + 2;
            Ok(EvalReport {
                method: field(&cols, 0, n)?,
                architecture: cols[1].to_string(),
                dataset: cols[2].to_string(),
                time_steps: field(&cols, 3, n)?,
                xbar_size: field(&cols, 4, n)?,
                circuit_mode: field(&cols, 5, n)?,
                sw_accuracy: field(&cols, 6, n)?,
                hw_accuracy: field(&cols, 7, n)?,
                delta: field(&cols, 8, n)?,
                seed: field(&cols, 9, n)?,
                wall_time: field(&cols, 10, n)?,
            })
        })
        .collect()
}
