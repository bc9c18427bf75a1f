//! Resumable sweep over methods, time-steps, crossbar sizes and seeds.
//!
//! Layout of the work directory:
//! `models/<method>_t<T>.xsnn` trained (or converted) models,
//! `models/<method>_t<T>_x<size>_s<seed>.xsnn` crossbar-mapped models and
//! `cells/<method>_t<T>_x<size>_s<seed>.json` finished results. A rerun
//! skips anything already on disk.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crossbar::{CircuitMode, CrossbarConfig};
use crate::error::{Error, Result};
use crate::harness::{
    atomic_write, delta_metric, evaluate, load_model, save_model, write_adapt_report, write_report, AdaptReport,
    Dataset, EvalReport, ExperimentConfig, Method,
};
use crate::mapping::nonidealize_model;
use crate::numerics::{Purpose, RandomStream};
use crate::snn::{ann_to_snn, build_ann, Model, SnnOptions};
use crate::training::{adapt_bn_noise_aware, convert_ann_to_snn, train_ann, train_bntt, train_sg, TrainConfig};

/// Stream index of the permutation that picks adaptation samples.
const ADAPT_PERMUTATION: u64 = u64::MAX - 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub cell: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperimentOutcome {
    pub reports: Vec<EvalReport>,
    pub adapt_reports: Vec<AdaptReport>,
    pub failures: Vec<CellFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CellRecord {
    report: EvalReport,
    adapt: Vec<AdaptReport>,
}

fn model_key(method: Method, t: usize) -> String {
    format!("{method}_t{t}")
}

fn cell_key(method: Method, t: usize, size: usize, seed: u64) -> String {
    format!("{method}_t{t}_x{size}_s{seed}")
}

/// Where the adaptation sweep of a report at `csv` goes: `name_adapt.csv`.
pub fn adapt_report_path(csv: &Path) -> PathBuf {
    let stem = csv.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    csv.with_file_name(format!("{stem}_adapt.csv"))
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    train: Dataset,
    test: Dataset,
    models_dir: PathBuf,
    cells_dir: PathBuf,
}

impl Runner<'_> {
    fn load_or<F: FnOnce() -> Result<Model>>(&self, key: &str, make: F) -> Result<Model> {
        let path = self.models_dir.join(format!("{key}.xsnn"));
        if path.exists() {
            log::info!("reusing {}", path.display());
            return load_model(&path);
        }
        let model = make()?;
        save_model(&model, &path)?;
        Ok(model)
    }

    fn fresh(&self, opts: Option<SnnOptions>, seed: u64) -> Result<Model> {
        let d = &self.train;
        let ann = build_ann(&self.cfg.architecture, &d.name, d.image_shape(), d.classes)?;
        let spec = match opts {
            Some(o) => ann_to_snn(&ann, &o)?,
            None => ann,
        };
        Model::init(spec, seed)
    }

    fn fit(&self, method: Method, t: usize, tc: &TrainConfig) -> Result<Model> {
        log::info!("training {method} (T = {t})");
        let (mut model, log) = match method {
            Method::Ann => train_ann(&self.fresh(None, tc.seed)?, &self.train, tc)?,
            Method::Surrogate => train_sg(&self.fresh(Some(SnnOptions::surrogate(t)), tc.seed)?, &self.train, tc)?,
            Method::Bntt => train_bntt(&self.fresh(Some(SnnOptions::bntt(t)), tc.seed)?, &self.train, tc)?,
            Method::Conversion => unreachable!("conversion is not trained"),
        };
        model.metadata.insert("method".into(), method.to_string());
        model.metadata.insert("train_seed".into(), tc.seed.to_string());
        model.metadata.insert("train_log".into(), serde_json::to_string(&log)?);
        Ok(model)
    }

    fn obtain(&self, method: Method, t: usize) -> Result<Model> {
        match method {
            Method::Conversion => {
                let ann = self.obtain(Method::Ann, 0)?;
                self.load_or(&model_key(method, t), || {
                    let calib = self.train.take(self.cfg.calibration_samples);
                    convert_ann_to_snn(&ann, t, &calib.images, self.cfg.ann_train_config().seed)
                })
            }
            Method::Ann => self.load_or(&model_key(method, 0), || {
                self.fit(method, 0, self.cfg.ann_train_config())
            }),
            _ => self.load_or(&model_key(method, t), || self.fit(method, t, &self.cfg.train)),
        }
    }

    fn crossbar(&self, size: usize) -> CrossbarConfig {
        CrossbarConfig {
            rows: size,
            cols: size,
            ..self.cfg.crossbar.clone()
        }
    }

    /// SW accuracy once, then every crossbar size not yet on disk.
    fn run_unit(&self, method: Method, t: usize, seed: u64, model: &Model) -> Vec<(usize, Result<CellRecord>)> {
        let pending: Vec<usize> = self
            .cfg
            .xbar_sizes
            .iter()
            .copied()
            .filter(|&s| {
                !self
                    .cells_dir
                    .join(format!("{}.json", cell_key(method, t, s, seed)))
                    .exists()
            })
            .collect();
        if pending.is_empty() {
            return Vec::new();
        }
        let start = Instant::now();
        let sw = match evaluate(model, &self.test, t, seed) {
            Ok(sw) => sw,
            Err(e) => {
                let msg = e.to_string();
                return pending
                    .into_iter()
                    .map(|s| (s, Err(Error::Config(msg.clone()))))
                    .collect();
            }
        };
        let sw_time = start.elapsed().as_secs_f64();
        pending
            .into_iter()
            .map(|size| (size, self.finish_cell(method, t, size, seed, model, sw, sw_time)))
            .collect()
    }

    #[allow(clippy::too_many_arguments)]
    fn finish_cell(
        &self,
        method: Method,
        t: usize,
        size: usize,
        seed: u64,
        model: &Model,
        sw: f64,
        sw_time: f64,
    ) -> Result<CellRecord> {
        let start = Instant::now();
        let rec = self.run_cell(method, t, size, seed, model, sw)?;
        let wall = if self.cfg.record_wall_time {
            sw_time + start.elapsed().as_secs_f64()
        } else {
            0.0
        };
        let rec = CellRecord {
            report: EvalReport {
                wall_time: wall,
                ..rec.report
            },
            ..rec
        };
        let path = self.cells_dir.join(format!("{}.json", cell_key(method, t, size, seed)));
        atomic_write(&path, &serde_json::to_vec_pretty(&rec)?)?;
        Ok(rec)
    }

    fn run_cell(&self, method: Method, t: usize, size: usize, seed: u64, model: &Model, sw: f64) -> Result<CellRecord> {
        let d = &self.test;
        let mut report = EvalReport {
            method,
            architecture: self.cfg.architecture.name.clone(),
            dataset: d.name.clone(),
            time_steps: t,
            xbar_size: size,
            circuit_mode: CircuitMode::Ideal,
            sw_accuracy: sw,
            hw_accuracy: sw,
            delta: 0.0,
            seed,
            wall_time: 0.0,
        };
        if size == 0 {
            report.delta = delta_metric(sw, sw).unwrap_or(0.0);
            return Ok(CellRecord {
                report,
                adapt: Vec::new(),
            });
        }
        let xbar = self.crossbar(size);
        let key = cell_key(method, t, size, seed);
        let mapped = self.load_or(&key, || nonidealize_model(model, &xbar, seed))?;
        let hw = evaluate(&mapped, d, t, seed)?;
        report.circuit_mode = xbar.circuit_mode;
        report.hw_accuracy = hw;
        report.delta = delta_metric(sw, hw)?;
        let mut adapt = Vec::new();
        if method == Method::Bntt && !self.cfg.adapt_samples.is_empty() {
            let mut order: Vec<usize> = (0..self.train.len()).collect();
            RandomStream::new(seed, Purpose::Shuffle, ADAPT_PERMUTATION).shuffle(&mut order);
            for &n in &self.cfg.adapt_samples {
                if n > order.len() {
                    return Err(Error::Config(format!(
                        "{n} adaptation samples requested, training set has {}",
                        order.len()
                    )));
                }
                let (samples, _) = self.train.gather(&order[..n]);
                let adapted = adapt_bn_noise_aware(&mapped, &samples, seed, &self.cfg.adapt)?;
                let hw_n = evaluate(&adapted, d, t, seed)?;
                log::info!("{key}: {n} adaptation samples -> {hw_n:.2}%");
                adapt.push(AdaptReport {
                    method,
                    architecture: report.architecture.clone(),
                    dataset: report.dataset.clone(),
                    time_steps: t,
                    xbar_size: size,
                    circuit_mode: xbar.circuit_mode,
                    adapt_samples: n,
                    sw_accuracy: sw,
                    hw_accuracy: hw_n,
                    delta: delta_metric(sw, hw_n)?,
                    seed,
                });
            }
        }
        log::info!("{key}: sw {sw:.2}% hw {hw:.2}% delta {:.2}", report.delta);
        Ok(CellRecord { report, adapt })
    }
}

/// Runs every (method, T, crossbar size, seed) cell of `cfg`.
///
/// Models are trained sequentially; cells then run in parallel. A failing
/// model or cell is recorded in the outcome and the rest carry on. Results
/// are collected from the cell files, so an interrupted run resumed later
/// reports exactly what an uninterrupted one would.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let (train, test) = cfg.dataset.load()?;
    let models_dir = cfg.work_dir.join("models");
    let cells_dir = cfg.work_dir.join("cells");
    fs::create_dir_all(&models_dir)?;
    fs::create_dir_all(&cells_dir)?;
    let runner = Runner {
        cfg,
        train,
        test,
        models_dir,
        cells_dir,
    };
    let mut outcome = ExperimentOutcome::default();

    let mut units = Vec::new();
    let mut plan = Vec::new();
    for &method in &cfg.methods {
        for t in cfg.timesteps_for(method) {
            plan.push((method, t));
        }
    }
    plan.dedup();
    let mut models = Vec::new();
    for &(method, t) in &plan {
        match runner.obtain(method, t) {
            Ok(m) => models.push(Some(m)),
            Err(e) => {
                log::error!("{}: {e}", model_key(method, t));
                for &size in &cfg.xbar_sizes {
                    for &seed in &cfg.seeds {
                        outcome.failures.push(CellFailure {
                            cell: cell_key(method, t, size, seed),
                            error: e.to_string(),
                        });
                    }
                }
                models.push(None);
            }
        }
    }
    for (k, &(method, t)) in plan.iter().enumerate() {
        if models[k].is_some() {
            for &seed in &cfg.seeds {
                units.push((k, method, t, seed));
            }
        }
    }
    let results: Vec<Vec<(usize, Result<CellRecord>)>> = units
        .par_iter()
        .map(|&(k, method, t, seed)| runner.run_unit(method, t, seed, models[k].as_ref().expect("trained")))
        .collect();
    for (&(_, method, t, seed), res) in units.iter().zip(results) {
        for (size, err) in res.into_iter().filter_map(|(s, r)| r.err().map(|e| (s, e))) {
            log::error!("{}: {err}", cell_key(method, t, size, seed));
            outcome.failures.push(CellFailure {
                cell: cell_key(method, t, size, seed),
                error: err.to_string(),
            });
        }
    }
    for &(_, method, t, seed) in &units {
        for &size in &cfg.xbar_sizes {
            let path = runner
                .cells_dir
                .join(format!("{}.json", cell_key(method, t, size, seed)));
            if let Ok(bytes) = fs::read(&path) {
                let rec: CellRecord = serde_json::from_slice(&bytes)?;
                outcome.reports.push(rec.report);
                outcome.adapt_reports.extend(rec.adapt);
            }
        }
    }
    Ok(outcome)
}

/// Runs the experiment and writes `csv` (plus `*_adapt.csv` when the sweep
/// produced adaptation results).
pub fn run_experiment_to_csv(cfg: &ExperimentConfig, csv: &Path) -> Result<ExperimentOutcome> {
    let outcome = run_experiment(cfg)?;
    write_report(&outcome.reports, csv)?;
    if !outcome.adapt_reports.is_empty() {
        write_adapt_report(&outcome.adapt_reports, &adapt_report_path(csv))?;
    }
    Ok(outcome)
}
