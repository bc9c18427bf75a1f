use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use xbar_snn::crossbar::{CircuitMode, CrossbarConfig};
use xbar_snn::harness::{
    adapt_report_path, evaluate, load_model, run_experiment_to_csv, save_model, Dataset, DatasetSource,
    ExperimentConfig,
};
use xbar_snn::mapping::nonidealize_model;
use xbar_snn::snn::{ann_to_snn, build_ann, Model, SnnOptions};
use xbar_snn::training::{adapt_bn_noise_aware, convert_ann_to_snn, train_ann, train_bntt, train_sg, AdaptConfig};
use xbar_snn::{Error, Result};

#[derive(Parser)]
#[command(
    name = "xbar-snn",
    version,
    about = "SNNs and ANNs on simulated non-ideal memristive crossbars"
)]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TrainMethod {
    Ann,
    Sg,
    Bntt,
}

#[derive(Clone, Copy, ValueEnum)]
enum Circuit {
    Ideal,
    Nodal,
    Approx,
}

impl From<Circuit> for CircuitMode {
    fn from(c: Circuit) -> Self {
        match c {
            Circuit::Ideal => CircuitMode::Ideal,
            Circuit::Nodal => CircuitMode::Nodal,
            Circuit::Approx => CircuitMode::Approx,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from an experiment config (dataset, architecture, training).
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        method: TrainMethod,
        /// Time-steps for SNN methods (default: first entry of the config's `timesteps`).
        #[arg(long)]
        timesteps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert a trained ANN into an integrate-and-fire SNN.
    Convert {
        #[arg(long)]
        ann: PathBuf,
        #[arg(long)]
        timesteps: usize,
        /// Number of training images used to calibrate thresholds.
        #[arg(long)]
        calib: usize,
        /// Dataset source (JSON) supplying the calibration images.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fold crossbar non-idealities into a model's weights.
    Map {
        #[arg(long)]
        model: PathBuf,
        /// Crossbar rows = columns.
        #[arg(long)]
        xbar: usize,
        #[arg(long, value_enum, default_value = "nodal")]
        circuit: Circuit,
        /// Device and parasitic parameters (JSON); defaults otherwise.
        #[arg(long)]
        crossbar: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print test accuracy.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// Dataset source (JSON).
        #[arg(long)]
        dataset: PathBuf,
        /// Simulation length (default: the model's own).
        #[arg(long)]
        timesteps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Re-estimate norm statistics of a mapped model from unlabeled images.
    AdaptBn {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        samples: usize,
        /// Dataset source (JSON) supplying the training images.
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Leave running variances untouched.
        #[arg(long)]
        mean_only: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a full sweep and write its report.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Loads a dataset source file; a relative data path is taken relative to it.
fn load_dataset(path: &Path) -> Result<(Dataset, Dataset)> {
    let mut src: DatasetSource = read_json(path)?;
    if src.path.is_relative() {
        src.path = path.parent().unwrap_or(Path::new(".")).join(&src.path);
    }
    src.load()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            method,
            timesteps,
            out,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let (train, _) = cfg.dataset.load()?;
            let ann = build_ann(&cfg.architecture, &train.name, train.image_shape(), train.classes)?;
            let t = match (method, timesteps, cfg.timesteps.first()) {
                (TrainMethod::Ann, _, _) => 0,
                (_, Some(t), _) | (_, None, Some(&t)) => t,
                (_, None, None) => return Err(Error::Config("no --timesteps and none in the config".into())),
            };
            let (model, log) = match method {
                TrainMethod::Ann => {
                    let tc = cfg.ann_train_config();
                    train_ann(&Model::init(ann, tc.seed)?, &train, tc)?
                }
                TrainMethod::Sg => {
                    let spec = ann_to_snn(&ann, &SnnOptions::surrogate(t))?;
                    train_sg(&Model::init(spec, cfg.train.seed)?, &train, &cfg.train)?
                }
                TrainMethod::Bntt => {
                    let spec = ann_to_snn(&ann, &SnnOptions::bntt(t))?;
                    train_bntt(&Model::init(spec, cfg.train.seed)?, &train, &cfg.train)?
                }
            };
            if let Some(last) = log.last() {
                println!(
                    "final epoch: loss {:.4}, train accuracy {:.2}%",
                    last.loss, last.train_accuracy
                );
            }
            save_model(&model, &out)
        }
        Command::Convert {
            ann,
            timesteps,
            calib,
            dataset,
            seed,
            out,
        } => {
            let ann = load_model(&ann)?;
            let (train, _) = load_dataset(&dataset)?;
            let snn = convert_ann_to_snn(&ann, timesteps, &train.take(calib).images, seed)?;
            let th: Vec<String> = snn.thresholds().iter().map(|t| format!("{t:.4}")).collect();
            println!("thresholds: {}", th.join(" "));
            save_model(&snn, &out)
        }
        Command::Map {
            model,
            xbar,
            circuit,
            crossbar,
            seed,
            out,
        } => {
            let base: CrossbarConfig = match crossbar {
                Some(p) => read_json(&p)?,
                None => CrossbarConfig::default(),
            };
            let cfg = CrossbarConfig {
                rows: xbar,
                cols: xbar,
                circuit_mode: circuit.into(),
                ..base
            };
            let mapped = nonidealize_model(&load_model(&model)?, &cfg, seed)?;
            save_model(&mapped, &out)
        }
        Command::Eval {
            model,
            dataset,
            timesteps,
            seed,
        } => {
            let model = load_model(&model)?;
            let (_, test) = load_dataset(&dataset)?;
            let t = timesteps.unwrap_or(model.spec.time_steps);
            println!("accuracy: {:.2}", evaluate(&model, &test, t, seed)?);
            Ok(())
        }
        Command::AdaptBn {
            model,
            samples,
            dataset,
            seed,
            mean_only,
            out,
        } => {
            let model = load_model(&model)?;
            let (train, _) = load_dataset(&dataset)?;
            if samples > train.len() {
                return Err(Error::Config(format!(
                    "{samples} samples requested, dataset has {}",
                    train.len()
                )));
            }
            let cfg = AdaptConfig {
                mean_only,
                ..Default::default()
            };
            let adapted = adapt_bn_noise_aware(&model, &train.take(samples).images, seed, &cfg)?;
            save_model(&adapted, &out)
        }
        Command::Experiment { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let outcome = run_experiment_to_csv(&cfg, &out)?;
            println!("{} rows written to {}", outcome.reports.len(), out.display());
            if !outcome.adapt_reports.is_empty() {
                println!("adaptation sweep written to {}", adapt_report_path(&out).display());
            }
            for f in &outcome.failures {
                eprintln!("failed: {}: {}", f.cell, f.error);
            }
            if outcome.failures.is_empty() {
                Ok(())
            } else {
                Err(Error::Config(format!("{} cells failed", outcome.failures.len())))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
