use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::crossbar::CrossbarConfig;
use crate::error::{Error, Result};
use crate::harness::{DatasetSource, Method};
use crate::snn::ArchitectureConfig;
use crate::training::{AdaptConfig, TrainConfig};

/// JSON Schema describing [`ExperimentConfig`] files.
pub const EXPERIMENT_SCHEMA: &str = include_str!("../../schemas/experiment.schema.json");

fn default_name() -> String {
    "experiment".into()
}

fn default_calibration() -> usize {
    512
}

/// Everything a run needs: data, architecture, training, crossbar sweep,
/// seeds and where to keep intermediate artifacts.
///
/// Relative paths are resolved against the directory of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub dataset: DatasetSource,
    #[serde(default)]
    pub architecture: ArchitectureConfig,
    pub methods: Vec<Method>,
    /// Simulation lengths for surrogate and BNTT training.
    #[serde(default)]
    pub timesteps: Vec<usize>,
    /// Simulation lengths for converted SNNs.
    #[serde(default)]
    pub conversion_timesteps: Vec<usize>,
    /// Training for the spiking methods (and for the ANN unless `ann_train` is set).
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub ann_train: Option<TrainConfig>,
    /// Device and parasitics; rows/cols are replaced by each entry of `xbar_sizes`.
    #[serde(default)]
    pub crossbar: CrossbarConfig,
    /// Crossbar sizes to map onto; 0 reports software accuracy only.
    pub xbar_sizes: Vec<usize>,
    /// Sample counts for the BN adaptation sweep of BNTT models.
    #[serde(default)]
    pub adapt_samples: Vec<usize>,
    #[serde(default)]
    pub adapt: AdaptConfig,
    /// Training images used to calibrate conversion thresholds.
    #[serde(default = "default_calibration")]
    pub calibration_samples: usize,
    /// Seeds for device variation and input encoding; one report per seed.
    pub seeds: Vec<u64>,
    /// Trained and mapped models plus finished cells live here.
    pub work_dir: PathBuf,
    /// Measure per-cell wall time. Off by default so that reports are
    /// byte-identical across runs.
    #[serde(default)]
    pub record_wall_time: bool,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Reads a config file and resolves its relative paths.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        if self.dataset.path.is_relative() {
            self.dataset.path = base.join(&self.dataset.path);
        }
        if self.work_dir.is_relative() {
            self.work_dir = base.join(&self.work_dir);
        }
    }

    pub fn ann_train_config(&self) -> &TrainConfig {
        self.ann_train.as_ref().unwrap_or(&self.train)
    }

    /// Time-step list for a method; the ANN has a single entry of 0.
    pub fn timesteps_for(&self, method: Method) -> Vec<usize> {
        match method {
            Method::Ann => vec![0],
            Method::Conversion => self.conversion_timesteps.clone(),
            Method::Surrogate | Method::Bntt => self.timesteps.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.methods.is_empty() {
            return fail("`methods` is empty".into());
        }
        if self.seeds.is_empty() {
            return fail("`seeds` is empty".into());
        }
        if self.xbar_sizes.is_empty() {
            return fail("`xbar_sizes` is empty (use [0] for software only)".into());
        }
        for &m in &self.methods {
            let ts = self.timesteps_for(m);
            if ts.is_empty() {
                let field = if m == Method::Conversion {
                    "conversion_timesteps"
                } else {
                    "timesteps"
                };
                return fail(format!("method `{m}` needs a non-empty `{field}`"));
            }
            if m != Method::Ann && ts.contains(&0) {
                return fail(format!("method `{m}` has a time-step count of 0"));
            }
        }
        if self.methods.contains(&Method::Conversion) && self.calibration_samples == 0 {
            return fail("conversion needs calibration_samples >= 1".into());
        }
        self.train.validate()?;
        self.ann_train_config().validate()?;
        for &size in self.xbar_sizes.iter().filter(|&&s| s > 0) {
            CrossbarConfig {
                rows: size,
                cols: size,
                ..self.crossbar.clone()
            }
            .validate()?;
        }
        if !self.dataset.path.is_dir() {
            return fail(format!(
                "dataset directory {} does not exist",
                self.dataset.path.display()
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "dataset": {"name": "mnist", "path": "data/mnist", "train_n": 100, "test_n": 50},
        "methods": ["ann", "surrogate"],
        "timesteps": [5],
        "xbar_sizes": [0, 64],
        "seeds": [0, 1],
        "work_dir": "runs/x"
    }"#;

    #[test]
    fn defaults_fill_in() {
        let cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert_eq!(cfg.name, "experiment");
        assert_eq!(cfg.architecture, ArchitectureConfig::default());
        assert_eq!(cfg.train, TrainConfig::default());
        assert_eq!(cfg.crossbar, CrossbarConfig::default());
        assert_eq!(cfg.calibration_samples, 512);
        assert!(!cfg.record_wall_time);
        assert_eq!(cfg.timesteps_for(Method::Ann), vec![0]);
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("exp.json");
        fs::write(&p, MINIMAL).unwrap();
        let cfg = ExperimentConfig::load(&p).unwrap();
        assert_eq!(cfg.dataset.path, dir.path().join("data/mnist"));
        assert_eq!(cfg.work_dir, dir.path().join("runs/x"));
        assert!(cfg.validate().is_err(), "dataset directory is missing");
        fs::create_dir_all(dir.path().join("data/mnist")).unwrap();
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_fields_and_bad_values_rejected() {
        let extra = MINIMAL.replace("\"seeds\"", "\"sedes\": [1], \"seeds\"");
        assert!(ExperimentConfig::from_json(&extra).is_err());
        let mut cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        cfg.dataset.path = std::env::temp_dir();
        cfg.validate().unwrap();
        cfg.methods.push(Method::Conversion);
        assert!(cfg.validate().is_err());
        cfg.conversion_timesteps = vec![50];
        cfg.validate().unwrap();
        cfg.seeds.clear();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn schema_is_valid_json_naming_every_field() {
        let schema: serde_json::Value = serde_json::from_str(EXPERIMENT_SCHEMA).unwrap();
        let props = schema["properties"].as_object().unwrap();
        let cfg = serde_json::to_value(ExperimentConfig::from_json(MINIMAL).unwrap()).unwrap();
        for key in cfg.as_object().unwrap().keys() {
            assert!(props.contains_key(key), "schema lacks `{key}`");
        }
    }
}
