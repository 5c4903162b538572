use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{ShiftScenario, ALLOWED_SHOTS};
use crate::error::{Error, Result};
use crate::model::Trainable;
use crate::trainer::{InitConfig, Protocol, TrainConfig};

/// Scenario knobs; expanded into a [`ShiftScenario`] with classes on scaled
/// coordinate axes and the target shifted along the all-ones diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub num_classes: usize,
    pub feature_dim: usize,
    /// Distance between any two class means.
    pub separation: f64,
    pub sigma: f64,
    pub shift_magnitude: f64,
    pub shift_scale: f64,
}

impl ScenarioConfig {
    pub fn build(&self) -> Result<ShiftScenario> {
        ShiftScenario::simplex_diagonal_shift(
            self.num_classes,
            self.feature_dim,
            self.separation,
            self.sigma,
            self.shift_magnitude,
            self.shift_scale,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Source samples from which few-shot sets are drawn.
    pub pool_size: usize,
    pub test_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub shots: usize,
    pub grid1: Vec<f64>,
    pub grid2: Vec<f64>,
}

/// One experiment, parsed from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Replicates per cell; replicate `r` uses a seed derived from `seed` and `r`.
    pub repeats: usize,
    pub shots: Vec<usize>,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default = "default_bins")]
    pub bins: usize,
    #[serde(default = "default_workers")]
    pub workers: usize,
    pub scenario: ScenarioConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub init: InitConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub sweep: SweepConfig,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_bins() -> usize {
    crate::calibration::DEFAULT_NUM_BINS
}

fn default_workers() -> usize {
    1
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let config = |msg: String| Err(Error::Config(msg));
        if self.repeats == 0 {
            return config("repeats must be at least 1".into());
        }
        if self.bins == 0 {
            return config("bins must be at least 1".into());
        }
        if self.shots.is_empty() {
            return config("shots must list at least one value".into());
        }
        for &s in self.shots.iter().chain(std::iter::once(&self.sweep.shots)) {
            if !ALLOWED_SHOTS.contains(&s) {
                return config(format!("shots must be one of {ALLOWED_SHOTS:?}, got {s}"));
            }
        }
        if self.sweep.grid1.is_empty() || self.sweep.grid2.is_empty() {
            return config("sweep grids must be non-empty".into());
        }
        if self.data.pool_size == 0 || self.data.test_size == 0 {
            return config("data sizes must be positive".into());
        }
        let as_config = |e: Error| Error::Config(e.to_string());
        self.scenario.build().map_err(as_config)?;
        self.train.validate().map_err(as_config)?;
        for &l in self.sweep.grid1.iter().chain(&self.sweep.grid2) {
            self.train.clone().with_lambdas(l, 0.0).validate().map_err(as_config)?;
        }
        Ok(())
    }

    pub fn protocol(&self, shots: usize) -> Result<Protocol> {
        Ok(Protocol {
            scenario: self.scenario.build()?,
            shots,
            pool_size: self.data.pool_size,
            test_size: self.data.test_size,
            init: self.init,
        })
    }

    /// The desk-scale acceptance fixture: three classes in 16 dimensions with
    /// a target shift of one class-separation unit, a frozen temperature, and
    /// plain full-batch descent.
    pub fn fixture() -> Self {
        Self {
            seed: 0,
            repeats: 10,
            shots: vec![4, 8, 16],
            out: default_out(),
            bins: default_bins(),
            workers: default_workers(),
            scenario: ScenarioConfig {
                num_classes: 3,
                feature_dim: 16,
                separation: 2.0,
                sigma: 1.0,
                shift_magnitude: 2.0,
                shift_scale: 2.0,
            },
            data: DataConfig {
                pool_size: 400,
                test_size: 2000,
            },
            init: InitConfig {
                embed_dim: 8,
                weight_scale: 0.5,
                prototype_noise: 0.5,
                log_tau: -1.0,
            },
            train: TrainConfig {
                lambda1: 0.4,
                lambda2: 0.4,
                learning_rate: 0.05,
                epochs: 100,
                trainable: Trainable {
                    log_tau: false,
                    ..Trainable::all()
                },
                ..TrainConfig::default()
            },
            sweep: SweepConfig {
                shots: 16,
                grid1: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
                grid2: vec![0.0],
            },
        }
    }
}
