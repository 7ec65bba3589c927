//! TOML experiment and suite files.
//!
//! Relative paths inside a config are taken relative to the working
//! directory of the process, not to the config file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::AdamWConfig;
use crate::backbone::BackboneConfig;
use crate::data::{load_dataset, SuiteSpec};
use crate::error::{Error, Result};
use crate::replay::ReplayConfig;
use crate::trainer::{Ablation, ExperimentPlan, Method, PlannedTask, TrainConfig, TrainingConfig};

/// One entry of the task order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskEntry {
    pub name: String,
    /// Defaults to `<data_dir>/<name>/train.bin`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    /// Defaults to `<data_dir>/<name>/test.bin`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
}

impl TaskEntry {
    pub fn named(name: impl Into<String>) -> Self {
        TaskEntry {
            name: name.into(),
            train: None,
            test: None,
            epochs: None,
            alpha: None,
        }
    }
}

/// A whole experiment: model, optimizer, schedule and task order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub method: Method,
    pub out_dir: PathBuf,
    pub data_dir: PathBuf,
    pub model: BackboneConfig,
    pub optimizer: AdamWConfig,
    pub training: TrainingConfig,
    pub replay: ReplayConfig,
    pub ablation: Ablation,
    pub tasks: Vec<TaskEntry>,
}

impl Default for ExperimentConfig {
    /// Shipped defaults over the four tasks of the default suite.
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            method: Method::Tamcl,
            out_dir: PathBuf::from("runs"),
            data_dir: PathBuf::from("data"),
            model: BackboneConfig::default(),
            optimizer: AdamWConfig::default(),
            training: TrainingConfig::default(),
            replay: ReplayConfig::default(),
            ablation: Ablation::default(),
            tasks: SuiteSpec::default_suite()
                .tasks
                .iter()
                .map(|t| TaskEntry::named(&t.name))
                .collect(),
        }
    }
}

fn toml_error(e: toml::de::Error) -> Error {
    Error::Config {
        field: "config".into(),
        message: e.to_string().trim_end().to_string(),
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: ExperimentConfig = toml::from_str(text).map_err(toml_error)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&read(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config {
            field: "config".into(),
            message: e.to_string(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        if self.tasks.is_empty() {
            return Err(Error::Config {
                field: "tasks".into(),
                message: "no tasks".into(),
            });
        }
        let mut seen = std::collections::HashSet::new();
        for t in &self.tasks {
            let field = |f: &str| format!("tasks.{}.{f}", t.name);
            if t.name.is_empty() || !seen.insert(&t.name) {
                return Err(Error::Config {
                    field: "tasks.name".into(),
                    message: format!("empty or duplicate task name `{}`", t.name),
                });
            }
            if t.epochs == Some(0) {
                return Err(Error::Config {
                    field: field("epochs"),
                    message: "must be at least 1".into(),
                });
            }
            if let Some(a) = t.alpha {
                if !(a >= 0.0 && a.is_finite()) {
                    return Err(Error::Config {
                        field: field("alpha"),
                        message: format!("{a} is not a finite non-negative weight"),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            method: self.method,
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            training: self.training.clone(),
            replay: self.replay.clone(),
            ablation: self.ablation.clone(),
        }
    }

    /// Train and test file of one task.
    pub fn task_paths(&self, task: &TaskEntry) -> (PathBuf, PathBuf) {
        let dir = self.data_dir.join(&task.name);
        (
            task.train.clone().unwrap_or_else(|| dir.join("train.bin")),
            task.test.clone().unwrap_or_else(|| dir.join("test.bin")),
        )
    }

    /// Loads every task's datasets. A missing or corrupt file fails with the
    /// task's name attached.
    pub fn load_plan(&self) -> Result<ExperimentPlan> {
        let mut tasks = Vec::with_capacity(self.tasks.len());
        for entry in &self.tasks {
            let (train_path, test_path) = self.task_paths(entry);
            let load = || -> Result<PlannedTask> {
                let mut t = PlannedTask::new(load_dataset(&train_path)?, load_dataset(&test_path)?);
                t.name = entry.name.clone();
                t.epochs = entry.epochs;
                t.alpha = entry.alpha;
                Ok(t)
            };
            tasks.push(load().map_err(|e| e.for_task(&entry.name))?);
        }
        ExperimentPlan::new(tasks)
    }
}

impl SuiteSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let suite: SuiteSpec = toml::from_str(text).map_err(toml_error)?;
        suite.validate()?;
        Ok(suite)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&read(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config {
            field: "suite".into(),
            message: e.to_string(),
        })
    }
}
