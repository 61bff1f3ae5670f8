use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use flowcheck::tasks::TaskSpec;
use flowcheck::{FlowTrainConfig, RegressorConfig};
use serde::Deserialize;

/// Settings read from `--config`. Every field is optional; command-line
/// flags take precedence over the file, and the file over built-in defaults.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub task: Option<TaskSpec>,
    pub flow: Option<FlowTrainConfig>,
    pub regressor: Option<RegressorConfig>,
    pub grid_size: Option<usize>,
    pub level: Option<f64>,
    pub replicates: Option<usize>,
    pub seed: Option<u64>,
    pub sbc_draws: Option<usize>,
    pub inject: Option<String>,
    pub train_data: Option<PathBuf>,
    pub neighbourhood: Option<usize>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text)
                    .map_err(|e| crate::UsageError(format!("config {}: {e}", p.display())).into())
            }
        }
    }
}

/// First of flag, config value, default.
pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}
