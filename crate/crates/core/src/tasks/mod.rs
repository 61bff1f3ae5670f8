//! Synthetic benchmarks with analytic posteriors, exact estimators built from
//! them, and controlled miscalibrations.

mod gain;
mod inject;
mod linear;

pub use gain::{GainPosterior, GainToyTask};
pub use inject::{inject, Miscalibrated, Miscalibration, MiscalibrationSpec};
pub use linear::{oracle_flow, GaussianLinearTask};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{CalibrationDataset, DatasetMeta};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngStream};

/// A joint sampler of (θ, x).
pub trait Simulator: Send + Sync {
    fn name(&self) -> &str;
    fn theta_dim(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn draw(&self, rng: &mut RngStream) -> (Vec<f64>, Vec<f64>);
}

/// `n` iid joint draws; row r uses stream r of `seed`. Fresh simulations are
/// flagged as held out; reuse of training data is caught by fingerprint.
pub fn simulate<S: Simulator + ?Sized>(task: &S, n: usize, seed: u64) -> Result<CalibrationDataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("simulation size must be at least 1".into()));
    }
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|r| task.draw(&mut RngStream::new(seed, r as u64)))
        .collect();
    let (m, d) = (task.theta_dim(), task.obs_dim());
    let mut theta = Matrix::zeros((n, m));
    let mut x = Matrix::zeros((n, d));
    for (r, (t, o)) in rows.into_iter().enumerate() {
        theta.row_mut(r).assign(&ndarray::ArrayView1::from(&t));
        x.row_mut(r).assign(&ndarray::ArrayView1::from(&o));
    }
    CalibrationDataset::new(
        theta,
        x,
        DatasetMeta {
            task: task.name().to_string(),
            seed,
            held_out: true,
        },
    )
}

/// Serializable task description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "kebab-case")]
pub enum TaskSpec {
    GaussianLinear {
        /// Design matrix, d rows of m entries. Defaults to a fixed 3×2 design.
        #[serde(default)]
        design: Option<Vec<Vec<f64>>>,
        #[serde(default = "unit")]
        sigma: f64,
    },
    GainToy {
        #[serde(default = "gain_dim")]
        d: usize,
        #[serde(default = "gain_sigma")]
        sigma: f64,
        #[serde(default = "gain_max")]
        g_max: f64,
    },
}

fn unit() -> f64 {
    1.0
}
fn gain_dim() -> usize {
    16
}
fn gain_sigma() -> f64 {
    0.25
}
fn gain_max() -> f64 {
    20.0
}

impl TaskSpec {
    pub fn from_name(name: &str) -> Result<Self> {
        serde_json::from_value(serde_json::json!({ "task": name }))
            .map_err(|_| Error::Config(format!("unknown task '{name}' (expected gaussian-linear or gain-toy)")))
    }

    pub fn build(&self) -> Result<Task> {
        Ok(match self {
            TaskSpec::GaussianLinear { design, sigma } => Task::Linear(match design {
                Some(rows) => {
                    let d = rows.len();
                    let m = rows.first().map(Vec::len).unwrap_or(0);
                    if rows.iter().any(|r| r.len() != m) {
                        return Err(Error::Config("design rows differ in length".into()));
                    }
                    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
                    let a = Matrix::from_shape_vec((d, m), flat).map_err(|e| Error::Config(e.to_string()))?;
                    GaussianLinearTask::new(a, *sigma)?
                }
                None => GaussianLinearTask::new(GaussianLinearTask::default_design(), *sigma)?,
            }),
            TaskSpec::GainToy { d, sigma, g_max } => Task::Gain(GainToyTask::new(*d, *sigma, *g_max)?),
        })
    }
}

/// A built task.
#[derive(Debug, Clone)]
pub enum Task {
    Linear(GaussianLinearTask),
    Gain(GainToyTask),
}

impl Task {
    pub fn simulator(&self) -> &dyn Simulator {
        match self {
            Task::Linear(t) => t,
            Task::Gain(t) => t,
        }
    }

    /// The exact posterior as an estimator.
    pub fn oracle(&self) -> Result<Box<dyn crate::ConditionalEstimator>> {
        Ok(match self {
            Task::Linear(t) => Box::new(oracle_flow(t)?),
            Task::Gain(t) => Box::new(GainPosterior::new(t.clone())),
        })
    }
}
