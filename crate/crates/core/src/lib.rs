//! Consistency diagnostics for conditional density estimators built on
//! normalizing flows.

pub mod dataset;
pub mod error;
pub mod estimator;
pub mod flow;
pub mod global_diag;
pub mod independence;
pub mod local_diag;
pub mod numerics;
pub mod pit;
pub mod regress;
pub mod stats;
pub mod tasks;

pub use dataset::{CalibrationDataset, DatasetMeta};
pub use error::{Error, Result};
pub use estimator::{ConditionalEstimator, Inverse};
pub use flow::{ConditionalFlow, FlowArch, FlowTrainConfig};
pub use global_diag::{AlphaGrid, GlobalConfig, GlobalReport};
pub use local_diag::{LocalReport, RegressorBank};
pub use pit::PitMatrix;
pub use regress::{BinaryRegressor, RegressorConfig, RegressorKind};
pub use stats::Decision;
