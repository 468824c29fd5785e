//! Missing-value imputation for tabular data: FIML conditional means from a
//! (path-model) multivariate normal, refined by a single self-attention
//! layer trained on a composite MSE / covariance / L1 loss. Also ships
//! NOTEARS structure learning for choosing path models, baseline imputers,
//! and the evaluation metrics.

pub mod attention;
pub mod baselines;
pub mod dataset;
pub mod error;
pub mod fiml;
mod linalg;
pub mod metrics;
pub mod missingness;
pub mod notears;
pub mod optim;
pub mod rng;
pub mod sem;
pub mod synth;
pub mod training;

pub use attention::AttentionParams;
pub use dataset::{Dataset, Imputation, LoadOptions, VariableKind, VariableSpec};
pub use error::{Error, Result};
pub use fiml::{EmConfig, EmFit, MvnParams};
pub use metrics::{EvalOptions, EvaluationReport, VariableMetrics, WilcoxonResult};
pub use missingness::MaskPlan;
pub use notears::{NotearsConfig, WeightedGraph};
pub use sem::{FitIndices, PathModel, SemSpec};
pub use training::{ImputeConfig, ImputeReport, LossWeights, TrainConfig, TrainMode};

/// Crate version, embedded in reports.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
