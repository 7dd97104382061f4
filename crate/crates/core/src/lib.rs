//! Differentiable top-k feature selection for multi-task prediction.
//!
//! Learnable feature scores are turned into a relaxed permutation; the sum
//! of its first `k` rows is a soft selection mask that is made exactly
//! binary in the forward pass (straight-through). The masked input feeds a
//! shared encoder with one head per task.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod baselines;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod selection;
pub mod trainer;

pub use autodiff::{grad_check, Tape, Tensor, Var};
pub use data::{Dataset, LabelColumn, Labels, SynthSpec};
pub use error::{Error, Result};
pub use metrics::MetricRecord;
pub use model::{Checkpoint, ModelConfig, ModelParams, TaskKind, TaskSpec};
pub use selection::{ScoreVector, SparsitySchedule, TemperatureSchedule};
pub use trainer::{TrainConfig, TrainReport};
