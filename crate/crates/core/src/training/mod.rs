//! Optimization, the synthetic task and gradient verification.

mod gradcheck;
mod optim;
mod task;
mod train;

pub use gradcheck::{
    gradcheck_fixture, gradcheck_network, gradcheck_specs, gradcheck_suite, Corruption, GradcheckConfig, GradcheckRow,
};
pub use optim::{AdamW, OptimizerConfig, Schedule};
pub use task::{QueryEncoding, Sample, Task, TaskSpec};
pub use train::{
    batch_loss, evaluate, gradients, smoothed_ends, train, Evaluation, MetricRow, TrainConfig, TrainOutcome,
};
