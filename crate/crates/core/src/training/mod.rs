//! Objective, optimizer, metrics and the train/eval loops.

pub mod loss;
pub mod metrics;
pub mod optim;
pub mod trainer;

pub use loss::{main_loss, total_loss, LossReport};
pub use metrics::{compute_metrics, MetricReport};
pub use optim::{adam_update, Adam, StepInfo};
pub use trainer::{evaluate, forward_batch, forward_full, load_run, predict_all, train, train_step, BatchForward, EpochRecord, TrainOutcome};
