//! Loss assembly, the auto-encoding decay schedule, Adam, learning-rate
//! schedules, the training loop and checkpoint averaging.

mod adam;
mod loss;
mod schedule;
mod trainer;
#[cfg(test)]
mod tests;

pub use adam::{adam_step, clip_grad_norm, AdamConfig, OptimizerState};
pub use loss::{batch_loss, compute_loss, row_nll, BatchLoss, LossParts};
pub use schedule::{lambda_d, lr_at, LossMode, LrSchedule};
pub use trainer::{
    average_checkpoint_data, average_checkpoints, checkpoint_format, read_metrics, train_loop, validate, write_metrics,
    MetricsRow, PairData, RunDir, TrainData, TrainOutput, TrainPlan, ValidStats, METRICS_FILE, MODEL_FILE, PLAN_FILE,
};
