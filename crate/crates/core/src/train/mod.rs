//! SAE training: losses with manual backpropagation, Adam, the warmup/decay
//! schedule and dead-latent masking.

mod config;
mod loss;
mod optim;
mod trainer;

pub use config::{LossMode, LrSchedule, TrainConfig};
pub use loss::{
    batch_outcome, compute_loss, gradient_check, BatchOutcome, ClassMeanState, Gradients,
    LossParams,
};
pub use optim::Adam;
pub use trainer::{init_model, train, train_run, LogRecord, TrainRun, TrainingLog};
