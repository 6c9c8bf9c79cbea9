//! AAM-softmax training with Adam and a cyclical learning rate.

mod batch;
mod fit;
mod head;
mod optim;

pub use batch::{pad_and_mask, TrainBatch};
pub use fit::{embed_all, extract_features, fit, fit_from, FitPaths, FitResult, StepRecord, TrainOptions};
pub use head::{aam_loss, aam_loss_value, AamHead};
pub use optim::{adam_step, AdamConfig, AdamState, CyclicalLrSchedule};
