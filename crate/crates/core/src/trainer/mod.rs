//! Joint training: pose fitting plus weighted alignment and comparison
//! losses, with decoder-input noise, Adam and checkpointed progress.

mod adam;
mod batch;
mod config;
mod gradcheck;
mod run;
mod step;

pub use adam::{Adam, BETA1, BETA2, EPSILON};
pub use batch::{add_pose_noise, noise_std, pad_batch, padded_loss_acc, PaddedBatch, NOISE_UNIT};
pub use config::{joint_loss, Ablation, TrainConfig};
pub use gradcheck::{grad_check, CheckedLoss, GradCheck, FD_STEP, FD_TOLERANCE};
pub use run::{
    epoch_order, steps_per_epoch, train, TrainOptions, TrainOutcome, BEST_FILE, CONFIG_FILE, DEV_REPORT_DIR,
    LOG_FILE, MODEL_FILE, STATE_FILE,
};
pub use step::{noise_rng, train_step, StepLosses, TrainState};

#[cfg(test)]
mod tests;
