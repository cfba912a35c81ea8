pub mod adadelta;
pub mod augment;
pub mod ensemble;
pub mod train;

#[cfg(test)]
mod tests;

pub use adadelta::{adadelta_update, Adadelta, AdadeltaConfig};
pub use augment::hflip_augment;
pub use ensemble::{average_maps, ensemble_predict, member_seed, member_subset, train_ensemble, EnsembleConfig, Member};
pub use train::{evaluate_model, log_csv, loss_target, train, Batch, EarlyStopping, EpochLog, Evaluation, StopDecision, StopReason, TrainConfig, TrainOutcome, TRAIN_STREAM};
