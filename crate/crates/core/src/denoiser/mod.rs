//! Trainable transformer denoiser: architecture, training and checkpoints.

mod checkpoint;
mod gradcheck;
mod network;
mod optim;
mod params;
mod train;

pub use checkpoint::{Checkpoint, CheckpointConfig, TrainMeta};
pub use gradcheck::{grad_check, grad_check_against, jitter_parameters, probe_round_robin, random_batch, Probe};
pub use network::{
    init_model, timestep_embedding, tokenize, untokenize, Conditioning, DenoiserModel, FlopCount, ForwardCache,
    ModelConfig, Prediction,
};
pub use optim::{ema_update, optimizer_step, AdamW, EmaSchedule, LrSchedule};
pub use params::{ParamSet, Tensor};
pub use train::{loss_and_grads, sample_batch, train, train_with_progress, TrainConfig, TrainProgress, TrainingBatch};
