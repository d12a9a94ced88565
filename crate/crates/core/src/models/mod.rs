//! Model zoo: classifier family, toy conditional DDPM, training loops,
//! checkpoint persistence.

pub mod classifier;
pub mod cnn;
pub mod diffusion;
pub mod io;
pub mod unet;

pub use classifier::{
    per_sample_ce, per_sample_ce_view, train_classifier, train_external_classifier,
    ClassifierCheckpoint, TrainConfig, TrainLog, TrainLogRow,
};
pub use cnn::{ClassifierArch, ClassifierModel};
pub use diffusion::{
    diffusion_noise_loss, sample_diffusion, train_diffusion, DiffusionCheckpoint, DiffusionModel,
    DiffusionTrainConfig, NoiseSchedule,
};
pub use unet::{CondUnet, UnetConfig};
