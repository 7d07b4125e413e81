//! Conditional denoising diffusion in pixel space.
//!
//! The forward process uses the cumulative product ᾱ_t = Π(1 − β_s), the
//! network is trained on the mean-reduced ε-prediction loss, and images are
//! drawn with the ancestral sampler (σ_t = √β_t).

mod sample;
mod schedule;
mod train;
mod unet;

pub use sample::sample;
pub use schedule::{
    build_schedule, forward_diffuse, forward_diffuse_with, simple_loss, step_diffuse, NoiseSchedule,
    ScheduleConfig,
};
pub use train::{train_step, DiffusionTrainer};
pub use unet::{timestep_embedding, DenoiserConfig, DenoiserNet, NoisePredictor};
