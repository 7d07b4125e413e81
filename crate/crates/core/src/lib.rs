//! Desk-scale generative pipeline for synthetic chest X-ray experiments:
//! a tape-based autodiff engine, a conditional pixel-space diffusion model,
//! a progressive-growing GAN, ChestX-ray14 metadata handling, and the
//! real-versus-synthetic augmentation experiment.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod nn;
pub mod optim;
pub mod pggan;
pub mod rng;
pub mod tensor;

pub use error::{Error, ErrorClass, Result};
pub use rng::Rng;
pub use tensor::Tensor;
