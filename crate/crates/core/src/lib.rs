//! Conditional diffusion super-resolution, end to end: a small reverse-mode
//! tensor engine, noise schedules, the forward/reverse diffusion processes,
//! a noise-level-conditioned U-Net denoiser, the training loop with EMA and
//! checkpointing, an image preprocessing pipeline, and PSNR/SSIM metrics.

pub mod error;
pub mod imaging;
pub mod metrics;
pub mod denoiser;
pub mod diffusion;
pub mod rng;
pub mod schedule;
pub mod tensor;
pub mod training;

pub use error::{CoreError, Result};
pub use rng::Rng;
pub use tensor::{Element, Tensor};
