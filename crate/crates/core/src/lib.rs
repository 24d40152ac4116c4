//! Text-guided image editing on a small conditional diffusion model.
//!
//! The crate is `no_std` (it needs `alloc`) and holds every numerical piece
//! of the method: the noise schedule and DDIM step, a UNet-shaped noise
//! predictor with hand-written gradients, the prompt-embedding algebra,
//! joint embedding/UNet fine-tuning, parameter forgetting, and the editing
//! sweeps built on top of them. File formats, the CLI and the HTTP service
//! live in the `forgedit` crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod array;
pub mod denoiser;
pub mod diffusion;
pub mod editor;
pub mod embedding;
mod error;
pub mod finetune;
pub mod fixtures;
pub mod forgetting;
pub mod image;
pub mod optim;
pub mod text;
#[cfg(test)]
mod testkit;

pub use array::Array;
pub use denoiser::{DenoiserParams, PathPredicate, Stage, StageLayout};
pub use diffusion::{LatentImage, NoiseSample, NoiseSchedule};
pub use embedding::{PromptEmbedding, Provenance};
pub use error::{Error, Result};
pub use forgetting::ForgettingStrategy;
pub use image::RgbImage;
pub use text::ToyTextEncoder;
