//! Storage formats, the run/sweep pipeline shared by the CLI and the HTTP
//! service, and both front ends.

pub mod checkpoint;
pub mod cli;
pub mod config;
mod error;
pub mod imageio;
pub mod model;
pub mod pipeline;
pub mod rawarray;
pub mod service;
pub mod store;

pub use error::{Error, Result};
pub use model::Model;
pub use pipeline::Run;
