//! Dreamer-style latent world model and an online decision transformer,
//! trained in alternating phases that share real-environment trajectories.
//!
//! * [`env`]: deterministic toy control tasks.
//! * [`replay`]: trajectory buffer, sequence dataset, return-to-go and the
//!   offline trajectory file format.
//! * [`world_model`]: latent dynamics, imagination and actor/critic updates.
//! * [`odt`]: causal transformer policy conditioned on return-to-go.
//! * [`trainer`]: the round loop, metrics and experiment runner.
//! * [`config`], [`checkpoint`], [`plot`]: operational surface used by the CLI.

pub mod checkpoint;
pub mod config;
pub mod env;
mod error;
pub mod gradsuite;
pub mod nn;
pub mod odt;
pub mod plot;
pub mod replay;
pub mod rng;
#[doc(hidden)]
pub mod testing;
pub mod tokens;
pub mod trainer;
pub mod world_model;

pub use error::{Error, Result};
