//! No-reference image quality assessment read out of the cross-attention
//! maps of a latent denoiser.
//!
//! An image is encoded to a latent, noised to a small timestep and passed
//! through the denoiser twice, once under a positive and once under a
//! negative quality prompt. Each cross-attention block's map between visual
//! queries and text keys is log-sum-exp pooled; the block mean, averaged
//! over both prompts and several timesteps, is the quality prediction.
//! LoRA adapters on the key/value projections and a shared learnable prompt
//! context are trained against opinion scores while every other weight,
//! including the queries, stays frozen.
//!
//! The crate ships a small seeded toy denoiser so the whole pipeline
//! (training, evaluation, ablations) runs on a CPU, and a synthetic
//! distortion dataset to drive it.

pub mod ablation;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod prompt;
pub mod readout;
pub mod schedule;
pub mod train;

pub use error::{Error, Result};
