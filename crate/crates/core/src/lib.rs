//! Language-guided contrastive audio-visual masked autoencoder.
//!
//! Modules, bottom-up: [`data`] and [`patchwork`] define inputs and patch
//! handling, [`tape`] is a small reverse-mode autodiff engine, [`backbone`]
//! holds the model, [`objectives`] the losses, [`tripletgen`] builds the
//! audio-image-text training manifest, [`trainer`] runs pretraining and
//! finetuning and [`evalkit`] computes retrieval and classification metrics.

pub mod backbone;
pub mod cli;
pub mod data;
pub mod error;
pub mod evalkit;
pub mod objectives;
pub mod patchwork;
pub mod synthetic;
pub mod tape;
pub mod trainer;
pub mod tripletgen;

pub use error::{Error, Result};
