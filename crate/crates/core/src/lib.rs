//! Sense-aware masked language model pretraining and evaluation.

pub mod binfmt;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod evalkit;
pub mod lexicon;
pub mod masker;
pub mod model;
pub mod objective;
pub mod rng;
pub mod scalar;
pub mod textpipe;
pub mod trainer;

pub use error::{Error, Result};
