//! Adapter-based class-incremental learning on a small vision transformer.
//!
//! A frozen encoder is finetuned through bottleneck adapters on the first
//! task only; later tasks add class prototypes to a growing cosine
//! classifier over the concatenated frozen and finetuned features.

pub mod adapters;
pub mod cil;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradsuite;
pub mod numcore;
pub mod protoclf;
pub mod seed;
pub mod weights;

pub use error::{Error, Result};
