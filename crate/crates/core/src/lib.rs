//! Progressive coarse-to-fine localization of language-described moments in
//! untrimmed videos.
//!
//! The crate is `no_std` (it needs `alloc`) and carries all of the numerical
//! machinery: a small reverse-mode autodiff tape, the encoders, 2D temporal
//! moment maps, the multi-stage localization branches, losses and the training
//! loop, a seeded planted-moment data generator, and the evaluation metrics.
//! File formats, configuration files and the command-line front end live in the
//! `pln` crate.

#![no_std]

extern crate alloc;

pub mod autodiff;
pub mod branch;
pub mod encoders;
pub mod error;
pub mod eval;
mod linalg;
pub mod temporal_map;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
