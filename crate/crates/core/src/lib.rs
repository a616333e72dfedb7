//! Symmetry-aware breast mass detection.
//!
//! The pipeline runs in stages: synthetic bilateral exams ([`phantom`]),
//! suspicious-region candidates ([`candidates`]), primary/contra-lateral patch
//! pairs with augmentation ([`patches`]), single- and dual-stream CNNs written
//! from scratch ([`nnet`]) trained with balanced SGD ([`trainer`]), and
//! candidate/image/exam level evaluation ([`eval`]). [`pipeline`] wires the
//! stages to on-disk artifacts driven by a [`config::PipelineConfig`].

pub mod candidates;
pub mod config;
pub mod error;
pub mod eval;
pub mod nnet;
pub mod patches;
pub mod pipeline;
pub mod phantom;
pub mod provenance;
pub mod raster;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
