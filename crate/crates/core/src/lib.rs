//! Multilingual sequence-to-frames synthesis with contextual parameter generation.
//!
//! The crate contains a small reverse-mode autodiff engine ([`autodiff`]), the
//! generated/shared/separate/single model family ([`model`]), a synthetic
//! multilingual corpus with duration-based cleaning ([`data`]), language-interleaved
//! batching ([`batching`]), the optimization loop ([`training`]) and CER-based
//! evaluation including code-switching ([`eval`]).

pub mod autodiff;
pub mod batching;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod training;

pub use error::{Error, Result};
