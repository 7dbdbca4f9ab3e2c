//! Prior-enhanced attention network for scene text image super-resolution.
//!
//! The crate is organised bottom-up: [`nn`] provides the differentiable
//! primitives, [`data`] the synthetic paired dataset, [`recognizer`] the CTC
//! recognizer used as text-prior generator and evaluator, [`tpem`] the
//! diffusion prior enhancer, [`amm`] the attention modules, [`srnet`] the
//! assembled network, [`losses`] the multi-task objective, [`trainer`] the
//! two-stage optimisation and [`eval`] the metrics and CKA analysis.
//! [`pipeline`] ties a trained network to a frozen recognizer for inference.

pub mod amm;
pub mod charset;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod nn;
pub mod pipeline;
pub mod recognizer;
pub mod seed;
pub mod srnet;
pub mod tpem;
pub mod trainer;

pub use error::{Error, Result};

/// Frames per recognition sequence.
pub const SEQ_LEN: usize = 26;
