//! Few-shot fine-grained recognition by generating category classifiers
//! from bilinear features.
//!
//! The pipeline: [`bilinear::pool`] two feature-map streams into a vector made
//! of `n_b` part sub-vectors, average a category's exemplars, map each part
//! through its own small MLP ([`mapping`]) to obtain a classifier, and train
//! the mapping episodically ([`train`], [`episodes`]).

pub mod bilinear;
pub mod cli;
pub mod dataset;
pub mod episodes;
pub mod error;
pub mod io;
pub mod mapping;
pub mod par;
pub mod rng;
pub mod stats;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
