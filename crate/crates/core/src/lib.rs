//! Multimodal factorization model.
//!
//! A multimodal sample is split into one discriminative factor shared by all
//! modalities and one generative factor per modality. Training minimizes a
//! reconstruction + prediction objective with an MMD penalty pulling the
//! aggregated latent codes toward a standard normal prior. On top of the
//! model sit surrogate inference for missing modalities and two
//! interpretation procedures (kernel-dependence ratios and gradient flow).

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod interpret;
pub mod kernel;
pub mod linalg;
pub mod model;
pub mod net;
pub mod objective;
pub mod parallel;
pub mod surrogate;
pub mod synth;

pub use error::{MfmError, Result};
pub use linalg::{RngState, Tensor};
pub use parallel::Exec;
