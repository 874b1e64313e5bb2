//! Single-channel speech enhancement with a VAE speech prior and an NMF
//! noise model.
//!
//! The proposed engine ([`inference::run_vem`]) is a variational EM whose
//! latent posterior is given by the pre-trained VAE encoder. Two baselines
//! share the same model: a Monte Carlo EM with a Metropolis-Hastings E-step
//! ([`inference::run_mcem`]) and a heuristic variant of the variational
//! engine ([`inference::run_heuristic`]).
//!
//! Frame-level loops run on rayon with the default `parallel` feature and
//! sequentially without it; outputs are identical either way.

pub mod benchmark;
pub mod dsp;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod model_store;
pub mod nmf;
pub mod par;
pub mod pipeline;
pub mod vae;

pub use error::{Error, Result};
