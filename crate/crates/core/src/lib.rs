//! CaberNet: causal representation learning for cross-domain time-series
//! energy prediction.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: dense tensors and a define-by-run reverse-mode tape.
//! - [`model`]: global feature gate, LSTM encoder, scale encoder and linear head.
//! - [`objectives`]: NMSE, gate regularizers, domain-wise aggregation,
//!   variance and independence penalties.
//! - [`data`]: CSV ingestion, preprocessing, windowing, leave-one-domain-out
//!   splits and the synthetic multi-domain SCM generator.
//! - [`trainer`]: Adam, batching, variant-gated training and LODO sweeps.
//! - [`explain`]: gate-weight tables and (debiased) input Jacobians.
//! - [`causal`]: DirectLiNGAM, Markov blankets, the blanket-masked baseline
//!   and latent SCM reconstruction.
//! - [`parallel`]: rayon-backed fan-out with a sequential fallback.

pub mod autodiff;
pub mod causal;
pub mod data;
mod error;
pub mod explain;
pub mod model;
pub mod objectives;
pub mod parallel;
pub mod rng;
pub mod stats;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};
