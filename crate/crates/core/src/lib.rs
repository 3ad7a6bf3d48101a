//! Audio-visual deep Kalman filter speech priors and variational-EM
//! speech enhancement with an NMF noise model.
//!
//! The pipeline: [`data`] synthesizes or loads audio-visual utterances,
//! [`train`] fits one of the four [`models::ModelKind`] priors by ELBO
//! maximization, [`enhance`] runs MAP/EM inference against a noisy
//! recording and reconstructs speech with a Wiener filter, and [`metrics`]
//! scores the result.

pub mod container;
pub mod data;
pub mod enhance;
pub mod error;
pub mod metrics;
pub mod models;
pub mod nnet;
pub mod par;
pub mod presets;
pub mod signal;
pub mod train;

pub use error::{Error, Result};
