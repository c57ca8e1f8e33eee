//! Featurized Koopman mode decomposition.
//!
//! Samples are double time embeddings of a multichannel series. Koopman
//! matrices are estimated by ridge regression in a feature space built from
//! Mahalanobis-scaled Gaussian kernels or random Fourier features, and the
//! Mahalanobis matrix is re-learned each iteration from gradient outer
//! products of the fitted Koopman eigenfunctions.
//!
//! The main entry point is [`fkmd::run`]; the modules underneath are usable
//! on their own.

pub mod embed;
pub mod error;
pub mod featurize;
pub mod fkmd;
pub mod koopman;
pub mod linalg;
pub mod lorenz96;
pub mod mahalanobis;
pub mod samples;
pub mod score;
pub mod tseries;

mod rng;

pub use error::{ErrorClass, FkmdError, Result};
