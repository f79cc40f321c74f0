//! Hierarchical, time-inhomogeneous hidden Markov jump processes for
//! irregularly sampled longitudinal screening data.
//!
//! Each individual belongs to a latent class with its own piecewise-constant
//! intensity matrix over age segments. Latent states emit Poisson counts of
//! tests per visit with multinomial grade results. Parameters are learned by
//! a Monte Carlo EM whose M-step runs L-BFGS on the expected complete-data
//! log-likelihood, with E-step work spread over clusters of sequences.
//!
//! All numerical code is generic over [`Real`] (`f32` or `f64`); the aliases
//! at the crate root fix the scalar to `f64`.

pub mod config;
pub mod data;
pub mod emissions;
pub mod error;
pub mod fixtures;
pub mod inference;
pub mod io;
pub mod kernel;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod predict;
pub mod reduce;
pub mod scalar;
pub mod simulate;
pub mod survival;
pub mod train;

pub use config::{EmConfig, FitTargets, StateAssignment};
pub use data::{Censoring, Outcome};
pub use error::{Error, Result};
pub use model::{TransitionMask, Violation};
pub use scalar::Real;

pub type Matrix = linalg::Matrix<f64>;
pub type AgePartition = model::AgePartition<f64>;
pub type PiecewiseIntensity = model::PiecewiseIntensity<f64>;
pub type EmissionModel = model::EmissionModel<f64>;
pub type ClassComponent = model::ClassComponent<f64>;
pub type HierarchicalModel = model::HierarchicalModel<f64>;
pub type Visit = data::Visit<f64>;
pub type ScreeningSequence = data::ScreeningSequence<f64>;
pub type TransitionMatrix = kernel::TransitionMatrix<f64>;
pub type LatentTrajectory = simulate::LatentTrajectory<f64>;
