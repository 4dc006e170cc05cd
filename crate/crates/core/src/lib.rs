//! Spatially correlated Wiener-process degradation modeling with time-varying
//! environmental covariates: analytic moments and covariance assembly, exact
//! path simulation, profile-likelihood estimation, space-filling unit
//! selection, sequential D-optimal time selection, and first-passage Monte
//! Carlo reliability prediction.

pub mod config;
pub mod data;
pub mod error;
pub mod estimation;
pub mod kernel;
pub mod model;
pub mod optim;
pub mod params;
pub mod profile;
pub mod reliability;
pub mod rng;
pub mod spatial;
pub mod temporal;

pub use data::{Observation, ObservationSet};
pub use error::{Error, Result};
pub use params::ModelParams;
pub use profile::{CovariateProfile, Segment};
