//! Estimation of conditional and average interventional indirect effects
//! through one of two binary mediators.
//!
//! The crate is organised by concern:
//!
//! - [`model_core`]: observations, nuisance points, discrete problems.
//! - [`eif`]: pointwise influence functions.
//! - [`nuisance`]: fitted, synthetic and true nuisance sets; folds.
//! - [`estimators`]: one-step, projection, DR-Learner and ratio estimators.
//! - [`sensitivity`]: bounds under mediator-outcome confounding.
//! - [`simlab`]: simulation designs, truth curves and Monte-Carlo harnesses.
//! - [`oracle_verify`]: exact checks of remainder algebra by enumeration.

pub mod eif;
pub mod error;
pub mod estimators;
pub mod model_core;
pub mod nuisance;
pub mod oracle_verify;
pub mod sensitivity;
pub mod simlab;

pub use error::{IieError, Result};
pub use model_core::{
    ArmPair, DiscreteProblem, Estimand, MarginalizedOutcomes, NuisancePoint, NuisanceSet,
    Observation, Provenance, POSITIVITY_FLOOR,
};
