//! Semi-supervised estimation of covariate effects from doubly censored event
//! times.
//!
//! A supervised NPMLE fit of a semiparametric transformation model on a small
//! labeled set is augmented with working-model fits of a surrogate outcome that
//! is observed for the whole cohort. The augmentation subtracts the
//! variance-optimal linear combination of labeled-vs-full discrepancies in the
//! working-model coefficients, so it stays consistent whether or not the
//! working models are correct.
//!
//! Modules, bottom-up:
//!
//! - [`data`]: doubly censored records, cohorts, CSV I/O.
//! - [`transform`]: the `G(x, r)` family and its gamma frailty moments.
//! - [`em`]: EM/NPMLE fit of `(β, Λ)`.
//! - [`composite`]: logistic + Cox composite likelihood working model.
//! - [`influence`]: per-subject influence rows and covariance blocks.
//! - [`augment`]: the SL/SSL1/SSL2/SSL3 estimators.
//! - [`sim`]: data-generating process and Monte Carlo harness.

pub mod augment;
pub mod composite;
pub mod data;
pub mod em;
pub mod error;
pub mod influence;
pub mod linalg;
pub mod sim;
pub mod transform;

pub use data::{derive_observation, CensoringCode, Cohort, EventData, Outcome, SubjectRecord};
pub use error::{Error, Result};
pub use transform::TransformParam;
