//! Differentially private parameter estimation for truncated exponential
//! families.
//!
//! The crate minimises the truncated negative log-likelihood with projected
//! noisy SGD, after a private bounding box and a recursive warm start have
//! localised the parameter. Gaussian mean and covariance estimators are built
//! on top of the generic pipeline, and [`harness`] drives everything from the
//! command line.

pub mod error;
pub mod estimator;
pub mod expfam;
pub mod gaussian;
pub mod harness;
pub mod privacy;
pub mod truncation;
pub mod warmstart;

pub use error::{Error, Result};
pub use expfam::{FamilySpec, ParamVec, SuffStatVec, ThetaSpace};
pub use privacy::{BudgetLedger, Composition, NoiseMode, PrivacyBudget};
pub use truncation::{Dataset, SurvivalSet, TruncatedDataset};
