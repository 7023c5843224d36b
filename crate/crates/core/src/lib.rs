//! Regression with two unknown within-block permutations: one scrambling the
//! exposure against the outcome, one scrambling the outcome against its
//! spatial location.

pub mod baselines;
pub mod covkernel;
pub mod error;
pub mod oracle;
pub mod permops;
pub mod record;
pub mod repair;
pub mod seeding;
pub mod simulate;

pub use covkernel::{CorrelationMatrix, CovarianceParams, DomainPoints};
pub use error::{Error, Result};
pub use permops::{Permutation, RelaxedPermParams};
