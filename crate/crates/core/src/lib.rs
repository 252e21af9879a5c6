//! Joint learning of a sequential measurement policy and a stochastic imputer
//! from missing-only data.
//!
//! The imputer turns real missing examples into pseudo-complete data; the
//! policy is trained with REINFORCE to choose measurements that make those
//! examples easy to impute; the imputer in turn adapts to the missingness the
//! policy produces.

pub mod datasets;
pub mod env;
pub mod error;
pub mod eval;
pub mod imputer;
pub mod joint;
pub mod missingness;
pub mod nn;
pub mod policy;
pub mod seeding;

pub use error::{Error, Result};
