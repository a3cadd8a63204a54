//! Race/ethnicity imputation from surnames, given names and Census blocks.
//!
//! The crate covers the whole benchmarking pipeline:
//!
//! * [`ingest`]: voter-file parsing, name canonicalization and filtering.
//! * [`tables`]: P(race | surname), P(block | race) and P(name | race) tables
//!   and the probability feature vectors built from them.
//! * [`bisg`]: Bayesian Improved Surname Geocoding and its given-name
//!   extension.
//! * [`ml`]: multinomial logistic regression (optionally elastic-net
//!   penalized), classification trees, random forests and gradient boosting,
//!   with Latin hypercube cross-validated tuning and the leave-one-state-out
//!   protocol.
//! * [`eval`]: one-vs-rest AUC, calibration curves and tract-level RMSE/bias.
//! * [`synth`]: synthetic multi-state populations with an exact posterior oracle.

pub mod bisg;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod method;
pub mod ml;
pub mod race;
pub mod rng;
pub mod synth;
pub mod tables;

pub use error::{Error, Result};
pub use method::Method;
pub use race::{RaceCategory, RaceVector, NUM_RACES};
