//! Simulator for federated learning with clustered client cohorts.
//!
//! Clients are grouped online by the direction of their model updates; a
//! cohort whose participants separate cleanly splits into child cohorts that
//! train their own models. The crate covers synthetic populations, local
//! training and aggregation, clustering and the cohort tree, a discrete-event
//! engine, fault handling, and a command line front end.

// `!(x > 0.0)` style checks are used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod clustering;
pub mod cohorttree;
pub mod config;
pub mod engine;
pub mod error;
pub mod fltrain;
pub mod population;
pub mod report;
pub mod resilience;
pub mod rng;

pub use error::{Error, Result};
