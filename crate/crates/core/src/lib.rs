//! Stealthy false-data injection on DC power grids and a federated
//! multilabel detector trained across simulated edge servers.
//!
//! The pipeline: [`grid`] builds the measurement matrix, [`dataset`]
//! generates noisy readings with [`attack`] vectors mixed in, [`estimation`]
//! shows the residual test cannot see them, and [`federated`] trains the
//! [`neural`] detector whose predictions [`metrics`] scores.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod config;
pub mod dataset;
pub mod error;
pub mod estimation;
pub mod federated;
pub mod grid;
pub mod metrics;
pub mod neural;
pub mod registry;
pub mod rng;

pub use error::{Error, Result};
