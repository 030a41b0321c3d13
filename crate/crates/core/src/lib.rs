//! Compositional contrastive training on a simulated data-parallel fabric.
//!
//! The crate is organised bottom-up: [`loss`] holds the exact losses and
//! their closed-form derivatives, [`engine`] builds per-worker stochastic
//! estimators from them, [`dist`] moves data between simulated workers and
//! counts every scalar on the wire, and [`trainer`] ties these together with
//! [`optim`], [`schedule`] and [`state`].

// `!(x > 0.0)` comparisons deliberately reject NaN alongside out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Single-layer parameter groups are one-element range lists.
#![allow(clippy::single_range_in_vec_init)]

pub mod config;
pub mod data;
pub mod dist;
pub mod encoder;
pub mod engine;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod par;
pub mod report;
pub mod run;
pub mod schedule;
pub mod state;
pub mod trainer;

pub use error::{Error, Result};
