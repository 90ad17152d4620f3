//! Distributionally robust logistic regression for mixed numerical and
//! categorical features under feature-specific distribution shift.
//!
//! The pipeline: [`dataset`] loads and encodes data, [`calibration`] turns
//! probabilities of certainty into ground-metric weights and a radius,
//! [`solve`] trains with one of several equivalent routes, and [`eval`]
//! scores a model on perturbed test sets.

// `!(x > 0.0)` is used on purpose so NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calibration;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod graph;
pub mod model;
pub mod separation;
pub mod solve;
pub mod synthetic;
