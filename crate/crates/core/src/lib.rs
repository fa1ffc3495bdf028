//! Difficulty-aware semantic augmentation for speaker-embedding learning.
//!
//! The crate provides the loss family (softmax, ISDA bound, AM-Softmax,
//! DAAM-Softmax, DASA bound) with analytic gradients, streaming per-class
//! covariance estimation, a Monte-Carlo oracle that checks the closed-form
//! bounds against explicit augmentation, a small embedding network and
//! trainer, a synthetic data generator and EER/minDCF scoring.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod loss;
pub mod mc;
pub mod model;
pub mod rng;
pub mod stats;
pub mod train;
pub mod verify;

mod csvio;
mod vecops;

pub use error::{Error, Result};
