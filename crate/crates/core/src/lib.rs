//! Meta-learning a parametric classification loss.
//!
//! A small dense "meta-loss network" maps `[p_true, p_false, 1, 0]` to a
//! positive loss value. Its weights are evolved with a self-adaptive
//! `(mu + lambda)` evolution strategy: each candidate loss trains a classifier
//! on a randomly generated task whose ground-truth classifier is known, and
//! fitness is the negated mean squared difference between the trained and the
//! ground-truth classifier outputs on validation data.

pub mod config;
pub mod error;
pub mod evalreport;
pub mod evolution;
pub mod idx;
pub mod innerloop;
pub mod loss;
pub mod nn;
pub mod persist;
pub mod seeds;
pub mod taskgen;

pub mod cli;

pub use error::{Error, Result};
