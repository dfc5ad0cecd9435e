//! Multi-view regularized meta-learning (MVRML) and multi-view prediction (MVP)
//! for domain generalization, at desk scale.
//!
//! The crate trains small dense classifiers (optionally with batch
//! normalization) on multi-domain data and compares three training schemes:
//!
//! - ERM: plain supervised training on pooled source domains.
//! - Reptile: first-order episodic meta-learning, one task per trajectory.
//! - MVRML: several independent trajectories of several tasks each, whose end
//!   points are weight-averaged before the outer interpolation step.
//!
//! Alongside the trainers live the diagnostics used to study them: test-time
//! multi-view prediction, prediction change rate, a sharpness probe, a
//! loss-surface plane and a stability-based generalization bound.
//!
//! Module map:
//!
//! - [`nn`]: dense networks, batch norm, cross-entropy, gradients, optimizers.
//! - [`domains`]: synthetic domain generator, CSV suites, divergences.
//! - [`episodic`]: task sampling strategies.
//! - [`meta`]: ERM / Reptile / MVRML trainers and BN re-estimation.
//! - [`mvp`]: weak transforms, multi-view prediction, prediction change rate.
//! - [`analysis`]: sharpness, loss-surface plane, generalization bound.
//! - [`cli`]: the `mvdg` command-line driver.

// Range checks are written `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod cli;
pub mod domains;
pub mod episodic;
mod error;
pub mod meta;
pub mod mvp;
pub mod nn;
pub mod rng;

pub use error::{Error, Result};
