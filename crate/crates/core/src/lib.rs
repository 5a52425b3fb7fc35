//! Info-gap data filtering for cross-domain offline reinforcement learning.
//!
//! The crate is organised bottom-up:
//!
//! * [`mdp`] and [`data`]: tabular MDPs, empirical estimates, offline datasets and their file format.
//! * [`envs`]: paired source/target environment families with a dynamics-gap knob.
//! * [`info`]: exact information-theoretic quantities on tabular empirical MDPs.
//! * [`nn`]: a small dense-network substrate with explicit backward passes.
//! * [`contrastive`]: the score encoders and their contrastive objective.
//! * [`filter`]: score-ranked selection of source transitions and the classifier baseline.
//! * [`iql`]: implicit Q-learning with score-weighted source TD errors.
//! * [`harness`]: experiment configuration, pipelines, sweeps and reports.
//!
//! Data-parallel loops (Monte-Carlo blocks, evaluation batches, rollouts, seeds) go
//! through [`par`], which uses rayon when the `parallel` feature is enabled and
//! falls back to plain iteration otherwise. Results never depend on which path ran.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod contrastive;
pub mod data;
pub mod envs;
pub mod error;
pub mod filter;
pub mod harness;
pub mod info;
pub mod iql;
pub mod mdp;
pub mod nn;
pub mod par;
pub mod rng;

pub use error::{Error, Result};
