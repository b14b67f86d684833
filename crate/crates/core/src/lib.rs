//! Complier-average causal effects for bivariate cost-effectiveness outcomes
//! under one-sided non-compliance.

// `!(x > 0.0)` deliberately rejects NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bayes;
pub mod dgp;
pub mod dist;
pub mod freq;
pub mod io;
pub mod linalg;
pub mod missing;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod sim;

pub use model::{CausalEstimate, Interval, Lambda, Method, ModelError, Outcome, TrialDataset};
