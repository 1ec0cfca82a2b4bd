//! Doubly robust generative modelling of counterfactual outcome
//! distributions from observational data.
//!
//! A generative model is trained to minimise a cross-fitted, doubly robust
//! estimate of its counterfactual risk. Three hypothesis classes are
//! provided: flow matching, VP diffusion and a tabular autoregressive
//! softmax. Synthetic confounded data generators with exactly known
//! counterfactual laws make every estimator checkable.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autoreg;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod flow;
pub mod nn;
pub mod nuisance;
pub mod pipeline;
pub mod risk;
pub mod rng;
pub mod stats;
pub mod synth;

pub use data::{Observation, Outcome, Token};
pub use error::{Error, Result};
pub use risk::{doublegen_risk, Method, RiskInput, RiskSpec};
pub use rng::{Rng, RngStream};
