//! Generative causal models for telling seen from unseen classes.
//!
//! A sample is explained by a class attribute `y` and a sample attribute `z`.
//! The model learns an encoder `Q(Z|X)`, a decoder `P(X|Z,Y)` and a regressor
//! `Q(Y|X)`. A test input is then compared with its counterfactuals: "what
//! would this sample look like had it belonged to class `y`?"
//! [`inference`] turns those distances into zero-shot and open-set decisions.
//!
//! [`oracle`] provides a synthetic world with known factors, used to measure
//! how faithful the learned counterfactuals are. [`cli`] backs the `gcmcf`
//! binary.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod counterfactual;
pub mod data;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod rng;
pub mod tensor;
pub mod training;
