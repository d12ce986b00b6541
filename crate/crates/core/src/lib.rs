//! Structural time-allocation modelling for comparing human and LLM decisions.
//!
//! The crate fits an interpretable share model to observed daily time
//! allocations, compares the recovered parameter matrices across decision
//! makers, stress-tests them under counterfactual covariate shifts, and
//! drives LLM agents (optionally retrieval-augmented) to produce decisions.

pub mod agents;
pub mod alignment;
pub mod error;
pub mod estimator;
pub mod ingest;
pub mod model;
pub mod rag;
pub mod record;
pub mod rng;
pub mod shifts;
pub mod synth;

pub use error::{Error, ErrorClass, Result};
