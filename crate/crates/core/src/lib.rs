//! Confounder-robust multimodal contrastive learning.
//!
//! Two encoders map paired observations (a drug-structure vector and a
//! screen readout) onto the unit sphere. Training maximizes a contrastive
//! lower bound on their dependence conditioned on the experimental batch:
//! negatives in the InfoNCE denominator are reweighted by batch posteriors
//! produced by two auxiliary classifiers. Plain CLIP-style and
//! conditional (same-batch negatives) objectives are provided as baselines.

pub mod augment;
pub mod config;
pub mod dataio;
pub mod discrete;
pub mod error;
pub mod eval;
pub mod frameworks;
pub mod nn;
pub mod numkern;
pub mod objectives;
pub mod optim;
pub mod persist;
pub mod pipeline;
pub mod simgen;

pub use error::{Error, Result};
