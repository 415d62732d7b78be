//! Offline imitation learning from observations with trajectory-aware
//! weighted behavior cloning.
//!
//! The pipeline trains a positive-unlabeled discriminator on task-specific
//! (expert, state-only) versus task-agnostic (state-action) data, turns its
//! logit into a per-state score `R(s)`, propagates `exp(alpha * R)` backwards
//! along each trajectory with discount `gamma`, and clones the task-agnostic
//! actions weighted by the result. Plain behavior cloning and a SMODICE-KL
//! dual baseline are included for comparison, together with synthetic
//! environments, dataset corruption tools and a reporting harness.

pub mod config;
pub mod dice;
pub mod discriminator;
pub mod data;
pub mod envs;
pub mod error;
pub mod nn;
pub mod pipeline;
pub mod policy;
pub mod report;
pub mod rng;
pub mod weights;

pub use config::{LossVariant, RunConfig};
pub use data::{Dataset, DatasetKind, Direction, NormStats, SourceTag, Trajectory};
pub use error::{Error, Result};
