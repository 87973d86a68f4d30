//! Hierarchy-aware continual learning with hyperbolic prototypes.
//!
//! A class–instance taxonomy is embedded once into the Poincaré ball
//! ([`embedding`]); a small feature extractor is then trained task by task
//! to map samples next to their instance prototypes ([`learner`]), and the
//! run is scored at instance, class and superclass granularity
//! ([`metrics`]). [`harness`] ties the stages together over synthetic data.

pub mod embedding;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod hierarchy;
pub mod learner;
pub mod metrics;
pub mod stats;
mod vecops;

pub use error::{Error, Result};
pub use geometry::{BallConfig, BallPoint, TangentVector};
pub use hierarchy::{ClosurePair, HierarchyTree, NodeKind};
