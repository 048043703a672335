//! Funnel-library motion planning with PAC-Bayes generalization certificates.
//!
//! The crate covers the full pipeline: disturbed plant models, a motion
//! primitive library with tracking controllers, validated reachability
//! funnels, highway and obstacle-field environments, score-network policies,
//! evolution-strategies prior training, and posterior certification.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dynamics;
pub mod environments;
pub mod error;
pub mod interval;
pub mod learning;
pub mod pipeline;
pub mod policy;
pub mod primitives;
pub mod reachability;
pub mod scalar;
pub mod seed;

pub use dynamics::{ControlInput, DisturbanceSet, DisturbanceSignal, SystemState, Trajectory};
pub use environments::{CostRecord, Environment, EnvironmentKind, Observation};
pub use error::{Error, Result};
pub use interval::{Interval, IntervalBox};
pub use policy::{EpisodeContext, EpisodeMode, EpisodeTrace, PolicyParams};
pub use primitives::{PrimitiveLibrary, PrimitiveSpec, SystemModel};
pub use reachability::{Arm, Funnel, FunnelLibrary};
