//! Simulator for caching pretrained foundation models on a GPU-constrained
//! edge server and serving inference requests against a remote cloud.
//!
//! The crate is organised bottom-up:
//!
//! - [`catalog`]: model/task profiles and the in-context accuracy curve.
//! - [`workload`]: seeded Poisson/Zipf request traces and their CSV form.
//! - [`context`]: Age-of-Context weighting of stored demonstration examples.
//! - [`edgecache`]: GPU-memory accounting for whole-model load and evict.
//! - [`policy`]: the cache strategies behind a common trait and registry.
//! - [`simcost`]: the trace-driven engine and five-part system cost.
//! - [`experiment`]: JSON experiment configs, replication and comparison.

pub mod catalog;
pub mod context;
pub mod edgecache;
pub mod experiment;
pub mod policy;
pub mod simcost;
pub mod workload;

pub use catalog::{AccuracyModel, Catalog, ModelProfile, TaskProfile};
pub use context::{AoCConfig, ContextStore};
pub use edgecache::{CacheState, EdgeServerConfig};
pub use experiment::{ExperimentConfig, ExperimentError, PolicyReport};
pub use policy::{CachePolicy, Decision, PolicyKind, PolicyRegistry};
pub use simcost::{CostBreakdown, CostWeights, RunMetrics, Scenario, SimOptions};
pub use workload::{Request, WorkloadConfig};

/// A configuration value that failed validation, with the offending field.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{field}: {message}")]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl FieldError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}
