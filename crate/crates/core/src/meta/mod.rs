//! Meta-evolution: a constrained decision process over library, routing and
//! knowledge-graph edits, with CUSUM-driven performance-graph discovery, a
//! Lagrangian tabular policy and residual-driven primitive discovery.

mod cusum;
mod discover;
mod perf_graph;
mod policy;
mod system;

use thiserror::Error;

use crate::numerics::NumericsError;
use crate::primitives::PrimitiveError;
use crate::routing::RoutingError;

pub use cusum::{cusum_detect, warmup_len, MAX_WARMUP};
pub use discover::{discover_primitive, kmeans, mine_candidate, Candidate, DiscoveryConfig, ValidationReport};
pub use perf_graph::{
    fisher_z_pvalue, partial_correlation, update_perf_graph, PerfBatch, PerfCausalGraph, PerfEdge, PerfEquation, PerfGraphConfig,
    PerfUpdate, PerfVariable, VarKind,
};
pub use policy::{lagrangian, update_meta_policy, Duals, PolicyConfig, PolicyStep, TabularPolicy, Trajectory};
pub use system::{
    meta_run, meta_step, seed_meta_library, toy_tasks, ActionKind, Evaluation, KgOp, LogRecord, MetaAction, MetaRewardConfig,
    MetaRunConfig, MetaRunReport, MetaState, MetaSystem, Mechanism, Residual, StepOutcome, Task, BIN_COUNT, FAMILIES,
    WITHHELD_FAMILY,
};

/// Constraint costs: core-score floor violation, library-size excess,
/// execution-time excess.
pub const N_COSTS: usize = 3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetaError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("action not applicable: {0}")]
    Inapplicable(String),
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error(transparent)]
    Primitive(#[from] PrimitiveError),
    #[error(transparent)]
    Routing(#[from] RoutingError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}
