//! Iteration-aware workflow engine.
//!
//! A workflow is a DAG of operators. Between iterations the engine works out
//! which operators changed, picks the cheapest way to produce the requested
//! outputs from what is already cached, and decides online which fresh
//! intermediates are worth keeping for next time.

use std::path::PathBuf;

pub mod cache;
pub mod cli;
pub mod engine;
pub mod executor;
pub mod maxflow;
pub mod plan;
pub mod policy;
pub mod scenarios;
pub mod signature;
pub mod sim;
pub mod workflow;

pub use cache::{CacheEntry, CacheError, CacheManifest, CacheStore, GcReport, WriteStep};
pub use engine::{
    prepare_iteration, run_iteration, run_iteration_spec, IterationOutcome, PreparedIteration,
};
pub use executor::{
    execute, ClockMode, ExecError, ExecutionInput, ExecutionObserver, NodeOutcome, NodeRecord,
    RunConfig, RunReport,
};
pub use plan::{
    assign_states_bruteforce, assign_states_optimal, plan_cost, CostRecord, ExecutionPlan,
    NodeState, PlanError,
};
pub use policy::{
    decide, decide_with, r_value, MaterializationDecision, PolicyConfig, PolicyDirection,
    PolicyError, StorageBudget,
};
pub use signature::{
    compute_signatures, diff_iterations, ChangeSet, NodeSignature, SignatureError,
};
pub use sim::{
    generate_trace, simulate, IterationTrace, SimError, SimulationConfig, SimulationResult,
};
pub use workflow::{
    parse_workflow, prune_dead_operators, topological_order, Action, Dag, OperatorNode,
    WorkflowError, WorkflowSpec,
};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Workflow(#[from] WorkflowError),
    #[error(transparent)]
    Signature(#[from] SignatureError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Simulation(#[from] SimError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed run log: {0}")]
    RunLog(String),
}
