//! One development iteration end to end: parse, prune dead operators,
//! fingerprint, diff against the last successful run, plan and execute.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cache::CacheStore;
use crate::executor::{
    execute, ExecutionInput, ExecutionObserver, NoopObserver, RunConfig, RunReport,
    DEFAULT_COMMAND_SECONDS,
};
use crate::plan::{assign_states_optimal, CostRecord, ExecutionPlan};
use crate::policy::estimate_load_seconds;
use crate::signature::{compute_signatures, diff_iterations, ChangeSet, NodeSignature};
use crate::workflow::{parse_workflow, Action, WorkflowSpec};
use crate::Error;

pub const RUN_LOG_FILE: &str = "runs.log";

/// Everything decided before any operator runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedIteration {
    /// The workflow with dead operators removed.
    pub spec: WorkflowSpec,
    pub removed: BTreeSet<String>,
    pub signatures: BTreeMap<String, NodeSignature>,
    pub changes: ChangeSet,
    pub costs: BTreeMap<String, CostRecord>,
    pub plan: ExecutionPlan,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationOutcome {
    pub prepared: PreparedIteration,
    /// `None` for a dry run.
    pub report: Option<RunReport>,
}

/// Planner inputs for each live node, from the declared action, the cost
/// history and what the cache holds under the node's current signature.
pub fn estimate_costs(
    spec: &WorkflowSpec,
    signatures: &BTreeMap<String, NodeSignature>,
    cache: &CacheStore,
    disk_bandwidth: f64,
) -> BTreeMap<String, CostRecord> {
    let history = &cache.manifest().cost_history;
    spec.nodes
        .iter()
        .map(|node| {
            let past = history.get(&node.name);
            let (compute_seconds, declared_bytes) = match &node.action {
                Action::Simulated {
                    compute_seconds,
                    output_bytes,
                } => (*compute_seconds, Some(*output_bytes)),
                Action::Command {
                    estimated_seconds, ..
                } => (
                    past.map(|c| c.compute_seconds)
                        .or(*estimated_seconds)
                        .unwrap_or(DEFAULT_COMMAND_SECONDS),
                    None,
                ),
            };
            let entry = signatures.get(&node.name).and_then(|s| cache.entry(s));
            let output_bytes = entry
                .map(|e| e.output_bytes)
                .or(declared_bytes)
                .or(past.map(|c| c.output_bytes))
                .unwrap_or(0);
            let load_seconds = entry.map(|e| {
                e.measured_load_seconds
                    .unwrap_or_else(|| estimate_load_seconds(e.output_bytes, disk_bandwidth))
            });
            let record = CostRecord {
                compute_seconds,
                load_seconds,
                output_bytes,
            };
            (node.name.clone(), record)
        })
        .collect()
}

/// Plan an iteration against the current cache without touching it.
pub fn prepare_iteration(
    spec: &WorkflowSpec,
    workspace: &Path,
    cache: &CacheStore,
    config: &RunConfig,
) -> Result<PreparedIteration, Error> {
    let (live, removed) = spec.prune_dead_operators();
    let signatures = compute_signatures(&live, workspace)?;
    let changes = diff_iterations(&cache.manifest().previous_signatures, &signatures);
    let costs = estimate_costs(&live, &signatures, cache, config.disk_bandwidth);
    let plan = assign_states_optimal(&live.dag(), &costs, &changes.changed, &live.output_set())?;
    Ok(PreparedIteration {
        spec: live,
        removed,
        signatures,
        changes,
        costs,
        plan,
    })
}

pub fn read_spec(path: &Path) -> Result<WorkflowSpec, Error> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(parse_workflow(&text)?)
}

/// Run the full pipeline for the workflow stored at `spec_path`.
pub fn run_iteration(
    spec_path: &Path,
    workspace: &Path,
    cache_root: &Path,
    config: &RunConfig,
) -> Result<IterationOutcome, Error> {
    let spec = read_spec(spec_path)?;
    run_iteration_spec(&spec, workspace, cache_root, config, &mut NoopObserver)
}

/// As [`run_iteration`], for a workflow already in memory.
pub fn run_iteration_spec(
    spec: &WorkflowSpec,
    workspace: &Path,
    cache_root: &Path,
    config: &RunConfig,
    observer: &mut dyn ExecutionObserver,
) -> Result<IterationOutcome, Error> {
    if !workspace.is_dir() {
        return Err(Error::Io {
            path: workspace.to_path_buf(),
            source: std::io::Error::new(
                std::io::ErrorKind::NotFound,
                "workspace is not a directory",
            ),
        });
    }
    if config.dry_run {
        let cache = CacheStore::open_read_only(cache_root)?;
        let prepared = prepare_iteration(spec, workspace, &cache, config)?;
        return Ok(IterationOutcome {
            prepared,
            report: None,
        });
    }
    let mut cache = CacheStore::open(cache_root)?;
    let prepared = prepare_iteration(spec, workspace, &cache, config)?;
    let last = last_run(cache_root)?;
    let input = ExecutionInput {
        spec: &prepared.spec,
        plan: &prepared.plan,
        signatures: &prepared.signatures,
        costs: &prepared.costs,
        workspace,
        iteration_index: last.as_ref().map_or(0, |r| r.iteration_index + 1),
        prior_cumulative_seconds: last.as_ref().map_or(0.0, |r| r.cumulative_seconds),
    };
    match execute(input, &mut cache, config, observer) {
        Ok(report) => {
            append_run_log(cache_root, &report)?;
            Ok(IterationOutcome {
                prepared,
                report: Some(report),
            })
        }
        Err(err) => {
            if let Some(report) = err.report() {
                append_run_log(cache_root, report)?;
            }
            Err(err.into())
        }
    }
}

fn run_log_path(cache_root: &Path) -> PathBuf {
    cache_root.join(RUN_LOG_FILE)
}

/// Every report in the run log, oldest first.
pub fn read_run_log(cache_root: &Path) -> Result<Vec<RunReport>, Error> {
    let path = run_log_path(cache_root);
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(source) => return Err(Error::Io { path, source }),
    };
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::RunLog(e.to_string())))
        .collect()
}

fn last_run(cache_root: &Path) -> Result<Option<RunReport>, Error> {
    Ok(read_run_log(cache_root)?.pop())
}

fn append_run_log(cache_root: &Path, report: &RunReport) -> Result<(), Error> {
    let path = run_log_path(cache_root);
    let io_err = |source| Error::Io {
        path: path.clone(),
        source,
    };
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(io_err)?;
    writeln!(file, "{}", report.to_json_line()).map_err(io_err)?;
    file.sync_all().map_err(io_err)
}
