//! Replays synthetic edit traces against the engine under different
//! materialization policies and records the cumulative runtime curve.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::run_iteration_spec;
use crate::executor::{ClockMode, NoopObserver, RunConfig, RunReport};
use crate::policy::PolicyConfig;
use crate::workflow::{Action, WorkflowSpec};
use crate::Error;

pub const PREPROCESSING: &str = "data-preprocessing";
pub const ML: &str = "ml";
pub const EVALUATION: &str = "evaluation";

/// Iteration kinds in trace order.
pub const KINDS: [&str; 3] = [PREPROCESSING, ML, EVALUATION];

/// Label of the cold run that precedes every trace.
pub const INITIAL_KIND: &str = "initial";

/// Placeholder mix of edit kinds: pre-processing, ml, evaluation.
pub const DEFAULT_KIND_FREQUENCIES: [f64; 3] = [0.4, 0.4, 0.2];

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("no live node has kind `{0}`")]
    KindAbsent(String),
    #[error("kind frequencies must be non-negative and sum to 1, got {0:?}")]
    InvalidFrequencies([f64; 3]),
    #[error("a trace needs at least one iteration")]
    NoIterations,
    #[error("node `{0}` is not a simulated action")]
    NotSimulated(String),
    #[error("trace edits unknown node `{0}`")]
    UnknownNode(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Modification {
    pub target_kind: String,
    pub node: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub seed: u64,
    pub kind_frequencies: [f64; 3],
    pub steps: Vec<Modification>,
}

impl IterationTrace {
    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("trace serializes");
        text.push('\n');
        text
    }
}

/// Draw `n` edits: each step samples a kind by `frequencies` and then a
/// node of that kind uniformly (by name order).
pub fn generate_trace(
    spec: &WorkflowSpec,
    frequencies: [f64; 3],
    n: usize,
    seed: u64,
) -> Result<IterationTrace, SimError> {
    if n == 0 {
        return Err(SimError::NoIterations);
    }
    let sum: f64 = frequencies.iter().sum();
    if frequencies.iter().any(|f| !f.is_finite() || *f < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(SimError::InvalidFrequencies(frequencies));
    }
    let (live, _) = spec.prune_dead_operators();
    let mut by_kind: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for node in &live.nodes {
        by_kind
            .entry(node.kind.as_str())
            .or_default()
            .push(node.name.clone());
    }
    for names in by_kind.values_mut() {
        names.sort();
    }
    let kinds =
        WeightedIndex::new(frequencies).map_err(|_| SimError::InvalidFrequencies(frequencies))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut steps = Vec::with_capacity(n);
    for _ in 0..n {
        let kind = KINDS[kinds.sample(&mut rng)];
        let candidates = by_kind
            .get(kind)
            .ok_or_else(|| SimError::KindAbsent(kind.to_string()))?;
        let node = candidates[rng.random_range(0..candidates.len())].clone();
        steps.push(Modification {
            target_kind: kind.to_string(),
            node,
        });
    }
    Ok(IterationTrace {
        seed,
        kind_frequencies: frequencies,
        steps,
    })
}

/// Apply step `index` of a trace: give the node a fresh environment
/// fingerprint so its signature changes.
pub fn apply_edit(
    spec: &mut WorkflowSpec,
    step: &Modification,
    index: usize,
) -> Result<(), SimError> {
    let node = spec
        .nodes
        .iter_mut()
        .find(|n| n.name == step.node)
        .ok_or_else(|| SimError::UnknownNode(step.node.clone()))?;
    node.env_fingerprint = Some(format!("edit-{index}"));
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub kind: String,
    pub node: Option<String>,
    pub policy: String,
    pub iteration_seconds: f64,
    pub cumulative_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationResult {
    pub policy: PolicyConfig,
    pub records: Vec<IterationRecord>,
    pub reports: Vec<RunReport>,
}

impl SimulationResult {
    pub fn cumulative_seconds(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.cumulative_seconds)
    }

    /// Mean iteration time for edits of `kind`, or `None` if the trace has
    /// none.
    pub fn mean_iteration_seconds(&self, kind: &str) -> Option<f64> {
        let times: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.kind == kind)
            .map(|r| r.iteration_seconds)
            .collect();
        (!times.is_empty()).then(|| times.iter().sum::<f64>() / times.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    pub policy: PolicyConfig,
    pub budget_bytes: Option<u64>,
    pub disk_bandwidth: f64,
}

/// Run a cold iteration followed by one iteration per trace step, in a
/// private scratch workspace and cache, under the simulated clock.
pub fn simulate(
    spec: &WorkflowSpec,
    trace: &IterationTrace,
    config: &SimulationConfig,
) -> Result<SimulationResult, Error> {
    if let Some(node) = spec.nodes.iter().find(|n| !n.action.is_simulated()) {
        return Err(SimError::NotSimulated(node.name.clone()).into());
    }
    let scratch = tempfile::tempdir().map_err(|source| Error::Io {
        path: std::env::temp_dir(),
        source,
    })?;
    let workspace = scratch.path().join("workspace");
    let cache_root = scratch.path().join("cache");
    write_sources(spec, &workspace)?;

    let run_config = RunConfig {
        clock: ClockMode::Simulated,
        policy: config.policy,
        budget_bytes: config.budget_bytes,
        disk_bandwidth: config.disk_bandwidth,
        dry_run: false,
    };
    let label = config.policy.label().to_string();
    let mut current = spec.clone();
    let mut records = Vec::with_capacity(trace.steps.len() + 1);
    let mut reports = Vec::with_capacity(trace.steps.len() + 1);
    for iteration in 0..=trace.steps.len() {
        let (kind, node) = match iteration {
            0 => (INITIAL_KIND.to_string(), None),
            i => {
                let step = &trace.steps[i - 1];
                apply_edit(&mut current, step, i)?;
                (step.target_kind.clone(), Some(step.node.clone()))
            }
        };
        let outcome = run_iteration_spec(
            &current,
            &workspace,
            &cache_root,
            &run_config,
            &mut NoopObserver,
        )?;
        let report = outcome.report.expect("not a dry run");
        records.push(IterationRecord {
            iteration,
            kind,
            node,
            policy: label.clone(),
            iteration_seconds: report.totals.iteration_seconds,
            cumulative_seconds: report.cumulative_seconds,
        });
        reports.push(report);
    }
    Ok(SimulationResult {
        policy: config.policy,
        records,
        reports,
    })
}

fn write_sources(spec: &WorkflowSpec, workspace: &Path) -> Result<(), Error> {
    for node in &spec.nodes {
        for source in &node.sources {
            let path = workspace.join(source);
            let io = |source| Error::Io {
                path: path.clone(),
                source,
            };
            if let Some(dir) = path.parent() {
                fs::create_dir_all(dir).map_err(io)?;
            }
            fs::write(&path, format!("synthetic source {source}\n")).map_err(io)?;
        }
    }
    fs::create_dir_all(workspace).map_err(|source| Error::Io {
        path: workspace.to_path_buf(),
        source,
    })
}

/// Per-iteration table, tab separated, one block per policy in the given
/// order.
pub fn format_table(results: &[SimulationResult]) -> String {
    let mut out = String::from("iteration\tkind\tpolicy\titeration_seconds\tcumulative_seconds\n");
    for result in results {
        for r in &result.records {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{:.3}\t{:.3}",
                r.iteration, r.kind, r.policy, r.iteration_seconds, r.cumulative_seconds
            );
        }
    }
    out
}

/// Long-format CSV of the same curves plus the edited node, for plotting.
pub fn format_csv(results: &[SimulationResult]) -> String {
    let mut out = String::from("policy,iteration,kind,node,iteration_seconds,cumulative_seconds\n");
    for result in results {
        for r in &result.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.6},{:.6}",
                r.policy,
                r.iteration,
                r.kind,
                r.node.as_deref().unwrap_or(""),
                r.iteration_seconds,
                r.cumulative_seconds
            );
        }
    }
    out
}

/// Cold-run compute time of each kind, for checking a scenario's shape.
pub fn cold_compute_by_kind(spec: &WorkflowSpec) -> BTreeMap<String, f64> {
    let (live, _) = spec.prune_dead_operators();
    let mut totals = BTreeMap::new();
    for node in &live.nodes {
        if let Action::Simulated {
            compute_seconds, ..
        } = node.action
        {
            *totals.entry(node.kind.clone()).or_insert(0.0) += compute_seconds;
        }
    }
    totals
}
