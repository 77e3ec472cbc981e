//! Runs an execution plan: loads cached intermediates, computes the rest in
//! dependency order and makes the materialization decision for each node
//! as soon as it finishes.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, Read};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::{CacheError, CacheStore};
use crate::plan::{CostRecord, ExecutionPlan, NodeState};
use crate::policy::{
    decide_with, estimate_load_seconds, MaterializationDecision, PolicyConfig, PolicyError,
    StorageBudget, DEFAULT_DISK_BANDWIDTH,
};
use crate::signature::NodeSignature;
use crate::workflow::{Action, OperatorNode, WorkflowSpec};

/// Cost assumed for a command that has never run and has no estimate.
pub const DEFAULT_COMMAND_SECONDS: f64 = 1.0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    /// Wall-clock measurements.
    #[default]
    Real,
    /// Virtual time: operators take their estimated cost, loads and writes
    /// take `bytes / disk_bandwidth`. Fully deterministic.
    Simulated,
}

impl std::str::FromStr for ClockMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "real" => Ok(ClockMode::Real),
            "simulated" => Ok(ClockMode::Simulated),
            other => Err(format!(
                "unknown clock mode `{other}` (expected real or simulated)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub clock: ClockMode,
    pub policy: PolicyConfig,
    /// Storage budget for the whole cache; `None` is unlimited.
    pub budget_bytes: Option<u64>,
    /// Bytes per second used to estimate load and write times.
    pub disk_bandwidth: f64,
    pub dry_run: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            clock: ClockMode::Real,
            policy: PolicyConfig::default(),
            budget_bytes: None,
            disk_bandwidth: DEFAULT_DISK_BANDWIDTH,
            dry_run: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum NodeOutcome {
    Computed,
    Loaded,
    Pruned,
    Failed {
        exit_code: Option<i32>,
        message: String,
    },
    /// Not run because something upstream failed.
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub name: String,
    pub kind: String,
    pub state: NodeState,
    pub outcome: NodeOutcome,
    pub signature: NodeSignature,
    pub compute_seconds: f64,
    pub load_seconds: f64,
    pub write_seconds: f64,
    pub wall_seconds: f64,
    pub materialized: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_value: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTotals {
    pub compute_seconds: f64,
    pub load_seconds: f64,
    pub write_seconds: f64,
    pub iteration_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub iteration_index: u64,
    pub clock_mode: ClockMode,
    pub policy: String,
    pub planned_cost_seconds: f64,
    pub nodes: Vec<NodeRecord>,
    pub totals: RunTotals,
    pub cumulative_seconds: f64,
    pub success: bool,
}

impl RunReport {
    pub fn record(&self, name: &str) -> Option<&NodeRecord> {
        self.nodes.iter().find(|r| r.name == name)
    }

    pub fn materialized(&self) -> impl Iterator<Item = &NodeRecord> {
        self.nodes.iter().filter(|r| r.materialized)
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("operator `{name}` failed{}: {message}", exit_code.map(|c| format!(" with exit code {c}")).unwrap_or_default())]
    OperatorFailed {
        name: String,
        exit_code: Option<i32>,
        message: String,
        report: Box<RunReport>,
    },
    #[error("could not load `{name}` and its inputs are unavailable: {reason}")]
    LoadFailed {
        name: String,
        reason: String,
        report: Box<RunReport>,
    },
    #[error("plan does not cover node `{0}`")]
    IncompletePlan(String),
    #[error("no signature for node `{0}`")]
    MissingSignature(String),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

impl ExecError {
    /// The partial report of a failed run, if this error carries one.
    pub fn report(&self) -> Option<&RunReport> {
        match self {
            ExecError::OperatorFailed { report, .. } | ExecError::LoadFailed { report, .. } => {
                Some(report)
            }
            _ => None,
        }
    }
}

/// Hooks for watching a run as it happens.
pub trait ExecutionObserver {
    fn node_started(&mut self, _name: &str, _state: NodeState) {}
    fn decided(&mut self, _decision: &MaterializationDecision) {}
    fn node_finished(&mut self, _record: &NodeRecord) {}
}

pub struct NoopObserver;

impl ExecutionObserver for NoopObserver {}

/// Everything `execute` needs besides the cache and configuration.
#[derive(Debug, Clone, Copy)]
pub struct ExecutionInput<'a> {
    pub spec: &'a WorkflowSpec,
    pub plan: &'a ExecutionPlan,
    pub signatures: &'a BTreeMap<String, NodeSignature>,
    /// Costs the plan was made with; decisions start from these.
    pub costs: &'a BTreeMap<String, CostRecord>,
    pub workspace: &'a Path,
    pub iteration_index: u64,
    pub prior_cumulative_seconds: f64,
}

/// Deterministic stand-in bytes for a simulated operator's output.
pub struct SyntheticPayload {
    state: u64,
    remaining: u64,
    pending: [u8; 8],
    pending_len: usize,
}

impl SyntheticPayload {
    pub fn new(sig: &NodeSignature, len: u64) -> Self {
        let seed = u64::from_str_radix(&sig.as_str()[..16.min(sig.as_str().len())], 16)
            .unwrap_or(0x9e37_79b9_7f4a_7c15);
        SyntheticPayload {
            state: seed,
            remaining: len,
            pending: [0; 8],
            pending_len: 0,
        }
    }

    fn next_word(&mut self) -> [u8; 8] {
        // splitmix64
        self.state = self.state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        (z ^ (z >> 31)).to_le_bytes()
    }
}

impl Read for SyntheticPayload {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let want = (buf.len() as u64).min(self.remaining) as usize;
        let mut filled = 0;
        while filled < want {
            if self.pending_len == 0 {
                self.pending = self.next_word();
                self.pending_len = 8;
            }
            let start = 8 - self.pending_len;
            let take = self.pending_len.min(want - filled);
            buf[filled..filled + take].copy_from_slice(&self.pending[start..start + take]);
            self.pending_len -= take;
            filled += take;
        }
        self.remaining -= want as u64;
        Ok(want)
    }
}

/// Where a node's output lives during this run.
#[derive(Debug, Clone)]
enum Output {
    File(PathBuf),
    /// Simulated operator; bytes are generated on demand.
    Synthetic,
}

struct Run<'a, 'c> {
    input: ExecutionInput<'a>,
    config: &'a RunConfig,
    cache: &'c mut CacheStore,
    decision_costs: BTreeMap<String, CostRecord>,
    budget: StorageBudget,
    outputs: BTreeMap<String, Output>,
    scratch: Option<tempfile::TempDir>,
}

/// Execute `plan` over `spec`. Nodes run one at a time in topological
/// order. A failing operator stops only its own descendants; the error is
/// returned once every independent node has had its turn.
pub fn execute(
    input: ExecutionInput<'_>,
    cache: &mut CacheStore,
    config: &RunConfig,
    observer: &mut dyn ExecutionObserver,
) -> Result<RunReport, ExecError> {
    let dag = input.spec.dag();
    for name in dag.names() {
        if input.plan.state(name).is_none() {
            return Err(ExecError::IncompletePlan(name.clone()));
        }
        if !input.signatures.contains_key(name) {
            return Err(ExecError::MissingSignature(name.clone()));
        }
    }
    let budget = StorageBudget::new(config.budget_bytes.unwrap_or(u64::MAX), cache.total_bytes());
    let mut run = Run {
        input,
        config,
        decision_costs: input.costs.clone(),
        budget,
        cache,
        outputs: BTreeMap::new(),
        scratch: None,
    };

    let mut records: Vec<NodeRecord> = Vec::with_capacity(dag.len());
    let mut blocked = vec![false; dag.len()];
    let mut first_failure: Option<(String, FailureKind)> = None;

    for i in dag.topological_order() {
        let node = input.spec.node(dag.name(i)).expect("dag from spec");
        let state = input.plan.state(&node.name).expect("checked above");
        let sig = input.signatures[&node.name].clone();
        let mut record = NodeRecord {
            name: node.name.clone(),
            kind: node.kind.clone(),
            state,
            outcome: NodeOutcome::Pruned,
            signature: sig.clone(),
            compute_seconds: 0.0,
            load_seconds: 0.0,
            write_seconds: 0.0,
            wall_seconds: 0.0,
            materialized: false,
            r_value: None,
        };
        let upstream_blocked = dag.parents(i).iter().any(|&p| blocked[p]);

        match state {
            NodeState::Prune => {}
            NodeState::Load => {
                observer.node_started(&node.name, state);
                match run.load(node, &sig, &mut record) {
                    Ok(()) => record.outcome = NodeOutcome::Loaded,
                    Err(reason) => {
                        let parents_ready =
                            node.parents.iter().all(|p| run.outputs.contains_key(p));
                        if parents_ready && !upstream_blocked {
                            run.compute_and_decide(node, &sig, &mut record, &dag, observer)?;
                        } else {
                            blocked[i] = true;
                            record.outcome = NodeOutcome::Failed {
                                exit_code: None,
                                message: reason.clone(),
                            };
                            first_failure
                                .get_or_insert((node.name.clone(), FailureKind::Load(reason)));
                        }
                    }
                }
            }
            NodeState::Compute if upstream_blocked => {
                blocked[i] = true;
                record.outcome = NodeOutcome::Skipped;
            }
            NodeState::Compute => {
                observer.node_started(&node.name, state);
                run.compute_and_decide(node, &sig, &mut record, &dag, observer)?;
                if let NodeOutcome::Failed { exit_code, message } = &record.outcome {
                    blocked[i] = true;
                    first_failure.get_or_insert((
                        node.name.clone(),
                        FailureKind::Operator(*exit_code, message.clone()),
                    ));
                }
            }
        }
        record.wall_seconds = record.compute_seconds + record.load_seconds + record.write_seconds;
        if state != NodeState::Prune {
            observer.node_finished(&record);
        }
        if !blocked[i] && !matches!(record.outcome, NodeOutcome::Pruned) {
            let out = run.output_of(node);
            run.outputs.insert(node.name.clone(), out);
        }
        records.push(record);
    }

    let totals = records.iter().fold(RunTotals::default(), |mut t, r| {
        t.compute_seconds += r.compute_seconds;
        t.load_seconds += r.load_seconds;
        t.write_seconds += r.write_seconds;
        t.iteration_seconds += r.wall_seconds;
        t
    });
    let success = first_failure.is_none();
    if success {
        run.cache
            .set_previous_signatures(input.signatures.clone())?;
    }
    run.cache.flush()?;
    let report = RunReport {
        iteration_index: input.iteration_index,
        clock_mode: config.clock,
        policy: config.policy.label().to_string(),
        planned_cost_seconds: input.plan.total_cost_seconds,
        nodes: records,
        totals,
        cumulative_seconds: input.prior_cumulative_seconds + totals.iteration_seconds,
        success,
    };
    match first_failure {
        None => Ok(report),
        Some((name, FailureKind::Operator(exit_code, message))) => Err(ExecError::OperatorFailed {
            name,
            exit_code,
            message,
            report: Box::new(report),
        }),
        Some((name, FailureKind::Load(reason))) => Err(ExecError::LoadFailed {
            name,
            reason,
            report: Box::new(report),
        }),
    }
}

enum FailureKind {
    Operator(Option<i32>, String),
    Load(String),
}

impl Run<'_, '_> {
    fn output_of(&self, node: &OperatorNode) -> Output {
        match &node.action {
            Action::Command { output, .. } => Output::File(self.input.workspace.join(output)),
            Action::Simulated { .. } => Output::Synthetic,
        }
    }

    fn load_estimate(&self, name: &str, bytes: u64) -> f64 {
        self.cache
            .manifest()
            .cost_history
            .get(name)
            .and_then(|c| c.load_seconds)
            .unwrap_or_else(|| estimate_load_seconds(bytes, self.config.disk_bandwidth))
    }

    fn load(
        &mut self,
        node: &OperatorNode,
        sig: &NodeSignature,
        record: &mut NodeRecord,
    ) -> Result<(), String> {
        let entry = self
            .cache
            .entry(sig)
            .cloned()
            .ok_or_else(|| format!("no cached copy for signature {sig}"))?;
        let seconds = match (&node.action, self.config.clock) {
            (Action::Command { output, .. }, ClockMode::Real) => {
                let dest = self.input.workspace.join(output);
                self.cache.copy_to(sig, &dest).map_err(|e| e.to_string())?
            }
            (Action::Command { output, .. }, ClockMode::Simulated) => {
                let dest = self.input.workspace.join(output);
                let planned =
                    self.planned_load(&node.name, &entry.measured_load_seconds, entry.output_bytes);
                self.cache.copy_to(sig, &dest).map_err(|e| e.to_string())?;
                // Replace the wall-clock sample with the virtual one.
                self.cache
                    .record_load(sig, planned)
                    .map_err(|e| e.to_string())?;
                planned
            }
            (Action::Simulated { .. }, ClockMode::Real) => {
                let started = Instant::now();
                self.cache.get(sig).map_err(|e| e.to_string())?;
                started.elapsed().as_secs_f64()
            }
            (Action::Simulated { .. }, ClockMode::Simulated) => {
                self.cache.open_payload(sig).map_err(|e| e.to_string())?;
                let planned =
                    self.planned_load(&node.name, &entry.measured_load_seconds, entry.output_bytes);
                self.cache
                    .record_load(sig, planned)
                    .map_err(|e| e.to_string())?;
                planned
            }
        };
        record.load_seconds = seconds;
        let mut history = self
            .cache
            .manifest()
            .cost_history
            .get(&node.name)
            .copied()
            .unwrap_or_else(|| {
                self.input
                    .costs
                    .get(&node.name)
                    .copied()
                    .unwrap_or(CostRecord::uncached(0.0, 0))
            });
        history.load_seconds = Some(seconds);
        history.output_bytes = entry.output_bytes;
        self.cache
            .record_cost(&node.name, history)
            .map_err(|e| e.to_string())?;
        Ok(())
    }

    /// Load time under the virtual clock: what the planner was told.
    fn planned_load(&self, name: &str, measured: &Option<f64>, bytes: u64) -> f64 {
        self.input
            .costs
            .get(name)
            .and_then(|c| c.load_seconds)
            .or(*measured)
            .unwrap_or_else(|| estimate_load_seconds(bytes, self.config.disk_bandwidth))
    }

    fn compute_and_decide(
        &mut self,
        node: &OperatorNode,
        sig: &NodeSignature,
        record: &mut NodeRecord,
        dag: &crate::workflow::Dag,
        observer: &mut dyn ExecutionObserver,
    ) -> Result<(), ExecError> {
        let planned_compute = self
            .input
            .costs
            .get(&node.name)
            .map(|c| c.compute_seconds)
            .unwrap_or(DEFAULT_COMMAND_SECONDS);
        let (seconds, bytes) = match &node.action {
            Action::Simulated {
                compute_seconds,
                output_bytes,
            } => (*compute_seconds, *output_bytes),
            Action::Command { output, .. } => {
                let started = Instant::now();
                match self.run_command(node) {
                    Ok(()) => {}
                    Err((exit_code, message)) => {
                        record.outcome = NodeOutcome::Failed { exit_code, message };
                        return Ok(());
                    }
                }
                let measured = started.elapsed().as_secs_f64();
                let path = self.input.workspace.join(output);
                let bytes = match fs::metadata(&path) {
                    Ok(m) => m.len(),
                    Err(_) => {
                        record.outcome = NodeOutcome::Failed {
                            exit_code: Some(0),
                            message: format!("declared output `{output}` was not produced"),
                        };
                        return Ok(());
                    }
                };
                let seconds = match self.config.clock {
                    ClockMode::Real => measured,
                    ClockMode::Simulated => planned_compute,
                };
                (seconds, bytes)
            }
        };
        record.compute_seconds = seconds;
        record.outcome = NodeOutcome::Computed;

        let load_estimate = self.load_estimate(&node.name, bytes);
        let entry = self
            .decision_costs
            .entry(node.name.clone())
            .or_insert(CostRecord::uncached(seconds, bytes));
        entry.compute_seconds = seconds;
        entry.output_bytes = bytes;
        entry.load_seconds = Some(load_estimate);

        let decision = decide_with(
            self.config.policy,
            &node.name,
            &self.decision_costs,
            dag,
            &self.budget,
        )?;
        observer.decided(&decision);
        record.r_value = Some(decision.r_value);

        if decision.materialize {
            if self.cache.contains(sig) {
                record.materialized = true;
            } else {
                let started = Instant::now();
                match &node.action {
                    Action::Simulated { .. } => {
                        let mut payload = SyntheticPayload::new(sig, bytes);
                        self.cache.put(sig, &node.name, &mut payload, seconds)?;
                    }
                    Action::Command { output, .. } => {
                        let path = self.input.workspace.join(output);
                        let mut file = File::open(&path).map_err(|source| CacheError::Io {
                            path: path.clone(),
                            source,
                        })?;
                        self.cache.put(sig, &node.name, &mut file, seconds)?;
                    }
                }
                self.budget.charge(&decision);
                record.write_seconds = match self.config.clock {
                    ClockMode::Real => started.elapsed().as_secs_f64(),
                    ClockMode::Simulated => load_estimate,
                };
                record.materialized = true;
            }
        }

        let mut history = CostRecord::uncached(seconds, bytes);
        history.load_seconds = self
            .cache
            .manifest()
            .cost_history
            .get(&node.name)
            .and_then(|c| c.load_seconds);
        self.cache.record_cost(&node.name, history)?;
        Ok(())
    }

    fn scratch_dir(&mut self) -> io::Result<&Path> {
        if self.scratch.is_none() {
            self.scratch = Some(tempfile::tempdir()?);
        }
        Ok(self.scratch.as_ref().unwrap().path())
    }

    /// File path of a parent's output, writing synthetic bytes to a scratch
    /// file when the parent is a simulated operator.
    fn parent_path(&mut self, parent: &str) -> io::Result<PathBuf> {
        match self.outputs.get(parent).cloned() {
            Some(Output::File(p)) => Ok(p),
            Some(Output::Synthetic) => {
                let sig = self.input.signatures[parent].clone();
                let bytes = match self.input.spec.node(parent).map(|n| &n.action) {
                    Some(Action::Simulated { output_bytes, .. }) => *output_bytes,
                    _ => 0,
                };
                let path = self.scratch_dir()?.join(format!("{parent}.bin"));
                if !path.exists() {
                    let mut out = File::create(&path)?;
                    io::copy(&mut SyntheticPayload::new(&sig, bytes), &mut out)?;
                }
                self.outputs
                    .insert(parent.to_string(), Output::File(path.clone()));
                Ok(path)
            }
            None => Err(io::Error::new(
                io::ErrorKind::NotFound,
                format!("output of `{parent}` is not available"),
            )),
        }
    }

    fn expand_argv(&mut self, node: &OperatorNode) -> io::Result<Vec<String>> {
        let Action::Command { argv, output, .. } = &node.action else {
            unreachable!("only commands have argv")
        };
        let workspace = self.input.workspace.to_path_buf();
        let output_path = workspace.join(output);
        let mut parent_paths = Vec::new();
        for p in &node.parents {
            parent_paths.push((p.clone(), self.parent_path(p)?));
        }
        let mut out = Vec::with_capacity(argv.len());
        for arg in argv {
            match arg.as_str() {
                "{parents}" => {
                    out.extend(parent_paths.iter().map(|(_, p)| p.display().to_string()))
                }
                "{sources}" => out.extend(
                    node.sources
                        .iter()
                        .map(|s| workspace.join(s).display().to_string()),
                ),
                _ => {
                    let mut a = arg
                        .replace("{output}", &output_path.display().to_string())
                        .replace("{workspace}", &workspace.display().to_string());
                    for (name, path) in &parent_paths {
                        a = a.replace(&format!("{{parent:{name}}}"), &path.display().to_string());
                    }
                    out.push(a);
                }
            }
        }
        Ok(out)
    }

    fn run_command(&mut self, node: &OperatorNode) -> Result<(), (Option<i32>, String)> {
        let Action::Command { output, .. } = &node.action else {
            unreachable!("only commands are run")
        };
        let argv = self.expand_argv(node).map_err(|e| (None, e.to_string()))?;
        let output_path = self.input.workspace.join(output);
        if let Some(parent) = output_path.parent() {
            fs::create_dir_all(parent).map_err(|e| (None, e.to_string()))?;
        }
        // A stale output from an earlier run must not mask a failure to
        // produce one now.
        let _ = fs::remove_file(&output_path);
        let result = Command::new(&argv[0])
            .args(&argv[1..])
            .current_dir(self.input.workspace)
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .output()
            .map_err(|e| (None, format!("cannot start `{}`: {e}", argv[0])))?;
        if result.status.success() {
            Ok(())
        } else {
            let stderr = String::from_utf8_lossy(&result.stderr);
            let tail: String = stderr
                .lines()
                .rev()
                .take(5)
                .collect::<Vec<_>>()
                .into_iter()
                .rev()
                .collect::<Vec<_>>()
                .join("\n");
            Err((result.status.code(), tail))
        }
    }
}
