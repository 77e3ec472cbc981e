//! Python bindings for iterflow.
//!
//! Workflows, plans and reports cross the boundary as plain Python values:
//! dicts, lists and JSON-compatible structures.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;

use iterflow::engine::{read_spec, run_iteration_spec};
use iterflow::executor::NoopObserver;
use iterflow::policy::StorageBudget;
use iterflow::scenarios;
use iterflow::sim::{self, SimulationConfig};
use iterflow::{
    ClockMode, CostRecord, Error, NodeSignature, PolicyConfig, PolicyDirection, RunConfig,
    WorkflowSpec,
};

create_exception!(iterflow_py, IterflowError, PyException);

fn to_py_err(err: impl std::fmt::Display) -> PyErr {
    IterflowError::new_err(err.to_string())
}

fn value_err(err: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(err.to_string())
}

/// Round-trip a serializable value through `json.loads`.
fn to_python<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(value_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

/// A validated workflow DAG.
#[pyclass(name = "Workflow", module = "iterflow_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyWorkflow {
    inner: WorkflowSpec,
}

#[pymethods]
impl PyWorkflow {
    /// Parse and validate a workflow document.
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        iterflow::parse_workflow(text)
            .map(|inner| PyWorkflow { inner })
            .map_err(value_err)
    }

    #[staticmethod]
    fn from_file(path: PathBuf) -> PyResult<Self> {
        read_spec(&path)
            .map(|inner| PyWorkflow { inner })
            .map_err(|e| match e {
                Error::Workflow(w) => value_err(w),
                other => to_py_err(other),
            })
    }

    /// One of the bundled simulator workflows ("ie", "classification").
    #[staticmethod]
    fn scenario(name: &str) -> PyResult<Self> {
        scenarios::scenario(name)
            .map(|s| PyWorkflow { inner: s.spec })
            .ok_or_else(|| value_err(format!("unknown scenario `{name}`")))
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn nodes(&self) -> Vec<String> {
        self.inner.nodes.iter().map(|n| n.name.clone()).collect()
    }

    #[getter]
    fn outputs(&self) -> Vec<String> {
        self.inner.outputs.clone()
    }

    fn kind(&self, node: &str) -> PyResult<String> {
        self.inner
            .node(node)
            .map(|n| n.kind.clone())
            .ok_or_else(|| value_err(format!("unknown node `{node}`")))
    }

    fn parents(&self, node: &str) -> PyResult<Vec<String>> {
        self.inner
            .node(node)
            .map(|n| n.parents.clone())
            .ok_or_else(|| value_err(format!("unknown node `{node}`")))
    }

    fn topological_order(&self) -> Vec<String> {
        self.inner.topological_order()
    }

    /// The live workflow and the names of the removed dead operators.
    fn prune_dead_operators(&self) -> (PyWorkflow, BTreeSet<String>) {
        let (live, removed) = self.inner.prune_dead_operators();
        (PyWorkflow { inner: live }, removed)
    }

    /// Copy with `env_fingerprint` of `node` set, which changes its
    /// signature and those of its descendants.
    fn with_fingerprint(&self, node: &str, fingerprint: Option<String>) -> PyResult<PyWorkflow> {
        let mut inner = self.inner.clone();
        let n = inner
            .nodes
            .iter_mut()
            .find(|n| n.name == node)
            .ok_or_else(|| value_err(format!("unknown node `{node}`")))?;
        n.env_fingerprint = fingerprint;
        Ok(PyWorkflow { inner })
    }

    fn __len__(&self) -> usize {
        self.inner.nodes.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Workflow(nodes={}, outputs={:?})",
            self.inner.nodes.len(),
            self.inner.outputs
        )
    }
}

/// Signature of every node, keyed by name.
#[pyfunction]
fn signatures(workflow: &PyWorkflow, workspace: PathBuf) -> PyResult<BTreeMap<String, String>> {
    let sigs = iterflow::compute_signatures(&workflow.inner, &workspace).map_err(to_py_err)?;
    Ok(sigs
        .into_iter()
        .map(|(k, v)| (k, v.as_str().to_string()))
        .collect())
}

/// Compare two signature maps.
#[pyfunction]
fn diff<'py>(
    py: Python<'py>,
    previous: BTreeMap<String, String>,
    current: BTreeMap<String, String>,
) -> PyResult<Bound<'py, PyAny>> {
    let wrap = |m: BTreeMap<String, String>| -> BTreeMap<String, NodeSignature> {
        m.into_iter()
            .map(|(k, v)| (k, NodeSignature::from_hex(v)))
            .collect()
    };
    to_python(
        py,
        &iterflow::diff_iterations(&wrap(previous), &wrap(current)),
    )
}

/// Costs as {name: (compute_seconds, load_seconds or None)}.
type CostInput = BTreeMap<String, (f64, Option<f64>)>;

fn cost_records(costs: CostInput) -> BTreeMap<String, CostRecord> {
    costs
        .into_iter()
        .map(|(k, (c, l))| {
            let record = CostRecord {
                compute_seconds: c,
                load_seconds: l,
                output_bytes: 0,
            };
            (k, record)
        })
        .collect()
}

fn run_planner<'py>(
    py: Python<'py>,
    workflow: &PyWorkflow,
    costs: CostInput,
    mandatory: BTreeSet<String>,
    sinks: Option<BTreeSet<String>>,
    exhaustive: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let dag = workflow.inner.dag();
    let sinks = sinks.unwrap_or_else(|| workflow.inner.output_set());
    let costs = cost_records(costs);
    let plan = if exhaustive {
        iterflow::assign_states_bruteforce(&dag, &costs, &mandatory, &sinks)
    } else {
        iterflow::assign_states_optimal(&dag, &costs, &mandatory, &sinks)
    }
    .map_err(value_err)?;
    to_python(py, &plan)
}

/// Cheapest legal Compute/Load/Prune assignment.
#[pyfunction]
#[pyo3(signature = (workflow, costs, mandatory, sinks=None))]
fn plan_optimal<'py>(
    py: Python<'py>,
    workflow: &PyWorkflow,
    costs: CostInput,
    mandatory: BTreeSet<String>,
    sinks: Option<BTreeSet<String>>,
) -> PyResult<Bound<'py, PyAny>> {
    run_planner(py, workflow, costs, mandatory, sinks, false)
}

/// Same result by exhaustive search; at most 15 nodes.
#[pyfunction]
#[pyo3(signature = (workflow, costs, mandatory, sinks=None))]
fn plan_bruteforce<'py>(
    py: Python<'py>,
    workflow: &PyWorkflow,
    costs: CostInput,
    mandatory: BTreeSet<String>,
    sinks: Option<BTreeSet<String>>,
) -> PyResult<Bound<'py, PyAny>> {
    run_planner(py, workflow, costs, mandatory, sinks, true)
}

/// Benefit of keeping `node`: its compute time plus its ancestors', minus
/// twice its load time.
#[pyfunction]
fn r_value(workflow: &PyWorkflow, costs: CostInput, node: &str) -> PyResult<f64> {
    iterflow::r_value(node, &cost_records(costs), &workflow.inner.dag()).map_err(value_err)
}

/// Whether `node` should be materialized, given its output size and the
/// remaining budget.
#[pyfunction]
#[pyo3(signature = (workflow, costs, node, output_bytes, budget_bytes=None, direction="savings-positive"))]
fn decide<'py>(
    py: Python<'py>,
    workflow: &PyWorkflow,
    costs: CostInput,
    node: &str,
    output_bytes: u64,
    budget_bytes: Option<u64>,
    direction: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let direction: PolicyDirection = direction.parse().map_err(value_err)?;
    let mut records = cost_records(costs);
    if let Some(r) = records.get_mut(node) {
        r.output_bytes = output_bytes;
    }
    let budget = budget_bytes.map_or_else(StorageBudget::unlimited, |b| StorageBudget::new(b, 0));
    let decision = iterflow::decide(node, &records, &workflow.inner.dag(), &budget, direction)
        .map_err(value_err)?;
    to_python(py, &decision)
}

/// Sample `n` edits by kind. `frequencies` is (pre-processing, ml,
/// evaluation).
#[pyfunction]
#[pyo3(signature = (workflow, n, seed, frequencies=sim::DEFAULT_KIND_FREQUENCIES))]
fn generate_trace<'py>(
    py: Python<'py>,
    workflow: &PyWorkflow,
    n: usize,
    seed: u64,
    frequencies: [f64; 3],
) -> PyResult<Bound<'py, PyAny>> {
    let trace = sim::generate_trace(&workflow.inner, frequencies, n, seed).map_err(value_err)?;
    to_python(py, &trace)
}

/// Replay a generated trace under `policy` and return the per-iteration
/// records.
#[pyfunction]
#[pyo3(signature = (workflow, policy="engine", n=10, seed=7, budget_bytes=None, disk_bandwidth=scenarios::SCENARIO_DISK_BANDWIDTH))]
fn simulate<'py>(
    py: Python<'py>,
    workflow: &PyWorkflow,
    policy: &str,
    n: usize,
    seed: u64,
    budget_bytes: Option<u64>,
    disk_bandwidth: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let policy: PolicyConfig = policy.parse().map_err(value_err)?;
    let trace = sim::generate_trace(&workflow.inner, sim::DEFAULT_KIND_FREQUENCIES, n, seed)
        .map_err(value_err)?;
    let config = SimulationConfig {
        policy,
        budget_bytes,
        disk_bandwidth,
    };
    let result = sim::simulate(&workflow.inner, &trace, &config).map_err(to_py_err)?;
    to_python(py, &result.records)
}

/// Run one iteration. Returns the run report, or the plan for a dry run.
#[pyfunction]
#[pyo3(signature = (workflow, workspace, cache_root, clock="real", dry_run=false, policy="engine", budget_bytes=None))]
#[allow(clippy::too_many_arguments)]
fn run_iteration<'py>(
    py: Python<'py>,
    workflow: &PyWorkflow,
    workspace: PathBuf,
    cache_root: PathBuf,
    clock: &str,
    dry_run: bool,
    policy: &str,
    budget_bytes: Option<u64>,
) -> PyResult<Bound<'py, PyAny>> {
    let config = RunConfig {
        clock: clock.parse::<ClockMode>().map_err(value_err)?,
        policy: policy.parse().map_err(value_err)?,
        budget_bytes,
        dry_run,
        ..RunConfig::default()
    };
    let outcome = run_iteration_spec(
        &workflow.inner,
        &workspace,
        &cache_root,
        &config,
        &mut NoopObserver,
    )
    .map_err(to_py_err)?;
    match outcome.report {
        Some(report) => to_python(py, &report),
        None => to_python(py, &outcome.prepared.plan),
    }
}

#[pymodule]
fn iterflow_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    register(m)
}

/// Add every class and function to `m`.
pub fn register(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("IterflowError", m.py().get_type::<IterflowError>())?;
    m.add_class::<PyWorkflow>()?;
    m.add_function(wrap_pyfunction!(signatures, m)?)?;
    m.add_function(wrap_pyfunction!(diff, m)?)?;
    m.add_function(wrap_pyfunction!(plan_optimal, m)?)?;
    m.add_function(wrap_pyfunction!(plan_bruteforce, m)?)?;
    m.add_function(wrap_pyfunction!(r_value, m)?)?;
    m.add_function(wrap_pyfunction!(decide, m)?)?;
    m.add_function(wrap_pyfunction!(generate_trace, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(run_iteration, m)?)?;
    Ok(())
}
